#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "featmine/checkpoint.hpp"
#include "featmine/config.hpp"
#include "featmine/probe.hpp"
#include "featmine/trainer.hpp"

namespace featmine {

namespace fs = std::filesystem;

/// Shortest text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string shortest = buf;
  for (int precision = 6; precision < 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return shortest;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::vector<char> bytes(text.begin(), text.end());
  detail::write_file_atomically(path, bytes);
}

struct PreparedData {
  Dataset train;
  Dataset test;
};

/// Loads or generates both splits, then applies the configured subset and
/// label noise to the training split. Test labels stay clean.
inline PreparedData prepare_data(const RunConfig& c) {
  PreparedData d;
  if (c.data.source == "cifar") {
    d.train = load_cifar(c.data.root, c.data.version, Split::train);
    d.test = load_cifar(c.data.root, c.data.version, Split::test);
  } else {
    d.train = make_synthetic(c.data.synthetic, Split::train);
    SyntheticSpec test_spec = c.data.synthetic;
    test_spec.per_class = c.data.synthetic_test_per_class;
    d.test = make_synthetic(test_spec, Split::test);
  }
  if (c.data.subset_per_class) d.train = subset_per_class(d.train, {*c.data.subset_per_class, c.seeds.subset});
  if (c.data.noise) {
    NoiseSpec n = *c.data.noise;
    n.seed = c.seeds.noise;
    d.train = corrupt_labels(d.train, n);
  }
  return d;
}

inline json provenance_to_json(const Provenance& p) {
  json j{{"sources", p.sources}, {"synthetic", nullptr}, {"noise", nullptr}, {"subset", nullptr}};
  if (p.synthetic) {
    j["synthetic"] = {{"num_classes", p.synthetic->num_classes},
                      {"per_class", p.synthetic->per_class},
                      {"side", p.synthetic->side},
                      {"seed", p.synthetic->seed},
                      {"noise", p.synthetic->noise}};
  }
  if (p.noise) {
    j["noise"] = {{"kind", std::string(to_string(p.noise->kind))},
                  {"epsilon", p.noise->epsilon},
                  {"seed", p.noise->seed},
                  {"stream", "noise"}};
  }
  if (p.subset) {
    j["subset"] = {{"per_class", p.subset->per_class}, {"seed", p.subset->seed}, {"stream", "subset"}};
  }
  return j;
}

inline std::string metrics_csv(const FMConfig& fm, const std::vector<RunRecord>& records) {
  std::ostringstream out;
  out << "# featmine metrics v1\n";
  out << "epoch,lr";
  for (const auto& name : head_names(fm)) out << ",loss_" << name;
  out << ",train_acc,val_acc,peak_mem_bytes\n";
  for (const auto& r : records) {
    out << r.epoch << ',' << format_number(r.lr);
    for (double l : r.per_head_train_loss) out << ',' << format_number(l);
    out << ',' << format_number(r.train_acc) << ',' << format_number(r.val_acc) << ','
        << r.peak_mem_bytes << '\n';
  }
  return out.str();
}

inline std::string timing_csv(const std::vector<RunRecord>& records) {
  std::ostringstream out;
  out << "# featmine timing v1\nepoch,sec_per_iter\n";
  for (const auto& r : records) out << r.epoch << ',' << format_number(r.sec_per_iter) << '\n';
  return out.str();
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.stddev = std::sqrt(ss / double(v.size() - 1));
  }
  return m;
}

struct RunOutcome {
  TrainResult result;
  double best_val_acc = 0.0;
  double final_val_acc = 0.0;
  fs::path dir;
};

/// One training run into `dir`: metrics.csv, timing.csv, best.ckpt,
/// final.ckpt, config.json (the exact config that reproduces this run) and
/// provenance.json.
inline RunOutcome run_training(const RunConfig& config, const PreparedData& data,
                               const fs::path& dir, std::ostream* log = nullptr) {
  fs::create_directories(dir);
  RunConfig resolved = config;
  resolved.output_dir = dir.string();
  write_text_file(dir / "config.json", serialize_config(resolved));
  write_text_file(dir / "provenance.json", provenance_to_json(data.train.provenance).dump(2) + "\n");

  Model model(config.model, RngStream("init", config.seeds.init));
  FeatureMining<float> fm(config.fm, config.model, RngStream("init.fm", config.seeds.init));
  TrainOptions options;
  options.augment = config.data.augment;
  options.mixup_alpha = config.data.mixup_alpha;
  if (log) {
    options.on_epoch = [log](const RunRecord& r) {
      *log << "epoch " << r.epoch << " lr " << format_number(r.lr) << " loss "
           << format_number(r.per_head_train_loss.front()) << " train " << format_number(r.train_acc)
           << "% val " << format_number(r.val_acc) << "%\n";
      log->flush();
    };
  }
  RunOutcome out;
  out.dir = dir;
  out.result = train(model, fm, data.train, &data.test, config.schedule, config.seeds, options);
  out.best_val_acc = out.result.best_val_acc;
  out.final_val_acc = out.result.records.back().val_acc;

  write_text_file(dir / "metrics.csv", metrics_csv(config.fm, out.result.records));
  write_text_file(dir / "timing.csv", timing_csv(out.result.records));
  Checkpoint final_ckpt = make_checkpoint(model, &fm, config.keep_fm_heads);
  final_ckpt.meta = {{"epoch", config.schedule.epochs}, {"val_acc", out.final_val_acc}};
  save_checkpoint(dir / "final.ckpt", final_ckpt);
  Checkpoint best = final_ckpt;
  best.model_state = out.result.best_state;
  if (best.fm) best.fm_state = out.result.best_fm_state;
  best.meta = {{"epoch", out.result.best_epoch}, {"val_acc", out.best_val_acc}};
  save_checkpoint(dir / "best.ckpt", best);
  return out;
}

/// Runs every repeat (seed offset) of `config`. A single repeat writes
/// straight into `dir`; several write to dir/seed_<offset> plus a
/// summary.csv with mean and standard deviation.
inline std::vector<RunOutcome> run_repeats(const RunConfig& config, const PreparedData& data,
                                           const fs::path& dir, std::ostream* log = nullptr) {
  std::vector<RunOutcome> outcomes;
  for (auto offset : config.repeats) {
    RunConfig c = config;
    c.seeds = config.seeds.offset(offset);
    c.repeats = {0};
    const fs::path run_dir = config.repeats.size() == 1 ? dir : dir / ("seed_" + std::to_string(offset));
    if (log) *log << "run " << run_dir.string() << "\n";
    outcomes.push_back(run_training(c, data, run_dir, log));
  }
  if (config.repeats.size() > 1) {
    std::ostringstream out;
    out << "# featmine summary v1\nrun,best_epoch,best_val_acc,final_val_acc\n";
    std::vector<double> best, final_acc;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      out << "seed_" << config.repeats[i] << ',' << outcomes[i].result.best_epoch << ','
          << format_number(outcomes[i].best_val_acc) << ','
          << format_number(outcomes[i].final_val_acc) << '\n';
      best.push_back(outcomes[i].best_val_acc);
      final_acc.push_back(outcomes[i].final_val_acc);
    }
    const auto b = mean_std(best), f = mean_std(final_acc);
    out << "mean,," << format_number(b.mean) << ',' << format_number(f.mean) << '\n';
    out << "std,," << format_number(b.stddev) << ',' << format_number(f.stddev) << '\n';
    write_text_file(dir / "summary.csv", out.str());
  }
  return outcomes;
}

/// Baseline, FM on 1/2/3 stages, and the point, channel and
/// non-complementary variants on the last two stages.
inline std::vector<AblationVariant> standard_ablation() {
  auto fm = [](std::vector<std::string> sites, MaskKind kind = MaskKind::box,
               Pairing pairing = Pairing::complementary) {
    FMConfig c;
    c.enabled = !sites.empty();
    c.sites = std::move(sites);
    c.variant = kind;
    c.pairing = pairing;
    return c;
  };
  return {{"baseline", fm({})},
          {"fm_1_site", fm({"stage3"})},
          {"fm_2_sites", fm({"stage2", "stage3"})},
          {"fm_3_sites", fm({"stage1", "stage2", "stage3"})},
          {"point_mask", fm({"stage2", "stage3"}, MaskKind::point)},
          {"channel_mask", fm({"stage2", "stage3"}, MaskKind::channel)},
          {"non_complementary", fm({"stage2", "stage3"}, MaskKind::box, Pairing::non_complementary)}};
}

struct AblationRow {
  std::string name;
  FMConfig fm;
  std::vector<double> accuracies;
  MeanStd summary;
};

/// Trains every variant with the same seeds into dir/<variant> and writes
/// dir/ablation.csv with one row per variant (final-epoch top-1).
inline std::vector<AblationRow> run_ablation(const RunConfig& config, const PreparedData& data,
                                             const fs::path& dir, std::ostream* log = nullptr) {
  const auto variants = config.ablation.empty() ? standard_ablation() : config.ablation;
  for (const auto& v : variants) {
    if (v.name.find('/') != std::string::npos || v.name == "." || v.name == "..") {
      throw ConfigError("ablation: invalid variant name '" + v.name + "'");
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig c = config;
    c.fm = v.fm;
    c.ablation.clear();
    if (log) *log << "variant " << v.name << "\n";
    AblationRow row{v.name, v.fm, {}, {}};
    for (const auto& o : run_repeats(c, data, dir / v.name, log)) row.accuracies.push_back(o.final_val_acc);
    row.summary = mean_std(row.accuracies);
    rows.push_back(std::move(row));
  }
  std::ostringstream out;
  out << "# featmine ablation v1\nvariant,sites,mask,pairing,runs,mean_final_top1,std_final_top1\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.fm.active_sites() << ',' << (r.fm.enabled ? to_string(r.fm.variant) : "none")
        << ',' << (r.fm.enabled ? to_string(r.fm.pairing) : "none") << ',' << r.accuracies.size()
        << ',' << format_number(r.summary.mean) << ',' << format_number(r.summary.stddev) << '\n';
  }
  write_text_file(dir / "ablation.csv", out.str());
  return rows;
}

inline std::string overhead_csv(const std::vector<OverheadRow>& rows) {
  std::ostringstream out;
  out << "# featmine overhead v1\nconfig,sites,sec_per_iter,peak_mem_bytes,time_ratio,mem_ratio\n";
  for (const auto& r : rows) {
    out << r.label << ',' << r.sites << ',' << format_number(r.sec_per_iter) << ','
        << r.peak_mem_bytes << ',' << format_number(r.time_ratio) << ','
        << format_number(r.mem_ratio) << '\n';
  }
  return out.str();
}

inline std::string activation_csv(const std::vector<std::pair<std::string, ActivationStats>>& rows) {
  std::ostringstream out;
  out << "# featmine activations v1\ncheckpoint,layer,threshold,samples,mean_count\n";
  for (const auto& [ckpt, s] : rows) {
    out << ckpt << ',' << s.layer_id << ',' << format_number(s.threshold) << ',' << s.sample_count
        << ',' << format_number(s.count_per_sample) << '\n';
  }
  return out.str();
}

}  // namespace featmine
