#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "featmine/experiment.hpp"

namespace featmine {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3, kExitFormat = 4 };

namespace cli {

struct Overrides {
  std::string config;
  std::string output_dir;
  std::string data_root;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<int> max_iters;
  std::vector<int> milestones;
  std::vector<std::uint64_t> repeats;

  void add_to(CLI::App& app) {
    app.add_option("-c,--config", config, "JSON run configuration")->required();
    app.add_option("-o,--output-dir", output_dir, "Output directory (overrides output_dir)");
    app.add_option("--data-root", data_root, "CIFAR directory (overrides data.root and the environment)");
    app.add_option("--epochs", epochs, "Epoch count; milestones are rescaled unless --milestones is given");
    app.add_option("--batch-size", batch_size, "Training batch size");
    app.add_option("--max-iters", max_iters, "Cap on iterations per epoch (0 = full epochs)");
    app.add_option("--milestones", milestones, "Epochs at which the learning rate decays");
    app.add_option("--repeats", repeats, "Seed offsets to run");
  }

  RunConfig resolve() const {
    RunConfig c = load_config(config);
    if (!output_dir.empty()) c.output_dir = output_dir;
    if (!data_root.empty()) c.data.root = data_root;
    if (epochs) {
      if (milestones.empty()) {
        std::vector<int> scaled;
        for (int m : c.schedule.milestones) {
          const int s = static_cast<int>(std::lround(double(m) * *epochs / c.schedule.epochs));
          if (s >= 1 && s < *epochs && (scaled.empty() || s > scaled.back())) scaled.push_back(s);
        }
        c.schedule.milestones = scaled;
      }
      c.schedule.epochs = *epochs;
    }
    if (!milestones.empty()) c.schedule.milestones = milestones;
    if (batch_size) c.schedule.batch_size = *batch_size;
    if (max_iters) c.schedule.max_iters_per_epoch = *max_iters;
    if (!repeats.empty()) c.repeats = repeats;
    c.validate();
    return c;
  }
};

inline void write_eval_csv(const fs::path& path, const std::string& checkpoint, const Dataset& ds,
                           double top1) {
  std::ostringstream out;
  out << "# featmine eval v1\ncheckpoint,split,samples,top1\n"
      << checkpoint << ',' << to_string(ds.split) << ',' << ds.size() << ',' << format_number(top1) << '\n';
  write_text_file(path, out.str());
}

inline std::string provenance_sidecar(const Dataset& ds, const std::string& input) {
  json j = provenance_to_json(ds.provenance);
  j["input"] = input;
  j["version"] = ds.version;
  j["records"] = ds.size();
  return j.dump(2) + "\n";
}

inline void write_derived(const Dataset& ds, const std::string& input, const fs::path& output) {
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  const fs::path tmp = output.string() + ".tmp";
  write_cifar(ds, tmp);
  fs::rename(tmp, output);
  write_text_file(output.string() + ".provenance.json", provenance_sidecar(ds, input));
}

inline std::string checkpoint_label(const std::string& path, std::size_t index) {
  const fs::path p(path);
  std::string parent = p.parent_path().filename().string();
  return "c" + std::to_string(index) + "_" + (parent.empty() ? "" : parent + "_") + p.stem().string();
}

inline void run_probe(const RunConfig& c, const PreparedData& data, std::ostream& log) {
  const fs::path dir = c.output_dir;
  std::vector<std::pair<std::string, ActivationStats>> rows;
  std::vector<Model> models;
  for (const auto& path : c.probe.checkpoints) models.push_back(model_from_checkpoint(load_checkpoint(path)));
  for (const auto& m : models) {
    if (m.spec().num_classes != c.dataset_classes() || m.spec().input_size != data.test.side) {
      throw ConfigError("probe: checkpoint does not match the configured dataset");
    }
  }
  if (static_cast<std::size_t>(c.probe.samples) > data.test.size()) {
    throw ConfigError(detail::concat("probe.samples: ", c.probe.samples, " exceeds the ",
                                     data.test.size(), " test images"));
  }
  fs::create_directories(dir);
  write_text_file(dir / "config.json", serialize_config(c));
  const auto norm = Normalization::for_version(data.test.version);
  const std::size_t cams = std::min<std::size_t>(static_cast<std::size_t>(c.probe.cam_images), data.test.size());
  for (std::size_t k = 0; k < models.size(); ++k) {
    const auto& path = c.probe.checkpoints[k];
    for (auto& s : activation_counts(models[k], data.test, c.probe.stages, c.probe.threshold,
                                     c.probe.samples, c.seeds.probe)) {
      log << path << ' ' << s.layer_id << ' ' << format_number(s.count_per_sample) << '\n';
      rows.emplace_back(path, std::move(s));
    }
    const auto label = checkpoint_label(path, k);
    for (std::size_t i = 0; i < cams; ++i) {
      const std::size_t idx[1] = {i};
      const auto cam = compute_cam(models[k], make_batch(data.test, idx, norm).images, data.test.labels[i]);
      write_cam_ppm(cam, (dir / (label + "_cam" + std::to_string(i) + ".ppm")).string());
      write_cam_overlay_ppm(data.test.image(i), data.test.side, cam,
                            (dir / (label + "_overlay" + std::to_string(i) + ".ppm")).string());
    }
  }
  write_text_file(dir / "activations.csv", activation_csv(rows));

  if (!c.probe.fixed_mask.empty()) {
    const fs::path sub = dir / ("fixed_" + c.probe.fixed_mask);
    fs::create_directories(sub);
    Model model(c.model, RngStream("init", c.seeds.init));
    const auto last = model.stage_size(stage_names().size() - 1);
    const auto mask = named_fixed_mask(c.probe.fixed_mask, last, last);
    write_pgm(mask, (sub / "mask.pgm").string());
    const auto r = fixed_mask_training_experiment(model, mask, data.train, data.test, c.schedule,
                                                  c.seeds, c.probe.cam_images, c.data.augment);
    write_text_file(sub / "metrics.csv", metrics_csv(FMConfig{}, r.training.records));
    for (std::size_t i = 0; i < r.cams.size(); ++i) {
      const auto n = std::to_string(r.cam_indices[i]);
      write_cam_ppm(r.cams[i], (sub / ("cam" + n + ".ppm")).string());
      write_cam_overlay_ppm(data.test.image(r.cam_indices[i]), data.test.side, r.cams[i],
                            (sub / ("overlay" + n + ".ppm")).string());
    }
    log << "fixed mask " << c.probe.fixed_mask << " best val " << format_number(r.training.best_val_acc) << "%\n";
  }
}

}  // namespace cli

/// Entry point of the featmine tool. Returns the process exit code:
/// 0 success, 2 configuration or usage error, 3 runtime failure
/// (divergence, bad input values), 4 malformed data or checkpoint file.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"featmine: Feature Mining training and analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "featmine 1.0");

  cli::Overrides train_o, ablate_o, probe_o, overhead_o, eval_o;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  auto* train_cmd = app.add_subcommand("train", "Train one configuration (all repeats)");
  train_o.add_to(*train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on the test split");
  eval_o.add_to(*eval_cmd);
  std::string eval_checkpoint, eval_output;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file (overrides checkpoint)");
  eval_cmd->add_option("--output", eval_output, "Write the result as CSV");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every ablation variant and tabulate");
  ablate_o.add_to(*ablate_cmd);

  auto* probe_cmd = app.add_subcommand("probe", "Activation counts, CAMs and fixed-mask runs");
  probe_o.add_to(*probe_cmd);
  std::vector<std::string> probe_checkpoints;
  std::string probe_fixed_mask;
  probe_cmd->add_option("--checkpoint", probe_checkpoints, "Checkpoints to compare (repeatable)");
  probe_cmd->add_option("--fixed-mask", probe_fixed_mask, "Named fixed mask for an observation run");

  auto* overhead_cmd = app.add_subcommand("overhead", "Time and memory of FM against the baseline");
  overhead_o.add_to(*overhead_cmd);
  std::optional<int> overhead_iters;
  overhead_cmd->add_option("--iters", overhead_iters, "Timed iterations per configuration");

  std::string d_input, d_output, d_kind = "symmetric", d_split = "train";
  int d_version = 10, d_per_class = 0;
  double d_epsilon = 0.0;
  std::uint64_t d_seed = 0;
  auto add_derive = [&](CLI::App* cmd) {
    cmd->add_option("--input", d_input, "CIFAR binary file or directory")->required();
    cmd->add_option("--output", d_output, "Output CIFAR binary file")->required();
    cmd->add_option("--version", d_version, "10 or 100")->check(CLI::IsMember({10, 100}));
    cmd->add_option("--split", d_split, "train or test")->check(CLI::IsMember({"train", "test"}));
    cmd->add_option("--seed", d_seed, "Seed of the derivation stream");
  };
  auto* corrupt_cmd = app.add_subcommand("corrupt", "Write a label-noise copy of a CIFAR split");
  add_derive(corrupt_cmd);
  corrupt_cmd->add_option("--kind", d_kind, "symmetric or pair")->check(CLI::IsMember({"symmetric", "pair"}));
  corrupt_cmd->add_option("--epsilon", d_epsilon, "Fraction of labels to flip")->required();
  auto* subset_cmd = app.add_subcommand("subset", "Write a class-balanced subset of a CIFAR split");
  add_derive(subset_cmd);
  subset_cmd->add_option("--per-class", d_per_class, "Images kept per class")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  std::ostringstream sink;
  std::ostream& log = quiet ? sink : out;
  try {
    if (*train_cmd) {
      const auto c = train_o.resolve();
      const auto data = prepare_data(c);
      const auto outcomes = run_repeats(c, data, c.output_dir, &log);
      for (const auto& o : outcomes) {
        log << o.dir.string() << ": best " << format_number(o.best_val_acc) << "% at epoch "
            << o.result.best_epoch << ", final " << format_number(o.final_val_acc) << "%\n";
      }
    } else if (*eval_cmd) {
      auto c = eval_o.resolve();
      if (!eval_checkpoint.empty()) c.checkpoint = eval_checkpoint;
      if (c.checkpoint.empty()) throw ConfigError("eval: no checkpoint given");
      auto model = model_from_checkpoint(load_checkpoint(c.checkpoint));
      const auto data = prepare_data(c);
      if (model.spec().num_classes != data.test.num_classes || model.spec().input_size != data.test.side) {
        throw ConfigError("eval: checkpoint does not match the configured dataset");
      }
      const double top1 = evaluate(model, data.test, 256);
      out << "top1 " << format_number(top1) << "\n";
      if (!eval_output.empty()) cli::write_eval_csv(eval_output, c.checkpoint, data.test, top1);
    } else if (*ablate_cmd) {
      const auto c = ablate_o.resolve();
      const auto data = prepare_data(c);
      for (const auto& row : run_ablation(c, data, c.output_dir, &log)) {
        log << row.name << ' ' << format_number(row.summary.mean) << " +- "
            << format_number(row.summary.stddev) << '\n';
      }
    } else if (*probe_cmd) {
      auto c = probe_o.resolve();
      if (!probe_checkpoints.empty()) c.probe.checkpoints = probe_checkpoints;
      if (!probe_fixed_mask.empty()) c.probe.fixed_mask = probe_fixed_mask;
      if (c.probe.checkpoints.empty() && c.probe.fixed_mask.empty()) {
        throw ConfigError("probe: give at least one checkpoint or a fixed mask");
      }
      if (!c.probe.fixed_mask.empty()) named_fixed_mask(c.probe.fixed_mask, 2, 2);
      for (const auto& s : c.probe.stages) stage_index(s);
      const auto data = prepare_data(c);
      cli::run_probe(c, data, log);
    } else if (*overhead_cmd) {
      auto c = overhead_o.resolve();
      if (overhead_iters) c.overhead.iters = *overhead_iters;
      c.validate();
      const int batch = overhead_o.batch_size ? *overhead_o.batch_size : c.overhead.batch_size;
      const auto rows = measure_overhead(c.model, standard_overhead_configs(c.fm.variant), batch,
                                         c.overhead.iters, c.overhead.warmup, c.seeds);
      fs::create_directories(c.output_dir);
      write_text_file(fs::path(c.output_dir) / "overhead.csv", overhead_csv(rows));
      for (const auto& r : rows) {
        log << r.label << " time x" << format_number(r.time_ratio) << " memory x"
            << format_number(r.mem_ratio) << '\n';
      }
    } else if (*corrupt_cmd || *subset_cmd) {
      const Split split = d_split == "train" ? Split::train : Split::test;
      auto ds = load_cifar(d_input, d_version, split);
      if (*corrupt_cmd) {
        ds = corrupt_labels(ds, {parse_noise_kind(d_kind), d_epsilon, d_seed});
      } else {
        ds = subset_per_class(ds, {d_per_class, d_seed});
      }
      cli::write_derived(ds, d_input, d_output);
      log << "wrote " << ds.size() << " records to " << d_output << '\n';
    }
  } catch (const FormatError& e) {
    err << "error: " << e.what() << " (byte offset " << e.byte_offset << ")\n";
    return kExitFormat;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingAborted& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace featmine
