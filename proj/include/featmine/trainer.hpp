#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "featmine/data.hpp"
#include "featmine/fm_strategy.hpp"
#include "featmine/optim.hpp"

namespace featmine {

struct Schedule {
  int epochs = 30;
  int batch_size = 128;
  double base_lr = 0.1;
  std::vector<int> milestones{15, 23};
  double decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int max_iters_per_epoch = 0;  // 0: full pass over the data

  void validate() const {
    if (epochs < 1) throw ConfigError("schedule: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("schedule: base_lr must be positive");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("schedule: decay must be in (0, 1)");
    if (max_iters_per_epoch < 0) throw ConfigError("schedule: max_iters_per_epoch must be >= 0");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 1 || milestones[i] >= epochs) {
        throw ConfigError(detail::concat("schedule: milestone ", milestones[i],
                                         " outside [1, epochs)"));
      }
      if (i > 0 && milestones[i] <= milestones[i - 1]) {
        throw ConfigError("schedule: milestones must be strictly increasing");
      }
    }
  }

  /// Learning rate for the 0-based epoch index: decayed once for every
  /// milestone already reached.
  double lr_at(int epoch) const {
    double lr = base_lr;
    for (int m : milestones) {
      if (epoch >= m) lr *= decay;
    }
    return lr;
  }

  /// 30 epochs, milestones 15/23, batch 128, lr 0.1.
  static Schedule desk() { return {}; }
  /// 300 epochs, lr 0.1 decayed by 0.1 at epochs 150 and 225, batch 128.
  static Schedule paper_full() {
    Schedule s;
    s.epochs = 300;
    s.milestones = {150, 225};
    return s;
  }

  bool operator==(const Schedule&) const = default;
};

/// One seed per stochastic component.
struct SeedBundle {
  std::uint64_t init = 1;
  std::uint64_t shuffle = 2;
  std::uint64_t augment = 3;
  std::uint64_t mask = 4;
  std::uint64_t noise = 5;
  std::uint64_t subset = 6;
  std::uint64_t mixup = 7;
  std::uint64_t probe = 8;

  SeedBundle offset(std::uint64_t k) const {
    return {init + k, shuffle + k, augment + k, mask + k, noise + k, subset + k, mixup + k,
            probe + k};
  }
  bool operator==(const SeedBundle&) const = default;
};

struct RunRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  std::vector<double> per_head_train_loss;
  double train_acc = 0.0;  // percent, main head on training batches
  double val_acc = 0.0;    // percent
  double sec_per_iter = 0.0;
  std::size_t peak_mem_bytes = 0;
};

/// Raised when a loss or activation goes non-finite; training never
/// continues past it.
struct TrainingAborted : NumericError {
  TrainingAborted(std::int64_t iter, std::string head_name, double learning_rate,
                  const std::string& cause)
      : NumericError(detail::concat("non-finite value at iteration ", iter, " (head ", head_name,
                                    ", lr ", learning_rate, "): ", cause)),
        iteration(iter),
        head(std::move(head_name)),
        lr(learning_rate) {}
  std::int64_t iteration;
  std::string head;
  double lr;
};

struct TrainOptions {
  bool augment = true;
  double mixup_alpha = 0.0;  // 0 disables mixup
  /// Constant mask applied to the last stage on the main path every
  /// iteration (fixed-mask observation runs).
  std::optional<BinaryMask> fixed_main_mask;
  int eval_batch_size = 256;
  std::function<void(const RunRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<RunRecord> records;
  double best_val_acc = -1.0;
  int best_epoch = 0;
  NamedTensors<float> best_state;
  NamedTensors<float> best_fm_state;
  std::int64_t iterations = 0;
};

/// Names of the loss heads, main first.
inline std::vector<std::string> head_names(const FMConfig& fm) {
  std::vector<std::string> names{"main"};
  for (std::size_t i = 0; i < fm.active_sites(); ++i) {
    names.push_back(fm.sites[i] + "_part1");
    names.push_back(fm.sites[i] + "_part2");
  }
  return names;
}

/// Top-1 accuracy of the main classifier, in percent.
inline double evaluate(Model& model, const Dataset& ds, int batch_size = 256) {
  if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
  const auto norm = Normalization::for_version(ds.version);
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    auto batch = make_batch(ds, idx, norm);
    auto logits = eval_forward(model, Var<float>(batch.images));
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

inline std::size_t state_bytes(Model& model, FeatureMining<float>& fm) {
  std::size_t bytes = 0;
  for (const auto& [name, t] : model.state()) bytes += static_cast<std::size_t>(t.numel()) * 4;
  for (auto* p : fm.parameters()) bytes += static_cast<std::size_t>(p->value().numel()) * 4;
  return bytes;
}

}  // namespace detail

/// Runs the schedule. Per iteration: augment, (mixup), Feature Mining
/// forward, backward over the summed loss, SGD step. The main classifier is
/// evaluated on `validation` after every epoch and the best epoch's weights
/// are kept in the result.
inline TrainResult train(Model& model, FeatureMining<float>& fm, const Dataset& train_set,
                         const Dataset* validation, const Schedule& schedule,
                         const SeedBundle& seeds, const TrainOptions& options = {}) {
  schedule.validate();
  if (train_set.num_classes != model.spec().num_classes) {
    throw ConfigError(detail::concat("dataset has ", train_set.num_classes,
                                     " classes, model expects ", model.spec().num_classes));
  }
  if (train_set.side != model.spec().input_size) {
    throw ConfigError(detail::concat("dataset images are ", train_set.side,
                                     " px, model expects ", model.spec().input_size));
  }
  if (train_set.size() == 0) throw ConfigError("training set is empty");

  std::vector<BasicParameter<float>*> params = model.parameters();
  for (auto* p : fm.parameters()) params.push_back(p);
  Sgd optimizer(params, {schedule.base_lr, schedule.momentum, schedule.weight_decay});

  RngStream shuffle_stream("shuffle", seeds.shuffle);
  RngStream augment_stream("augment", seeds.augment);
  RngStream mask_stream("mask", seeds.mask);
  RngStream mixup_stream("mixup", seeds.mixup);
  const auto norm = Normalization::for_version(train_set.version);
  const auto names = head_names(fm.config());
  const int classes = model.spec().num_classes;
  std::optional<Tensor> main_factor;
  if (options.fixed_main_mask) main_factor = options.fixed_main_mask->to_tensor<float>();

  const std::size_t entry_bytes = MemoryTracker::current_bytes();
  const std::size_t own_bytes = detail::state_bytes(model, fm);

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    optimizer.set_lr(lr);
    model.train();
    MemoryTracker::reset_peak();

    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto shuffle_rng = shuffle_stream.draw();
    shuffle_rng.shuffle(order.begin(), order.end());

    std::vector<double> loss_sums(names.size(), 0.0);
    std::size_t correct = 0, seen = 0;
    std::int64_t iters = 0;
    double seconds = 0.0;
    const std::size_t bs = static_cast<std::size_t>(schedule.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      if (schedule.max_iters_per_epoch > 0 && iters >= schedule.max_iters_per_epoch) break;
      const auto t0 = std::chrono::steady_clock::now();
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));

      auto augment_rng = augment_stream.draw();
      auto batch = make_batch(train_set, idx, norm, options.augment ? &augment_rng : nullptr);
      if (options.mixup_alpha > 0.0) {
        auto rng = mixup_stream.draw();
        batch = mixup(std::move(batch), options.mixup_alpha, rng);
      }
      const Tensor targets = batch.targets(classes);

      FMForwardResult<float> out;
      try {
        out = train_forward(model, fm, Var<float>(batch.images), targets, mask_stream,
                            MainPathMask<float>{main_factor ? &*main_factor : nullptr});
        for (std::size_t h = 0; h < out.per_head_losses.size(); ++h) {
          if (!std::isfinite(out.per_head_losses[h])) {
            throw TrainingAborted(result.iterations, names[h], lr, "loss is not finite");
          }
        }
        backward(out.total_loss);
      } catch (const TrainingAborted&) {
        throw;
      } catch (const NumericError& e) {
        throw TrainingAborted(result.iterations, "trunk", lr, e.what());
      }
      optimizer.step();

      const auto pred = argmax_rows(out.main_logits.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
      seen += pred.size();
      for (std::size_t h = 0; h < names.size(); ++h) loss_sums[h] += out.per_head_losses[h];
      ++iters;
      ++result.iterations;
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    RunRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    for (double s : loss_sums) rec.per_head_train_loss.push_back(s / static_cast<double>(iters));
    rec.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
    rec.sec_per_iter = seconds / static_cast<double>(iters);
    const std::size_t peak = MemoryTracker::peak_bytes();
    rec.peak_mem_bytes = (peak > entry_bytes ? peak - entry_bytes : 0) + own_bytes;
    if (validation) rec.val_acc = evaluate(model, *validation, options.eval_batch_size);

    if (validation && rec.val_acc > result.best_val_acc) {
      result.best_val_acc = rec.val_acc;
      result.best_epoch = rec.epoch;
      result.best_state = model.state();
      result.best_fm_state = fm.state();
    }
    result.records.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (!validation) {
    result.best_epoch = schedule.epochs;
    result.best_state = model.state();
    result.best_fm_state = fm.state();
  }
  model.train();
  return result;
}

struct OverheadRow {
  std::string label;
  std::size_t sites = 0;
  double sec_per_iter = 0.0;
  std::size_t peak_mem_bytes = 0;
  double time_ratio = 1.0;  // against the first row
  double mem_ratio = 1.0;
};

struct OverheadConfig {
  std::string label;
  FMConfig fm;
};

/// Mean seconds per training iteration and peak tensor memory for each
/// configuration on identical synthetic batches. The first `warmup`
/// iterations are excluded; timed iterations are interleaved round-robin
/// across configurations so slow drift affects them equally.
inline std::vector<OverheadRow> measure_overhead(const ModelSpec& spec,
                                                 const std::vector<OverheadConfig>& configs,
                                                 int batch_size, int iters, int warmup = 10,
                                                 const SeedBundle& seeds = {}) {
  if (configs.empty()) throw ConfigError("overhead: no configurations");
  if (iters < 1 || warmup < 0 || batch_size < 1) {
    throw ConfigError("overhead: iters >= 1, warmup >= 0, batch_size >= 1 required");
  }
  struct Runner {
    Model model;
    FeatureMining<float> fm;
    std::unique_ptr<Sgd> opt;
    RngStream masks;
    double seconds = 0.0;
    std::size_t peak = 0;
  };

  CounterRng data_rng(seeds.augment);
  Tensor images(Shape{batch_size, 3, spec.input_size, spec.input_size});
  for (auto& v : images.data()) v = static_cast<float>(data_rng.normal());
  std::vector<int> labels(static_cast<std::size_t>(batch_size));
  for (auto& l : labels) l = static_cast<int>(data_rng.below(static_cast<std::uint64_t>(spec.num_classes)));
  const Tensor targets = one_hot<float>(labels, spec.num_classes);

  auto step = [&](Runner& r) {
    auto out = train_forward(r.model, r.fm, Var<float>(images), targets, r.masks);
    backward(out.total_loss);
    r.opt->step();
  };

  std::vector<std::unique_ptr<Runner>> runners;
  for (const auto& c : configs) {
    const std::size_t before = MemoryTracker::current_bytes();
    MemoryTracker::reset_peak();
    auto r = std::make_unique<Runner>(Runner{Model(spec, RngStream("init", seeds.init)),
                                             FeatureMining<float>(c.fm, spec,
                                                                  RngStream("init.fm", seeds.init)),
                                             nullptr, RngStream("mask", seeds.mask)});
    auto params = r->model.parameters();
    for (auto* p : r->fm.parameters()) params.push_back(p);
    r->opt = std::make_unique<Sgd>(params, SgdOptions{0.01, 0.9, 5e-4});
    for (int i = 0; i < std::max(warmup, 1); ++i) step(*r);
    r->peak = MemoryTracker::peak_bytes() - before;
    runners.push_back(std::move(r));
  }
  for (int i = 0; i < iters; ++i) {
    for (auto& r : runners) {
      const auto t0 = std::chrono::steady_clock::now();
      step(*r);
      r->seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  std::vector<OverheadRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    OverheadRow row;
    row.label = configs[i].label;
    row.sites = configs[i].fm.active_sites();
    row.sec_per_iter = runners[i]->seconds / iters;
    row.peak_mem_bytes = runners[i]->peak;
    rows.push_back(row);
  }
  for (auto& row : rows) {
    row.time_ratio = row.sec_per_iter / rows.front().sec_per_iter;
    row.mem_ratio = static_cast<double>(row.peak_mem_bytes) /
                    static_cast<double>(rows.front().peak_mem_bytes);
  }
  return rows;
}

/// Baseline, FM on the last stage, FM on the last two stages.
inline std::vector<OverheadConfig> standard_overhead_configs(MaskKind variant = MaskKind::box) {
  auto fm = [&](std::vector<std::string> sites) {
    FMConfig c;
    c.enabled = !sites.empty();
    c.sites = std::move(sites);
    c.variant = variant;
    return c;
  };
  return {{"baseline", fm({})}, {"fm_1_site", fm({"stage3"})},
          {"fm_2_sites", fm({"stage2", "stage3"})}};
}

}  // namespace featmine
