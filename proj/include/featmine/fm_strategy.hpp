#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "featmine/mask.hpp"
#include "featmine/model.hpp"

namespace featmine {

/// Which stage outputs get Feature Mining and how their masks are drawn.
struct FMConfig {
  bool enabled = false;
  std::vector<std::string> sites;  // stage names, e.g. {"stage2", "stage3"}
  MaskKind variant = MaskKind::box;
  Pairing pairing = Pairing::complementary;
  bool per_sample = false;  // one mask pair per image instead of per batch

  std::size_t active_sites() const { return enabled ? sites.size() : 0; }
  /// Main classifier plus two auxiliary heads per site.
  std::size_t num_classifiers() const { return 1 + 2 * active_sites(); }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& s : sites) {
      stage_index(s);
      if (!seen.insert(s).second) throw ConfigError("fm: duplicate site '" + s + "'");
    }
  }

  bool operator==(const FMConfig&) const = default;
};

/// Auxiliary GAP + FC classifier.
template <typename T>
struct Head {
  BasicParameter<T> weight;
  BasicParameter<T> bias;
};

template <typename T>
struct FMSite {
  std::string stage_id;
  std::size_t stage = 0;
  Head<T> head_1;
  Head<T> head_2;
  MaskKind mask_variant = MaskKind::box;
  Pairing pairing = Pairing::complementary;
};

/// Owns the auxiliary heads for every configured site. Head parameters are
/// drawn from their own stream so the trunk initialisation does not depend
/// on whether Feature Mining is enabled.
template <typename T>
class FeatureMining {
 public:
  FeatureMining() = default;
  FeatureMining(const FMConfig& config, const ModelSpec& spec, RngStream init_stream)
      : config_(config) {
    config_.validate();
    if (!config_.enabled) return;
    Initializer init(std::move(init_stream));
    for (std::size_t i = 0; i < config_.sites.size(); ++i) {
      FMSite<T> site;
      site.stage_id = config_.sites[i];
      site.stage = stage_index(site.stage_id);
      site.mask_variant = config_.variant;
      site.pairing = config_.pairing;
      const std::int64_t channels = spec.stage_widths.at(site.stage);
      const std::string prefix = "fm." + site.stage_id;
      auto make_head = [&](const std::string& name) {
        return Head<T>{
            init.uniform_fan_in<T>(prefix + "." + name + ".weight",
                                   Shape{spec.num_classes, channels, 1, 1}),
            Initializer::constant<T>(prefix + "." + name + ".bias",
                                     Shape{1, spec.num_classes, 1, 1}, T(0))};
      };
      site.head_1 = make_head("head1");
      site.head_2 = make_head("head2");
      sites_.push_back(std::move(site));
    }
  }

  FeatureMining(const FeatureMining&) = delete;
  FeatureMining& operator=(const FeatureMining&) = delete;
  FeatureMining(FeatureMining&&) noexcept = default;
  FeatureMining& operator=(FeatureMining&&) noexcept = default;

  const FMConfig& config() const { return config_; }
  std::vector<FMSite<T>>& sites() { return sites_; }
  const std::vector<FMSite<T>>& sites() const { return sites_; }

  std::vector<BasicParameter<T>*> parameters() {
    std::vector<BasicParameter<T>*> out;
    for (auto& s : sites_) {
      out.insert(out.end(), {&s.head_1.weight, &s.head_1.bias, &s.head_2.weight,
                             &s.head_2.bias});
    }
    return out;
  }

  NamedTensors<T> state() {
    NamedTensors<T> out;
    for (auto* p : parameters()) out.emplace_back(p->name, p->value());
    return out;
  }

  template <typename U>
  void load_state(const NamedTensors<U>& state) {
    for (auto* p : parameters()) {
      auto it = std::find_if(state.begin(), state.end(),
                             [&](const auto& e) { return e.first == p->name; });
      if (it == state.end()) throw ConfigError("state is missing FM tensor '" + p->name + "'");
      if (it->second.shape() != p->shape()) {
        throw ConfigError("FM tensor '" + p->name + "' has the wrong shape");
      }
      p->mutable_value() = BasicTensor<T>::cast_from(it->second);
    }
  }

 private:
  FMConfig config_;
  std::vector<FMSite<T>> sites_;
};

/// X1 = X * M1, X2 = X * M2. The masks are constants.
template <typename T>
std::pair<Var<T>, Var<T>> segment(const Var<T>& features, const BasicTensor<T>& first,
                                  const BasicTensor<T>& second) {
  return {elementwise_mul(features, first), elementwise_mul(features, second)};
}

template <typename T>
std::pair<Var<T>, Var<T>> segment(const Var<T>& features,
                                  const std::pair<BinaryMask, BinaryMask>& masks) {
  return segment(features, masks.first.to_tensor<T>(), masks.second.to_tensor<T>());
}

template <typename T>
Var<T> head_forward(const Var<T>& part, Head<T>& head) {
  if (part.shape().c != head.weight.shape().c) {
    throw ConfigError(detail::concat("head expects ", head.weight.shape().c,
                                     " channels, feature has ", part.shape().c));
  }
  return fully_connected(global_avg_pool(part), head.weight.var, head.bias.var);
}

template <typename T>
struct FMForwardResult {
  Var<T> main_logits;
  std::vector<std::pair<Var<T>, Var<T>>> aux_logits;
  std::vector<std::pair<BinaryMask, BinaryMask>> masks_used;
  std::vector<Var<T>> head_losses;       // graph nodes, main first
  std::vector<double> per_head_losses;   // their values
  Var<T> total_loss;                     // differentiable sum
  double total = 0.0;                    // sum of per_head_losses
};

/// Sums cross-entropies of every head (main first) against soft targets.
template <typename T>
FMForwardResult<T> fm_loss(const Var<T>& main_logits,
                           const std::vector<std::pair<Var<T>, Var<T>>>& aux,
                           const BasicTensor<T>& targets) {
  FMForwardResult<T> result;
  result.main_logits = main_logits;
  result.aux_logits = aux;
  result.head_losses.push_back(soft_target_cross_entropy(main_logits, targets));
  for (const auto& [a, b] : aux) {
    if (a.shape() != main_logits.shape() || b.shape() != main_logits.shape()) {
      throw ConfigError("fm_loss: auxiliary logits do not match the main logits");
    }
    result.head_losses.push_back(soft_target_cross_entropy(a, targets));
    result.head_losses.push_back(soft_target_cross_entropy(b, targets));
  }
  for (const auto& l : result.head_losses) {
    result.per_head_losses.push_back(static_cast<double>(l.value()[0]));
    result.total += result.per_head_losses.back();
  }
  result.total_loss = sum_scalars(result.head_losses);
  return result;
}

template <typename T>
FMForwardResult<T> fm_loss(const Var<T>& main_logits,
                           const std::vector<std::pair<Var<T>, Var<T>>>& aux,
                           std::span<const int> labels) {
  if (static_cast<std::int64_t>(labels.size()) != main_logits.shape().n) {
    throw InputError("fm_loss: label count does not match batch size");
  }
  return fm_loss(main_logits, aux, one_hot<T>(labels, main_logits.shape().c));
}

namespace detail {

// Stacks per-image masks into an (N, ., ., .) broadcast factor.
template <typename T>
BasicTensor<T> stack_masks(const std::vector<BinaryMask>& masks) {
  const BasicTensor<T> first = masks.front().to_tensor<T>();
  const Shape s = first.shape();
  BasicTensor<T> out(Shape{static_cast<std::int64_t>(masks.size()), s.c, s.h, s.w});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const auto t = masks[n].to_tensor<T>();
    std::copy(t.data().begin(), t.data().end(),
              out.raw() + static_cast<std::int64_t>(n) * s.numel());
  }
  return out;
}

}  // namespace detail

/// Optional constant factor applied to the last stage on the main path
/// (fixed-mask observation runs). Not part of Feature Mining itself.
template <typename T>
struct MainPathMask {
  const BasicTensor<T>* factor = nullptr;
};

/// Training forward pass. The trunk runs once; at each site a fresh mask pair
/// segments the stage output into two auxiliary heads, while the main
/// classifier still sees the unmasked last stage.
template <typename T>
FMForwardResult<T> train_forward(BasicModel<T>& model, FeatureMining<T>& fm, const Var<T>& images,
                                 const BasicTensor<T>& targets, RngStream& mask_stream,
                                 MainPathMask<T> main_mask = {}) {
  auto stages = model.forward_stages(images);
  Var<T> last = stages.back().tensor;
  if (main_mask.factor) last = mul_const(last, *main_mask.factor);
  Var<T> main_logits = model.classify(last);

  std::vector<std::pair<Var<T>, Var<T>>> aux;
  std::vector<std::pair<BinaryMask, BinaryMask>> masks_used;
  if (fm.config().enabled) {
    for (auto& site : fm.sites()) {
      const Var<T>& x = stages.at(site.stage).tensor;
      const Shape s = x.shape();
      if (s.c != site.head_1.weight.shape().c) {
        throw ConfigError(detail::concat("fm site ", site.stage_id, " expects ",
                                         site.head_1.weight.shape().c, " channels, stage has ",
                                         s.c));
      }
      std::pair<Var<T>, Var<T>> parts;
      if (fm.config().per_sample) {
        std::vector<BinaryMask> firsts, seconds;
        for (std::int64_t n = 0; n < s.n; ++n) {
          auto pair = sample_pair(site.mask_variant, site.pairing, s.c, s.h, s.w, mask_stream);
          firsts.push_back(pair.first);
          seconds.push_back(pair.second);
          masks_used.push_back(std::move(pair));
        }
        parts = segment(x, detail::stack_masks<T>(firsts), detail::stack_masks<T>(seconds));
      } else {
        auto pair = sample_pair(site.mask_variant, site.pairing, s.c, s.h, s.w, mask_stream);
        parts = segment(x, pair);
        masks_used.push_back(std::move(pair));
      }
      aux.emplace_back(head_forward(parts.first, site.head_1),
                       head_forward(parts.second, site.head_2));
    }
  }
  auto result = fm_loss(main_logits, aux, targets);
  result.masks_used = std::move(masks_used);
  return result;
}

template <typename T>
FMForwardResult<T> train_forward(BasicModel<T>& model, FeatureMining<T>& fm, const Var<T>& images,
                                 std::span<const int> labels, RngStream& mask_stream) {
  return train_forward(model, fm, images, one_hot<T>(labels, model.spec().num_classes),
                       mask_stream);
}

/// Inference: main path only, eval-mode batch norm, no graph recorded.
template <typename T>
Var<T> eval_forward(BasicModel<T>& model, const Var<T>& images) {
  const Mode previous = model.mode();
  model.eval();
  NoGradGuard guard;
  Var<T> logits;
  try {
    logits = model.forward(images);
  } catch (...) {
    if (previous == Mode::train) model.train();
    throw;
  }
  if (previous == Mode::train) model.train();
  return logits;
}

}  // namespace featmine
