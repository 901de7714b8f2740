#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "featmine/ops.hpp"
#include "featmine/rng.hpp"

namespace featmine {

enum class Family { resnet, plaincnn };

inline std::string_view to_string(Family f) { return f == Family::resnet ? "resnet" : "plaincnn"; }

inline Family parse_family(std::string_view s) {
  if (s == "resnet") return Family::resnet;
  if (s == "plaincnn") return Family::plaincnn;
  throw ConfigError(detail::concat("unknown model family '", s, "' (resnet|plaincnn)"));
}

struct ModelSpec {
  Family family = Family::plaincnn;
  int depth = 0;  // resnet only
  std::vector<std::int64_t> stage_widths{16, 32, 64};
  int num_classes = 10;
  std::int64_t input_size = 32;

  void validate() const {
    if (stage_widths.size() != 3) {
      throw ConfigError(detail::concat("model: expected 3 stage widths, got ",
                                       stage_widths.size()));
    }
    for (auto w : stage_widths) {
      if (w < 1) throw ConfigError("model: stage widths must be positive");
    }
    if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
    if (input_size < 4) throw ConfigError("model: input_size must be at least 4");
    if (family == Family::resnet && depth != 8 && depth != 20 && depth != 56) {
      throw ConfigError(
          detail::concat("model: unsupported resnet depth ", depth, " (supported: 8, 20, 56)"));
    }
  }

  /// Basic blocks per stage for depth = 6n + 2.
  int blocks_per_stage() const { return family == Family::resnet ? (depth - 2) / 6 : 1; }

  bool operator==(const ModelSpec&) const = default;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"stage1", "stage2", "stage3"};
  return names;
}

inline std::size_t stage_index(std::string_view name) {
  const auto& names = stage_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw ConfigError(detail::concat("unknown stage '", name, "' (stage1|stage2|stage3)"));
}

template <typename T>
struct StageOutput {
  std::string stage_id;
  Var<T> tensor;
  std::int64_t channels() const { return tensor.shape().c; }
  std::pair<std::int64_t, std::int64_t> spatial() const {
    return {tensor.shape().h, tensor.shape().w};
  }
};

template <typename T>
struct ForwardOutput {
  std::vector<StageOutput<T>> stages;
  Var<T> logits;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

namespace detail {

template <typename T>
BasicTensor<T> he_normal(Shape shape, CounterRng rng) {
  BasicTensor<T> t(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(shape.c * shape.h * shape.w));
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <typename T>
BasicTensor<T> uniform_fan_in(Shape shape, CounterRng rng) {
  BasicTensor<T> t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.c * shape.h * shape.w));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// Draws parameters from a named stream, one draw per parameter.
class Initializer {
 public:
  explicit Initializer(RngStream stream) : stream_(std::move(stream)) {}

  template <typename T>
  BasicParameter<T> he_normal(std::string name, Shape shape) {
    const InitSpec spec{"he_normal", stream_.name(), stream_.counter()};
    return {std::move(name), detail::he_normal<T>(shape, stream_.draw()), spec};
  }
  template <typename T>
  BasicParameter<T> uniform_fan_in(std::string name, Shape shape) {
    const InitSpec spec{"uniform_fan_in", stream_.name(), stream_.counter()};
    return {std::move(name), detail::uniform_fan_in<T>(shape, stream_.draw()), spec};
  }
  template <typename T>
  static BasicParameter<T> constant(std::string name, Shape shape, T value) {
    return {std::move(name), BasicTensor<T>(shape, value),
            InitSpec{value == T(0) ? "zeros" : "ones", "", 0}};
  }

  RngStream& stream() { return stream_; }

 private:
  RngStream stream_;
};

/// Convolution followed by batch norm.
template <typename T>
struct ConvBn {
  BasicParameter<T> weight;
  BasicParameter<T> gamma;
  BasicParameter<T> beta;
  BatchNormState<T> bn;
  std::string prefix;
  std::int64_t stride = 1;
  std::int64_t padding = 1;

  ConvBn() = default;
  ConvBn(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t kernel,
         std::int64_t stride_, Initializer& init)
      : weight(init.he_normal<T>(name + ".conv.weight", Shape{out, in, kernel, kernel})),
        gamma(Initializer::constant<T>(name + ".bn.gamma", Shape{1, out, 1, 1}, T(1))),
        beta(Initializer::constant<T>(name + ".bn.beta", Shape{1, out, 1, 1}, T(0))),
        bn(out),
        prefix(name),
        stride(stride_),
        padding(kernel / 2) {}

  Var<T> forward(const Var<T>& x, Mode mode) {
    return batch_norm(conv2d(x, weight.var, stride, padding), gamma.var, beta.var, bn, mode);
  }

  void collect(std::vector<BasicParameter<T>*>& params) {
    params.push_back(&weight);
    params.push_back(&gamma);
    params.push_back(&beta);
  }
  void collect_bn(std::vector<std::pair<std::string, BatchNormState<T>*>>& out) {
    out.emplace_back(prefix + ".bn", &bn);
  }
};

/// CIFAR ResNet v1 basic block with a 1x1 projection shortcut whenever the
/// shape changes.
template <typename T>
struct BasicBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  std::optional<ConvBn<T>> shortcut;

  BasicBlock(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t stride,
             Initializer& init)
      : conv1(name + ".conv1", in, out, 3, stride, init),
        conv2(name + ".conv2", out, out, 3, 1, init) {
    if (stride != 1 || in != out) shortcut.emplace(name + ".shortcut", in, out, 1, stride, init);
  }

  Var<T> forward(const Var<T>& x, Mode mode) {
    Var<T> h = relu(conv1.forward(x, mode));
    h = conv2.forward(h, mode);
    Var<T> skip = shortcut ? shortcut->forward(x, mode) : x;
    return relu(add(h, skip));
  }

  void collect(std::vector<BasicParameter<T>*>& params) {
    conv1.collect(params);
    conv2.collect(params);
    if (shortcut) shortcut->collect(params);
  }
  void collect_bn(std::vector<std::pair<std::string, BatchNormState<T>*>>& out) {
    conv1.collect_bn(out);
    conv2.collect_bn(out);
    if (shortcut) shortcut->collect_bn(out);
  }
};

/// Three-stage CIFAR classifier with a GAP + FC head on the last stage.
/// Not copyable: parameters are graph leaves. Use state()/load_state() to
/// snapshot weights.
template <typename T>
class BasicModel {
 public:
  BasicModel(ModelSpec spec, RngStream init_stream) : spec_(std::move(spec)) {
    spec_.validate();
    Initializer init(std::move(init_stream));
    const auto& w = spec_.stage_widths;
    if (spec_.family == Family::resnet) {
      stem_.emplace("stem", 3, w[0], 3, 1, init);
      std::int64_t in = w[0];
      for (int s = 0; s < 3; ++s) {
        std::vector<BasicBlock<T>> blocks;
        blocks.reserve(static_cast<std::size_t>(spec_.blocks_per_stage()));
        for (int b = 0; b < spec_.blocks_per_stage(); ++b) {
          const std::int64_t stride = (s > 0 && b == 0) ? 2 : 1;
          blocks.emplace_back(stage_names()[s] + ".block" + std::to_string(b), in, w[s], stride,
                              init);
          in = w[s];
        }
        res_stages_.push_back(std::move(blocks));
      }
    } else {
      std::int64_t in = 3;
      for (int s = 0; s < 3; ++s) {
        plain_stages_.emplace_back(stage_names()[s], in, w[s], 3, s == 0 ? 1 : 2, init);
        in = w[s];
      }
    }
    fc_weight_ = init.uniform_fan_in<T>("fc.weight", Shape{spec_.num_classes, w[2], 1, 1});
    fc_bias_ = Initializer::constant<T>("fc.bias", Shape{1, spec_.num_classes, 1, 1}, T(0));
  }

  BasicModel(const BasicModel&) = delete;
  BasicModel& operator=(const BasicModel&) = delete;
  BasicModel(BasicModel&&) noexcept = default;
  BasicModel& operator=(BasicModel&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  Mode mode() const { return mode_; }
  void train() { mode_ = Mode::train; }
  void eval() { mode_ = Mode::eval; }

  std::int64_t stage_channels(std::size_t stage) const { return spec_.stage_widths.at(stage); }
  std::int64_t stage_size(std::size_t stage) const {
    std::int64_t size = spec_.input_size;
    for (std::size_t s = 1; s <= stage; ++s) size = (size - 1) / 2 + 1;
    return size;
  }

  /// Trunk only; returns the three stage outputs.
  std::vector<StageOutput<T>> forward_stages(const Var<T>& x) {
    const Shape s = x.shape();
    if (s.c != 3 || s.h != spec_.input_size || s.w != spec_.input_size || s.n < 1) {
      throw InputError(detail::concat("model expects N x 3 x ", spec_.input_size, " x ",
                                      spec_.input_size, " input, got ", s));
    }
    std::vector<StageOutput<T>> out;
    Var<T> h = x;
    if (spec_.family == Family::resnet) {
      h = relu(stem_->forward(h, mode_));
      for (std::size_t st = 0; st < res_stages_.size(); ++st) {
        for (auto& block : res_stages_[st]) h = block.forward(h, mode_);
        out.push_back({stage_names()[st], h});
      }
    } else {
      for (std::size_t st = 0; st < plain_stages_.size(); ++st) {
        h = relu(plain_stages_[st].forward(h, mode_));
        out.push_back({stage_names()[st], h});
      }
    }
    return out;
  }

  /// Main classifier: GAP + FC over a last-stage feature map.
  Var<T> classify(const Var<T>& last_stage) {
    return fully_connected(global_avg_pool(last_stage), fc_weight_.var, fc_bias_.var);
  }

  ForwardOutput<T> forward_with_stages(const Var<T>& x) {
    ForwardOutput<T> out;
    out.stages = forward_stages(x);
    out.logits = classify(out.stages.back().tensor);
    return out;
  }

  Var<T> forward(const Var<T>& x) { return forward_with_stages(x).logits; }

  std::vector<BasicParameter<T>*> parameters() {
    std::vector<BasicParameter<T>*> params;
    if (stem_) stem_->collect(params);
    for (auto& stage : res_stages_)
      for (auto& block : stage) block.collect(params);
    for (auto& layer : plain_stages_) layer.collect(params);
    params.push_back(&fc_weight_);
    params.push_back(&fc_bias_);
    return params;
  }

  std::vector<std::pair<std::string, BatchNormState<T>*>> bn_states() {
    std::vector<std::pair<std::string, BatchNormState<T>*>> out;
    if (stem_) stem_->collect_bn(out);
    for (auto& stage : res_stages_)
      for (auto& block : stage) block.collect_bn(out);
    for (auto& layer : plain_stages_) layer.collect_bn(out);
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t total = 0;
    for (auto* p : parameters()) total += p->value().numel();
    return total;
  }

  const BasicParameter<T>& fc_weight() const { return fc_weight_; }
  BasicParameter<T>& fc_weight() { return fc_weight_; }
  BasicParameter<T>& fc_bias() { return fc_bias_; }

  /// Parameters followed by BN running statistics, in a fixed order.
  NamedTensors<T> state() {
    NamedTensors<T> out;
    for (auto* p : parameters()) out.emplace_back(p->name, p->value());
    for (auto& [name, bn] : bn_states()) {
      out.emplace_back(name + ".running_mean", bn->running_mean);
      out.emplace_back(name + ".running_var", bn->running_var);
    }
    return out;
  }

  /// Loads every tensor this model owns from `state`; extra entries are
  /// ignored, missing or mis-shaped ones are a configuration error.
  template <typename U>
  void load_state(const NamedTensors<U>& state) {
    std::map<std::string, const BasicTensor<U>*> lookup;
    for (const auto& [name, t] : state) lookup[name] = &t;
    auto fetch = [&](const std::string& name, BasicTensor<T>& dst) {
      auto it = lookup.find(name);
      if (it == lookup.end()) throw ConfigError("state is missing tensor '" + name + "'");
      if (it->second->shape() != dst.shape()) {
        throw ConfigError(detail::concat("state tensor '", name, "' has shape ",
                                         it->second->shape(), ", expected ", dst.shape()));
      }
      dst = BasicTensor<T>::cast_from(*it->second);
    };
    for (auto* p : parameters()) fetch(p->name, p->mutable_value());
    for (auto& [name, bn] : bn_states()) {
      fetch(name + ".running_mean", bn->running_mean);
      fetch(name + ".running_var", bn->running_var);
    }
  }

 private:
  ModelSpec spec_;
  Mode mode_ = Mode::train;
  std::optional<ConvBn<T>> stem_;
  std::vector<std::vector<BasicBlock<T>>> res_stages_;
  std::vector<ConvBn<T>> plain_stages_;
  BasicParameter<T> fc_weight_;
  BasicParameter<T> fc_bias_;
};

using Model = BasicModel<float>;

template <typename T = float>
BasicModel<T> build_model(const ModelSpec& spec, RngStream init_stream) {
  return BasicModel<T>(spec, std::move(init_stream));
}

}  // namespace featmine
