#pragma once

#include <vector>

#include "featmine/autograd.hpp"

namespace featmine {

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v
/// Gradients are zeroed after every step.
template <typename T>
class BasicSgd {
 public:
  BasicSgd(std::vector<BasicParameter<T>*> params, SgdOptions options)
      : params_(std::move(params)), options_(options) {
    velocity_.reserve(params_.size());
    for (auto* p : params_) velocity_.emplace_back(p->shape());
  }

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  const SgdOptions& options() const { return options_; }

  void step() {
    const T lr = static_cast<T>(options_.lr);
    const T mom = static_cast<T>(options_.momentum);
    const T wd = static_cast<T>(options_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i]->mutable_value();
      auto& v = velocity_[i];
      auto& var = params_[i]->var;
      if (var.has_grad()) {
        const auto& g = var.grad();
        for (std::int64_t j = 0; j < p.numel(); ++j) {
          v[j] = mom * v[j] + g[j] + wd * p[j];
          p[j] -= lr * v[j];
        }
      } else {
        for (std::int64_t j = 0; j < p.numel(); ++j) {
          v[j] = mom * v[j] + wd * p[j];
          p[j] -= lr * v[j];
        }
      }
      var.zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->var.zero_grad();
  }

  const std::vector<BasicTensor<T>>& velocity() const { return velocity_; }

 private:
  std::vector<BasicParameter<T>*> params_;
  std::vector<BasicTensor<T>> velocity_;
  SgdOptions options_;
};

using Sgd = BasicSgd<float>;

}  // namespace featmine
