#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls into the kernels it is used to check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "featmine/autograd.hpp"
#include "featmine/rng.hpp"
#include "featmine/tensor.hpp"

namespace featmine::testing {

inline Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

/// Direct 6-loop cross-correlation in double.
inline BasicTensor<double> naive_conv2d(const BasicTensor<double>& x,
                                        const BasicTensor<double>& w, std::int64_t stride,
                                        std::int64_t pad) {
  const Shape in = x.shape();
  const Shape ws = w.shape();
  const std::int64_t k = ws.h;
  const std::int64_t oh = (in.h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (in.w + 2 * pad - k) / stride + 1;
  BasicTensor<double> out(Shape{in.n, ws.n, oh, ow});
  for (std::int64_t n = 0; n < in.n; ++n)
    for (std::int64_t co = 0; co < ws.n; ++co)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < in.c; ++ci)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t iy = oy * stride - pad + ky;
                const std::int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
                acc += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

/// out[n][k] = sum_c x[n][c] * w[k][c] + b[k], in double.
inline BasicTensor<double> naive_affine(const BasicTensor<double>& x, const BasicTensor<double>& w,
                                        const BasicTensor<double>& b) {
  const std::int64_t n_rows = x.shape().n;
  const std::int64_t feats = x.numel() / n_rows;
  const std::int64_t classes = w.shape().n;
  BasicTensor<double> out(Shape{n_rows, classes, 1, 1});
  for (std::int64_t n = 0; n < n_rows; ++n)
    for (std::int64_t k = 0; k < classes; ++k) {
      double acc = b[k];
      for (std::int64_t c = 0; c < feats; ++c) acc += x[n * feats + c] * w[k * feats + c];
      out[n * classes + k] = acc;
    }
  return out;
}

/// Spatial mean per (n, c) in double.
inline BasicTensor<double> naive_gap(const BasicTensor<double>& x) {
  const Shape s = x.shape();
  BasicTensor<double> out(Shape{s.n, s.c, 1, 1});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < s.h; ++i)
        for (std::int64_t j = 0; j < s.w; ++j) acc += x.at(n, c, i, j);
      out.at(n, c, 0, 0) = acc / static_cast<double>(s.h * s.w);
    }
  return out;
}

/// Softmax probabilities computed literally (exp / sum of exp), then the
/// mean negative log-likelihood. Only valid for moderate logits.
inline double direct_cross_entropy(const BasicTensor<double>& logits,
                                   const std::vector<int>& labels) {
  const std::int64_t n_rows = logits.shape().n;
  const std::int64_t classes = logits.numel() / n_rows;
  double total = 0.0;
  for (std::int64_t n = 0; n < n_rows; ++n) {
    double denom = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) denom += std::exp(logits[n * classes + k]);
    const double p = std::exp(logits[n * classes + labels[static_cast<std::size_t>(n)]]) / denom;
    total += -std::log(p);
  }
  return total / static_cast<double>(n_rows);
}

struct GradCheckReport {
  int checked = 0;
  int failed = 0;
  double worst_abs = 0.0;
  std::string first_failure;
  bool ok() const { return failed == 0 && checked > 0; }
};

/// Central finite differences in double against analytic float32 gradients.
/// `fn` maps a list of input variables to a scalar loss and is instantiated
/// for both float and double. Elements are compared with
/// |analytic - numeric| <= max(rel * |numeric|, abs).
template <typename Fn>
GradCheckReport check_gradients(Fn&& fn, const std::vector<Tensor>& inputs,
                                const std::vector<bool>& differentiable, CounterRng& rng,
                                int probes_per_input = 12, double h = 1e-3, double rel = 1e-2,
                                double abs = 1e-4) {
  std::vector<Var<float>> fvars;
  for (std::size_t i = 0; i < inputs.size(); ++i) fvars.emplace_back(inputs[i], differentiable[i]);
  Var<float> loss = fn(fvars);
  backward(loss);

  std::vector<BasicTensor<double>> base;
  for (const auto& t : inputs) base.push_back(BasicTensor<double>::cast_from(t));
  auto eval_double = [&](const std::vector<BasicTensor<double>>& values) {
    NoGradGuard guard;
    std::vector<Var<double>> dvars;
    for (const auto& v : values) dvars.emplace_back(v);
    return fn(dvars).value()[0];
  };

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!differentiable[i]) continue;
    const auto& analytic = fvars[i].grad();
    const std::int64_t count = inputs[i].numel();
    std::vector<std::int64_t> probes;
    if (count <= probes_per_input) {
      for (std::int64_t j = 0; j < count; ++j) probes.push_back(j);
    } else {
      for (int p = 0; p < probes_per_input; ++p)
        probes.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(count))));
    }
    for (auto j : probes) {
      auto plus = base;
      auto minus = base;
      plus[i][j] += h;
      minus[i][j] -= h;
      const double numeric = (eval_double(plus) - eval_double(minus)) / (2.0 * h);
      const double diff = std::abs(double(analytic[j]) - numeric);
      report.worst_abs = std::max(report.worst_abs, diff);
      ++report.checked;
      if (diff > std::max(rel * std::abs(numeric), abs)) {
        if (report.failed == 0) {
          report.first_failure = "input " + std::to_string(i) + " element " + std::to_string(j) +
                                 ": analytic " + std::to_string(analytic[j]) + " numeric " +
                                 std::to_string(numeric);
        }
        ++report.failed;
      }
    }
  }
  return report;
}

}  // namespace featmine::testing
