#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "featmine/autograd.hpp"

namespace featmine {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void accumulate(Node<T>& parent, const BasicTensor<T>& delta) {
  if (parent.requires_grad) parent.ensure_grad() += delta;
}

// Unfolds one image (C, H, W) into a (C*k*k, Ho*Wo) column matrix.
template <typename T>
void im2col(const T* image, std::int64_t channels, std::int64_t height, std::int64_t width,
            std::int64_t kernel, std::int64_t stride, std::int64_t pad, std::int64_t out_h,
            std::int64_t out_w, T* col) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t ki = 0; ki < kernel; ++ki) {
      for (std::int64_t kj = 0; kj < kernel; ++kj) {
        T* row = col + ((c * kernel + ki) * kernel + kj) * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? image[(c * height + iy) * width + ix]
                                       : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::int64_t channels, std::int64_t height, std::int64_t width,
                std::int64_t kernel, std::int64_t stride, std::int64_t pad, std::int64_t out_h,
                std::int64_t out_w, T* image) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t ki = 0; ki < kernel; ++ki) {
      for (std::int64_t kj = 0; kj < kernel; ++kj) {
        const T* row = col + ((c * kernel + ki) * kernel + kj) * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          for (std::int64_t ox = 0; ox < out_w; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= width) continue;
            image[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation. weight is (C_out, C_in, k, k); no bias term.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, std::int64_t stride,
              std::int64_t padding) {
  const Shape in = input.shape();
  const Shape ws = weight.shape();
  if (stride < 1 || padding < 0) {
    throw ConfigError(detail::concat("conv2d: invalid stride ", stride, " / padding ", padding));
  }
  if (ws.h != ws.w) throw ConfigError(detail::concat("conv2d: non-square kernel ", ws));
  if (ws.c != in.c) {
    throw ConfigError(detail::concat("conv2d: input channels ", in.c, " but weight expects ",
                                     ws.c, " (weight ", ws, ")"));
  }
  const std::int64_t k = ws.h;
  if (in.h + 2 * padding < k || in.w + 2 * padding < k) {
    throw ConfigError(detail::concat("conv2d: kernel ", k, " larger than padded input ", in));
  }
  const std::int64_t out_h = (in.h + 2 * padding - k) / stride + 1;
  const std::int64_t out_w = (in.w + 2 * padding - k) / stride + 1;
  const std::int64_t rows = in.c * k * k;
  const std::int64_t cols = out_h * out_w;

  BasicTensor<T> out(Shape{in.n, ws.n, out_h, out_w});
  std::vector<T> col(static_cast<std::size_t>(rows * cols));
  detail::ConstMatMap<T> wmat(weight.value().raw(), ws.n, rows);
  for (std::int64_t n = 0; n < in.n; ++n) {
    detail::im2col(input.value().raw() + n * in.c * in.h * in.w, in.c, in.h, in.w, k, stride,
                   padding, out_h, out_w, col.data());
    detail::MatMap<T> omat(out.raw() + n * ws.n * cols, ws.n, cols);
    omat.noalias() = wmat * detail::ConstMatMap<T>(col.data(), rows, cols);
  }

  return Var<T>::make(std::move(out), {input, weight}, [=](Node<T>& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    std::vector<T> col(static_cast<std::size_t>(rows * cols));
    std::vector<T> dcol(static_cast<std::size_t>(rows * cols));
    detail::ConstMatMap<T> wmat(w.value.raw(), ws.n, rows);
    T* dx = x.requires_grad ? x.ensure_grad().raw() : nullptr;
    T* dw = w.requires_grad ? w.ensure_grad().raw() : nullptr;
    for (std::int64_t n = 0; n < in.n; ++n) {
      detail::ConstMatMap<T> gout(self.grad.raw() + n * ws.n * cols, ws.n, cols);
      if (dw) {
        detail::im2col(x.value.raw() + n * in.c * in.h * in.w, in.c, in.h, in.w, k, stride,
                       padding, out_h, out_w, col.data());
        detail::MatMap<T>(dw, ws.n, rows).noalias() +=
            gout * detail::ConstMatMap<T>(col.data(), rows, cols).transpose();
      }
      if (dx) {
        detail::MatMap<T>(dcol.data(), rows, cols).noalias() = wmat.transpose() * gout;
        detail::col2im_add(dcol.data(), in.c, in.h, in.w, k, stride, padding, out_h, out_w,
                           dx + n * in.c * in.h * in.w);
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& input) {
  BasicTensor<T> out(input.shape());
  const auto src = input.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return Var<T>::make(std::move(out), {input}, [](Node<T>& self) {
    auto& x = *self.parents[0];
    BasicTensor<T> delta(x.value.shape());
    for (std::int64_t i = 0; i < delta.numel(); ++i) {
      delta[i] = x.value[i] > T(0) ? self.grad[i] : T(0);
    }
    detail::accumulate(x, delta);
  });
}

/// Running statistics carried by a batch-norm layer.
template <typename T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(Shape{1, channels, 1, 1}, T(0)),
        running_var(Shape{1, channels, 1, 1}, T(1)) {}
  std::int64_t channels() const { return running_mean.shape().c; }
};

enum class Mode { train, eval };

/// Per-channel batch normalisation. gamma and beta are (1, C, 1, 1).
/// Train mode normalises with biased batch variance and folds the unbiased
/// variance into the running estimate.
template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T>& state, Mode mode) {
  const Shape s = input.shape();
  if (gamma.shape().numel() != s.c || beta.shape().numel() != s.c ||
      state.channels() != s.c) {
    throw ConfigError(detail::concat("batch_norm: ", s.c, " channels but gamma/beta/state have ",
                                     gamma.shape().numel(), "/", beta.shape().numel(), "/",
                                     state.channels()));
  }
  const std::int64_t plane = s.plane();
  const std::int64_t count = s.n * plane;
  if (count < 1) throw ConfigError("batch_norm: empty input");

  std::vector<T> mean(static_cast<std::size_t>(s.c));
  std::vector<T> inv_std(static_cast<std::size_t>(s.c));
  const auto& x = input.value();
  if (mode == Mode::train) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.raw() + (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.raw() + (n * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      state.running_mean[c] =
          static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] +
                                            state.momentum * unbiased);
    }
  } else {
    for (std::int64_t c = 0; c < s.c; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(double(state.running_var[c]) + state.eps));
    }
  }

  BasicTensor<T> xhat(s);
  BasicTensor<T> out(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const std::int64_t base = (n * s.c + c) * plane;
      const T g = gamma.value()[c];
      const T b = beta.value()[c];
      for (std::int64_t i = 0; i < plane; ++i) {
        const T h = (x[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = g * h + b;
      }
    }
  }

  const bool train = mode == Mode::train;
  return Var<T>::make(
      std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        const auto& dy = self.grad;
        BasicTensor<T> dgamma(gn.value.shape());
        BasicTensor<T> dbeta(bn.value.shape());
        BasicTensor<T> dx(s);
        for (std::int64_t c = 0; c < s.c; ++c) {
          double sum_dy = 0.0;
          double sum_dy_xhat = 0.0;
          for (std::int64_t n = 0; n < s.n; ++n) {
            const std::int64_t base = (n * s.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_dy += dy[base + i];
              sum_dy_xhat += double(dy[base + i]) * xhat[base + i];
            }
          }
          dgamma[c] = static_cast<T>(sum_dy_xhat);
          dbeta[c] = static_cast<T>(sum_dy);
          if (!xn.requires_grad) continue;
          const double g = gn.value[c];
          const double m = static_cast<double>(count);
          for (std::int64_t n = 0; n < s.n; ++n) {
            const std::int64_t base = (n * s.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              if (train) {
                dx[base + i] = static_cast<T>(g * inv_std[c] / m *
                                              (m * dy[base + i] - sum_dy -
                                               double(xhat[base + i]) * sum_dy_xhat));
              } else {
                dx[base + i] = static_cast<T>(g * inv_std[c] * dy[base + i]);
              }
            }
          }
        }
        detail::accumulate(xn, dx);
        detail::accumulate(gn, dgamma);
        detail::accumulate(bn, dbeta);
      });
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1).
template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  const Shape s = input.shape();
  const std::int64_t plane = s.plane();
  if (plane < 1) throw ConfigError("global_avg_pool: empty spatial extent");
  BasicTensor<T> out(Shape{s.n, s.c, 1, 1});
  for (std::int64_t i = 0; i < s.n * s.c; ++i) {
    double sum = 0.0;
    const T* p = input.value().raw() + i * plane;
    for (std::int64_t j = 0; j < plane; ++j) sum += p[j];
    out[i] = static_cast<T>(sum / static_cast<double>(plane));
  }
  return Var<T>::make(std::move(out), {input}, [s, plane](Node<T>& self) {
    auto& x = *self.parents[0];
    BasicTensor<T> delta(s);
    const T scale = T(1) / static_cast<T>(plane);
    for (std::int64_t i = 0; i < s.n * s.c; ++i) {
      const T g = self.grad[i] * scale;
      std::fill_n(delta.raw() + i * plane, plane, g);
    }
    detail::accumulate(x, delta);
  });
}

/// Affine map (N, C, 1, 1) -> (N, K, 1, 1) with weight (K, C, 1, 1) and
/// bias (1, K, 1, 1).
template <typename T>
Var<T> fully_connected(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const Shape s = input.shape();
  const Shape ws = weight.shape();
  const std::int64_t features = s.c * s.h * s.w;
  if (ws.c * ws.h * ws.w != features) {
    throw ConfigError(detail::concat("fully_connected: input has ", features,
                                     " features but weight is ", ws));
  }
  if (bias.shape().numel() != ws.n) {
    throw ConfigError(detail::concat("fully_connected: bias length ", bias.shape().numel(),
                                     " != outputs ", ws.n));
  }
  const std::int64_t classes = ws.n;
  BasicTensor<T> out(Shape{s.n, classes, 1, 1});
  detail::MatMap<T> omat(out.raw(), s.n, classes);
  detail::ConstMatMap<T> xmat(input.value().raw(), s.n, features);
  detail::ConstMatMap<T> wmat(weight.value().raw(), classes, features);
  omat.noalias() = xmat * wmat.transpose();
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t k = 0; k < classes; ++k) omat(n, k) += bias.value()[k];
  }
  return Var<T>::make(std::move(out), {input, weight, bias}, [=](Node<T>& self) {
    auto& x = *self.parents[0];
    auto& w = *self.parents[1];
    auto& b = *self.parents[2];
    detail::ConstMatMap<T> gout(self.grad.raw(), s.n, classes);
    if (x.requires_grad) {
      detail::MatMap<T>(x.ensure_grad().raw(), s.n, features).noalias() +=
          gout * detail::ConstMatMap<T>(w.value.raw(), classes, features);
    }
    if (w.requires_grad) {
      detail::MatMap<T>(w.ensure_grad().raw(), classes, features).noalias() +=
          gout.transpose() * detail::ConstMatMap<T>(x.value.raw(), s.n, features);
    }
    if (b.requires_grad) {
      auto& db = b.ensure_grad();
      for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t k = 0; k < classes; ++k) db[k] += gout(n, k);
      }
    }
  });
}

namespace detail {

inline void check_broadcast(const Shape& target, const Shape& mask) {
  auto ok = [](std::int64_t t, std::int64_t m) { return m == t || m == 1; };
  if (!ok(target.n, mask.n) || !ok(target.c, mask.c) || !ok(target.h, mask.h) ||
      !ok(target.w, mask.w)) {
    throw ConfigError(concat("mask ", mask, " is not broadcastable to ", target));
  }
}

// Calls fn(target_index, mask_index) for every element of `target`.
template <typename Fn>
void for_each_broadcast(const Shape& target, const Shape& mask, Fn&& fn) {
  const std::int64_t sn = mask.n == 1 ? 0 : mask.c * mask.h * mask.w;
  const std::int64_t sc = mask.c == 1 ? 0 : mask.h * mask.w;
  const std::int64_t sh = mask.h == 1 ? 0 : mask.w;
  const std::int64_t sw = mask.w == 1 ? 0 : 1;
  std::int64_t t = 0;
  for (std::int64_t n = 0; n < target.n; ++n)
    for (std::int64_t c = 0; c < target.c; ++c)
      for (std::int64_t h = 0; h < target.h; ++h)
        for (std::int64_t w = 0; w < target.w; ++w) fn(t++, n * sn + c * sc + h * sh + w * sw);
}

}  // namespace detail

/// Product with a constant broadcastable factor. The factor is never
/// differentiated.
template <typename T>
Var<T> mul_const(const Var<T>& input, const BasicTensor<T>& factor) {
  const Shape s = input.shape();
  detail::check_broadcast(s, factor.shape());
  BasicTensor<T> out(s);
  detail::for_each_broadcast(s, factor.shape(), [&](std::int64_t i, std::int64_t m) {
    out[i] = input.value()[i] * factor[m];
  });
  return Var<T>::make(std::move(out), {input}, [s, factor](Node<T>& self) {
    auto& x = *self.parents[0];
    BasicTensor<T> delta(s);
    detail::for_each_broadcast(s, factor.shape(), [&](std::int64_t i, std::int64_t m) {
      delta[i] = self.grad[i] * factor[m];
    });
    detail::accumulate(x, delta);
  });
}

/// Hadamard product with a 0/1 mask broadcast over the input.
template <typename T>
Var<T> elementwise_mul(const Var<T>& input, const BasicTensor<T>& mask) {
  for (T v : mask.data()) {
    if (v != T(0) && v != T(1)) throw ConfigError("elementwise_mul: mask values must be 0 or 1");
  }
  return mul_const(input, mask);
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError(detail::concat("add: shape mismatch ", a.shape(), " vs ", b.shape()));
  }
  BasicTensor<T> out = a.value();
  out += b.value();
  return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

/// Sum of scalar variables.
template <typename T>
Var<T> sum_scalars(const std::vector<Var<T>>& terms) {
  double total = 0.0;
  for (const auto& t : terms) {
    if (t.shape().numel() != 1) throw ConfigError("sum_scalars: term is not a scalar");
    total += t.value()[0];
  }
  return Var<T>::make(BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(total)), terms,
                      [](Node<T>& self) {
                        for (auto& p : self.parents) detail::accumulate(*p, self.grad);
                      });
}

/// Scalar sum over input * weights (same shape); weights are constant.
template <typename T>
Var<T> weighted_sum(const Var<T>& input, const BasicTensor<T>& weights) {
  if (input.shape() != weights.shape()) {
    throw ConfigError(detail::concat("weighted_sum: shape mismatch ", input.shape(), " vs ",
                                     weights.shape()));
  }
  double total = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) total += double(input.value()[i]) * weights[i];
  return Var<T>::make(BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(total)), {input},
                      [weights](Node<T>& self) {
                        BasicTensor<T> delta = weights;
                        for (auto& v : delta.data()) v *= self.grad[0];
                        detail::accumulate(*self.parents[0], delta);
                      });
}

/// Mean over the batch of -sum_k t_k log softmax(a)_k. Targets are (N, K)
/// rows of non-negative weights; one-hot rows give the usual cross-entropy.
template <typename T>
Var<T> soft_target_cross_entropy(const Var<T>& logits, const BasicTensor<T>& targets) {
  const Shape s = logits.shape();
  const std::int64_t classes = s.c * s.h * s.w;
  if (targets.numel() != s.n * classes) {
    throw ConfigError(detail::concat("cross_entropy: targets ", targets.shape(),
                                     " do not match logits ", s));
  }
  if (classes < 2) throw ConfigError("cross_entropy: need at least two classes");
  BasicTensor<T> probs(s);
  double loss = 0.0;
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* a = logits.value().raw() + n * classes;
    const T* t = targets.raw() + n * classes;
    double peak = a[0];
    for (std::int64_t k = 1; k < classes; ++k) peak = std::max(peak, double(a[k]));
    double denom = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) denom += std::exp(double(a[k]) - peak);
    const double lse = peak + std::log(denom);
    for (std::int64_t k = 0; k < classes; ++k) {
      probs[n * classes + k] = static_cast<T>(std::exp(double(a[k]) - lse));
      loss += double(t[k]) * (lse - double(a[k]));
    }
  }
  loss /= static_cast<double>(s.n);
  return Var<T>::make(
      BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(loss)), {logits},
      [s, classes, targets, probs = std::move(probs)](Node<T>& self) {
        BasicTensor<T> delta(s);
        const double scale = double(self.grad[0]) / static_cast<double>(s.n);
        for (std::int64_t n = 0; n < s.n; ++n) {
          double mass = 0.0;
          for (std::int64_t k = 0; k < classes; ++k) mass += targets[n * classes + k];
          for (std::int64_t k = 0; k < classes; ++k) {
            const std::int64_t i = n * classes + k;
            delta[i] = static_cast<T>(scale * (mass * probs[i] - targets[i]));
          }
        }
        detail::accumulate(*self.parents[0], delta);
      });
}

template <typename T>
BasicTensor<T> one_hot(std::span<const int> labels, std::int64_t classes) {
  BasicTensor<T> out(Shape{static_cast<std::int64_t>(labels.size()), classes, 1, 1});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= classes) {
      throw InputError(detail::concat("label ", labels[n], " at position ", n,
                                      " outside [0, ", classes, ")"));
    }
    out[static_cast<std::int64_t>(n) * classes + labels[n]] = T(1);
  }
  return out;
}

/// Mean softmax cross-entropy against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  if (static_cast<std::int64_t>(labels.size()) != s.n) {
    throw InputError(detail::concat("cross_entropy: ", labels.size(), " labels for batch of ",
                                    s.n));
  }
  return soft_target_cross_entropy(logits, one_hot<T>(labels, s.c * s.h * s.w));
}

/// Row-wise argmax of (N, K) logits.
template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  const Shape s = logits.shape();
  const std::int64_t classes = s.c * s.h * s.w;
  std::vector<int> out(static_cast<std::size_t>(s.n));
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* row = logits.raw() + n * classes;
    out[static_cast<std::size_t>(n)] =
        static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace featmine
