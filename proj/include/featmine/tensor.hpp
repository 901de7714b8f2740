#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <ostream>
#include <span>
#include <vector>

#include "featmine/errors.hpp"

namespace featmine {

// Tensor storage goes through this allocator so training runs can report a
// deterministic peak allocation figure independent of the system allocator.
class MemoryTracker {
 public:
  static void add(std::size_t bytes) {
    const auto now = current().fetch_add(bytes) + bytes;
    auto seen = peak().load();
    while (now > seen && !peak().compare_exchange_weak(seen, now)) {
    }
  }
  static void sub(std::size_t bytes) { current().fetch_sub(bytes); }
  static std::size_t current_bytes() { return current().load(); }
  static std::size_t peak_bytes() { return peak().load(); }
  static void reset_peak() { peak().store(current().load()); }

 private:
  static std::atomic<std::size_t>& current() {
    static std::atomic<std::size_t> value{0};
    return value;
  }
  static std::atomic<std::size_t>& peak() {
    static std::atomic<std::size_t> value{0};
    return value;
  }
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryTracker::add(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::sub(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

/// (N, C, H, W) extents of a dense tensor.
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  friend std::ostream& operator<<(std::ostream& os, const Shape& s) {
    return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
  }
};

/// Dense row-major NCHW array. Value type; copies are deep.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackingAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ConfigError(detail::concat("negative tensor extent ", shape));
    }
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }
  BasicTensor(Shape shape, std::initializer_list<T> values) : BasicTensor(shape) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw ConfigError(detail::concat("initializer of length ", values.size(),
                                       " does not fill shape ", shape));
    }
    std::copy(values.begin(), values.end(), data_.begin());
  }

  template <typename U>
  static BasicTensor cast_from(const BasicTensor<U>& other) {
    BasicTensor out(other.shape());
    std::transform(other.data().begin(), other.data().end(), out.data_.begin(),
                   [](U v) { return static_cast<T>(v); });
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return {data_.data(), data_.size()}; }
  std::span<const T> data() const { return {data_.data(), data_.size()}; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new extents with identical element count.
  BasicTensor reshaped(Shape shape) const {
    if (shape.numel() != numel()) {
      throw ConfigError(detail::concat("cannot reshape ", shape_, " to ", shape));
    }
    BasicTensor out = *this;
    out.shape_ = shape;
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  BasicTensor& operator+=(const BasicTensor& other) {
    if (other.shape_ != shape_) {
      throw ConfigError(detail::concat("shape mismatch in accumulate: ", shape_, " vs ",
                                       other.shape_));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin());
  }

 private:
  Shape shape_{};
  Storage data_;
};

using Tensor = BasicTensor<float>;

}  // namespace featmine
