#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "topopt/error.hpp"

namespace topopt::nn {

/// 64-byte aligned storage. Vectorized kernels peel differently depending
/// on the start address, so a fixed alignment keeps results reproducible
/// across runs and processes.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense row-major n-d array. Feature maps use NHWC layout.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, T fill = T{}) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }
  Tensor(std::vector<std::size_t> shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != count(shape_)) throw ShapeMismatch("tensor data length vs shape");
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T> storage() const { return {data_.begin(), data_.end()}; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NHWC accessors
  T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  const T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(std::vector<std::size_t> shape) {
    if (count(shape) != data_.size()) throw ShapeMismatch("reshape changes element count");
    shape_ = std::move(shape);
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

template <typename T>
void require_rank4(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) throw ShapeMismatch(std::string(what) + " expects NHWC, got " + shape_string(t.shape()));
}

/// Concatenate two NHWC tensors along channels.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4(a, "concat");
  require_rank4(b, "concat");
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeMismatch("concat " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  const std::size_t ca = a.dim(3), cb = b.dim(3), pixels = a.dim(0) * a.dim(1) * a.dim(2);
  Tensor<T> out({a.dim(0), a.dim(1), a.dim(2), ca + cb});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(a.data() + p * ca, ca, out.data() + p * (ca + cb));
    std::copy_n(b.data() + p * cb, cb, out.data() + p * (ca + cb) + ca);
  }
  return out;
}

/// Inverse of concat_channels for gradients.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::size_t ca) {
  require_rank4(g, "split");
  const std::size_t c = g.dim(3), cb = c - ca, pixels = g.dim(0) * g.dim(1) * g.dim(2);
  Tensor<T> a({g.dim(0), g.dim(1), g.dim(2), ca});
  Tensor<T> b({g.dim(0), g.dim(1), g.dim(2), cb});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(g.data() + p * c, ca, a.data() + p * ca);
    std::copy_n(g.data() + p * c + ca, cb, b.data() + p * cb);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) throw ShapeMismatch("add " + shape_string(src.shape()));
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) throw ShapeMismatch("dot");
  T s{};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T, typename Rng>
Tensor<T> random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T, typename Rng>
Tensor<T> random_uniform(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace topopt::nn
