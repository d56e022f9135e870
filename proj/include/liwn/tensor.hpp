#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "liwn/error.hpp"

namespace liwn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. The scalar type is the precision mode: f32 for
/// training, f64 for verification; a computation never mixes the two.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0}) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(shape_size(dims_), fill);
  }

  Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(dims_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match extents " + shape_str(dims_));
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... I>
  T& at(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... I>
  const T& at(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Same data, new extents (element count must match).
  Tensor reshaped(Shape dims) const& {
    Tensor out = *this;
    out.reshape(std::move(dims));
    return out;
  }
  Tensor reshaped(Shape dims) && {
    reshape(std::move(dims));
    return std::move(*this);
  }
  void reshape(Shape dims) {
    if (shape_size(dims) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    dims_ = std::move(dims);
    check_dims();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  Tensor& operator+=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }
  friend Tensor operator*(T s, Tensor a) { return a *= s; }

  void require_same(const Tensor& o) const {
    if (o.dims_ != dims_)
      throw ShapeError("extent mismatch " + shape_str(dims_) + " vs " + shape_str(o.dims_));
  }

 private:
  void check_dims() const {
    for (auto d : dims_)
      if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(dims_));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dims_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= dims_[k]) throw ShapeError("index out of range");
      off = off * dims_[k++] + i;
    }
    return off;
  }

  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same(b);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

template <typename T>
double norm2(const Tensor<T>& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
double max_abs(const Tensor<T>& a) {
  double m = 0;
  for (auto v : a.values()) m = std::max(m, std::abs(double(v)));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same(b);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double rel_l2_error(const Tensor<T>& approx, const Tensor<T>& exact) {
  return norm2(approx - exact) / norm2(exact);
}

/// Seeded generator whose draw sequence is identical on every platform:
/// mt19937_64's output is fixed by the standard, and all distributions are
/// derived here rather than through the implementation-defined std ones.
class SeedRng {
 public:
  explicit SeedRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  /// Independent stream for (seed, stream) pairs, e.g. one per epoch.
  SeedRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), engine_(mix(seed, stream)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw PreconditionError("uniform_int needs n >= 1");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do v = engine_();
    while (v >= limit);
    return v % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do u1 = uniform();
    while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_int(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

template <typename T>
Tensor<T> random_normal(Shape dims, SeedRng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(dims));
  for (auto& v : t.values()) v = T(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> random_uniform(Shape dims, SeedRng& rng, double lo, double hi) {
  Tensor<T> t(std::move(dims));
  for (auto& v : t.values()) v = T(rng.uniform(lo, hi));
  return t;
}

}  // namespace liwn
