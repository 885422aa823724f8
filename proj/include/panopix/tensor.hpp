#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "panopix/common.hpp"

namespace panopix {

enum class Precision { F32, F64 };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors are single or double precision");
  return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

inline const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

// Dense n-dimensional array, row-major, value semantics.
template <typename T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>);

  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str());
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) throw ShapeError("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool is_scalar() const { return numel() == 1; }

  constexpr Precision precision() const { return precision_of<T>(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-d and 4-d accessors; the kernels index manually for speed.
  T& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
  const T& at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

  T& at4(int64_t n, int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }
  const T& at4(int64_t n, int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  Tensor reshaped(std::vector<int64_t> s) const {
    if (numel_of(s) != numel())
      throw ShapeError("reshape: cannot view " + shape_str() + " as requested shape");
    Tensor out = *this;
    out.shape = std::move(s);
    return out;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string(op) + ": produced non-finite values");
}

template <typename T>
void ensure_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Random tensor helpers used by initializers and tests.
template <typename T>
Tensor<T> random_normal(std::vector<int64_t> shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

template <typename T>
Tensor<T> random_uniform(std::vector<int64_t> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  ensure_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace panopix
