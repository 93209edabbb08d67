#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace camfool {

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major n-d array. R is float for runtime work, double for oracles.
template <class R>
struct Tensor {
  Shape shape;
  std::vector<R> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), R(0)) {}
  Tensor(Shape s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) throw std::invalid_argument("tensor shape/data length mismatch");
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, R v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(R v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  R* ptr() { return data.data(); }
  const R* ptr() const { return data.data(); }
  R& operator[](std::size_t i) { return data[i]; }
  const R& operator[](std::size_t i) const { return data[i]; }

  // 3-d accessor for [C,H,W] layouts.
  R& at(int c, int i, int j) {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }
  const R& at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }
};

template <class R>
bool all_finite(const Tensor<R>& t) {
  for (R v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

template <class R>
int argmax_index(const Tensor<R>& t) {
  int best = 0;
  for (std::size_t i = 1; i < t.numel(); ++i)
    if (t.data[i] > t.data[best]) best = static_cast<int>(i);
  return best;
}

template <class R>
int argmin_index(const Tensor<R>& t) {
  int best = 0;
  for (std::size_t i = 1; i < t.numel(); ++i)
    if (t.data[i] < t.data[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace camfool
