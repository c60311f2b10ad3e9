#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "misod/core/error.hpp"

namespace misod {

// Dense NCHW tensor. Everything in the network is 4-d: activations are
// (batch, channels, height, width), conv weights are (out, in, kh, kw),
// per-channel parameters are (1, C, 1, 1), scalars are (1, 1, 1, 1).
struct Shape4 {
  int n = 0, c = 0, h = 0, w = 0;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {
    internal_check(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0,
                   "tensor dims must be nonnegative");
  }
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : Tensor(Shape4{n, c, h, w}, fill) {}

  static Tensor scalar(T v) {
    Tensor t(1, 1, 1, 1);
    t.data_[0] = v;
    return t;
  }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::size_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<std::size_t>(in) * shape_.c + ic) * shape_.h + iy) *
               shape_.w + ix;
  }
  T& at(int in, int ic, int iy, int ix) { return data_[index(in, ic, iy, ix)]; }
  T at(int in, int ic, int iy, int ix) const {
    return data_[index(in, ic, iy, ix)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  // pointer to the start of one (n, c) plane
  T* plane(int in, int ic) {
    return data_.data() + index(in, ic, 0, 0);
  }
  const T* plane(int in, int ic) const {
    return data_.data() + index(in, ic, 0, 0);
  }

  T item() const {
    internal_check(numel() == 1, "item() requires a scalar tensor");
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& other) {
    internal_check(shape_ == other.shape_, "+= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& other) {
    internal_check(shape_ == other.shape_, "-= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  Tensor& operator*=(T k) {
    for (auto& v : data_) v *= k;
    return *this;
  }
  void add_scaled(const Tensor& other, T k) {
    internal_check(shape_ == other.shape_, "add_scaled shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i)
      data_[i] += k * other.data_[i];
  }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const { return *std::min_element(data_.begin(), data_.end()); }
  T max_value() const { return *std::max_element(data_.begin(), data_.end()); }
  double sum() const {
    double acc = 0;
    for (const auto& v : data_) acc += static_cast<double>(v);
    return acc;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_.n, shape_.c, shape_.h, shape_.w);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

}  // namespace misod
