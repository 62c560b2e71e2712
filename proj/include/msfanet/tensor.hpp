#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "msfanet/errors.hpp"

namespace msfa {

/// Dense row-major array with a small dynamic shape. Feature maps use
/// (channels, height, width); conv weights (out, in, kh, kw).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }
  Tensor(std::initializer_list<int> shape, T fill = T(0)) : Tensor(std::vector<int>(shape), fill) {}

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      MSFA_EXPECT(d >= 0, "negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // (C, H, W) accessors for feature maps.
  int channels() const { return dim(0); }
  int height() const { return dim(1); }
  int width() const { return dim(2); }
  std::size_t plane() const { return static_cast<std::size_t>(dim(1)) * static_cast<std::size_t>(dim(2)); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x]; }
  const T& at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    MSFA_EXPECT(shape_ == o.shape_, "tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Single-channel 2D grid (density maps, masks).
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T(0)) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
    MSFA_EXPECT(h >= 0 && w >= 0, "negative grid dimension");
  }

  T& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const noexcept { return values.size(); }

  double sum() const {
    double s = 0.0;
    for (const T& v : values) s += static_cast<double>(v);
    return s;
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height == b.height && a.width == b.width && a.values == b.values;
  }
};

}  // namespace msfa
