#pragma once

#include <complex>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mclaro {

using Cplx = std::complex<double>;

// Dense row-major N-d array, last axis contiguous.
template <typename T>
class Nd {
public:
  Nd() = default;
  explicit Nd(std::vector<int> shape, T fill = T{}) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d <= 0) throw std::invalid_argument("Nd: non-positive dimension");
    }
    data_.assign(numel(), fill);
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(i); }
  int ndim() const { return (int)shape_.size(); }
  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape_) n *= d;
    return shape_.empty() ? 0 : n;
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[i]; }
  const T& operator[](std::int64_t i) const { return data_[i]; }

  // 2-d / 3-d accessors; no bounds checks in release builds.
  T& at2(int i, int j) { return data_[(std::int64_t)i * shape_[1] + j]; }
  const T& at2(int i, int j) const { return data_[(std::int64_t)i * shape_[1] + j]; }
  T& at3(int i, int j, int k) {
    return data_[((std::int64_t)i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at3(int i, int j, int k) const {
    return data_[((std::int64_t)i * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Nd& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using RGrid = Nd<double>;
using CGrid = Nd<Cplx>;
using MaskGrid = Nd<std::uint8_t>;
using LabelGrid = Nd<std::int32_t>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

}  // namespace mclaro
