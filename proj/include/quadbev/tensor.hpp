#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "quadbev/error.hpp"

namespace qbev {

// Dense row-major double tensor. All training math runs in 64-bit; dataset
// files quantize to float32 at the source so disk round trips stay bit-exact.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_contract(static_cast<long>(data_.size()) == count(shape_),
                   "tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  long numel() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major accessors; bounds are the caller's responsibility.
  double& at(int i) { return data_[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double& at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double at(int i) const { return data_[static_cast<size_t>(i)]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double sum() const {
    double s = 0.0;
    for (double x : data_) s += x;
    return s;
  }
  double abs_max() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::fabs(x));
    return m;
  }
  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  // Quantize every element through float32; used when producing dataset
  // payloads so in-memory values equal their on-disk representation.
  void quantize_f32() {
    for (double& x : data_) x = static_cast<double>(static_cast<float>(x));
  }

  static long count(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      check_contract(d >= 0, "negative tensor dimension");
      n *= d;
    }
    return n;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_contract(a.same_shape(b), "max_abs_diff shape mismatch");
  double m = 0.0;
  for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
  check_contract(a.same_shape(b), "mean_abs_diff shape mismatch");
  if (a.numel() == 0) return 0.0;
  double s = 0.0;
  for (long i = 0; i < a.numel(); ++i) s += std::fabs(a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

}  // namespace qbev
