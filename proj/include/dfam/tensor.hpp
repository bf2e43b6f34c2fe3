#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfam/rng.hpp"

namespace dfam {

enum class Precision { F64, F32 };

// Global numeric mode. F64 for verification (grad checks, determinism suites),
// F32 for training. In F32 mode op results are rounded through IEEE single
// precision so runs are reproducible against a 32-bit reference.
inline Precision& precision_mode() {
  static Precision p = Precision::F64;
  return p;
}

inline double quantize(double x) {
  return precision_mode() == Precision::F32 ? static_cast<double>(static_cast<float>(x)) : x;
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor, layout [batch, channels, height, width] for feature
// maps with width innermost.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<size_t>(numel_of(shape_)) != data_.size())
      throw ShapeError("tensor data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.normal(0.0, stddev);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // rank-4 accessors [b,c,y,x]
  int64_t index4(int b, int c, int y, int x) const {
    return ((static_cast<int64_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }
  double& at4(int b, int c, int y, int x) { return data_[static_cast<size_t>(index4(b, c, y, x))]; }
  double at4(int b, int c, int y, int x) const {
    return data_[static_cast<size_t>(index4(b, c, y, x))];
  }

  // rank-2 accessors [r,c]
  double& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
  double at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

  // rank-3 accessors [a,b,c]
  double& at3(int a, int b, int c) {
    return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
  }
  double at3(int a, int b, int c) const {
    return data_[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Tensor& add_(const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data_.size(); ++i) data_[i] = quantize(data_[i] + o.data_[i]);
    return *this;
  }

  Tensor& scale_(double s) {
    for (auto& x : data_) x = quantize(x * s);
    return *this;
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     Tensor::shape_str(t.shape()));
}

}  // namespace dfam
