#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlalign/core/rng.hpp"

namespace vlalign {

using real = double;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor of doubles, rank 0..4. Value semantics.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
  }

  Tensor(std::vector<long> shape, std::vector<real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<long>(data_.size()) != numel_of(shape_))
      throw ShapeError("tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

  // Shape without storage; only declared_numel() and shape() are
  // meaningful. Used by parameter accounting at full scale.
  static Tensor shape_only(std::vector<long> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    return t;
  }

  bool materialized() const { return static_cast<long>(data_.size()) == numel_of(shape_); }
  long declared_numel() const { return numel_of(shape_); }

  static Tensor full(std::vector<long> shape, real v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<long> shape, Rng& rng, real stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = stddev * rng.normal();
    return t;
  }

  static Tensor uniform(std::vector<long> shape, Rng& rng, real lo, real hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  const std::vector<long>& shape() const { return shape_; }
  long dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  long numel() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& vec() { return data_; }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  real operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  real& at(long i, long j) { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
  real at(long i, long j) const { return data_[static_cast<std::size_t>(i * dim(1) + j)]; }
  real& at(long i, long j, long k) {
    return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  real at(long i, long j, long k) const {
    return data_[static_cast<std::size_t>((i * dim(1) + j) * dim(2) + k)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<long> shape) const {
    if (numel_of(shape) != numel()) throw ShapeError("reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  real item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return data_[0];
  }

  real max_abs() const {
    real m = 0.0;
    for (real x : data_) m = std::max(m, std::abs(x));
    return m;
  }

  bool all_finite() const {
    for (real x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
  }

  static long numel_of(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<long> shape_;
  std::vector<real> data_;
};

inline void check_shape(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
  check_shape(a.same_shape(b), "max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  real m = 0.0;
  for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace vlalign
