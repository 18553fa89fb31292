// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with 32-bit storage by default. A 64-bit
// instantiation exists for test oracles only.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmlens {

// Shape/contract violation (mismatched dims, bad arguments).
class DimError : public std::runtime_error {
 public:
  explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violation of an operation precondition that is not a pure shape issue.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf surfaced by a numeric op. Never swallowed.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(count(), T(0));
  }

  TensorT(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != count()) {
      throw DimError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT full(std::vector<int> shape, T value) {
    TensorT t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  static TensorT scalar(T value) { return TensorT({1}, {value}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  const std::vector<int>& shape() const { return shape_; }
  size_t numel() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](size_t i) { return data_[i]; }
  T operator[](size_t i) const { return data_[i]; }

  // 2-D accessors; row-major.
  T& operator()(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  T operator()(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

  int rows() const { return shape_[0]; }
  int cols() const { return shape_.back(); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(d));
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimError("tensor rank must be >= 1");
    for (int d : shape_) {
      if (d < 1) throw DimError("tensor dims must be >= 1, got " + shape_str(shape_));
    }
  }

  size_t count() const {
    size_t n = 1;
    for (int d : shape_) n *= static_cast<size_t>(d);
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;

template <typename T>
inline void ensure_finite(const TensorT<T>& t, const char* op) {
  if (!t.all_finite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace ssmlens
