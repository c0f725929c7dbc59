#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hierdoc/errors.hpp"
#include "hierdoc/rng.hpp"

namespace hierdoc {

// Dense row-major tensor. Copies are shallow (shared storage); tensors are
// treated as immutable values once produced by an op. The scalar type is
// float for training and double for gradient checking and bit-exact modes.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  // Leaf gradient accumulator; allocated on demand when a tape registers
  // the tensor as a leaf (hence mutable, like the tape fields below).
  mutable std::shared_ptr<std::vector<T>> grad;
  bool requires_grad = false;

  // Association with the tape that currently tracks this tensor. Managed by
  // Tape; a stale tape_id simply means "not yet seen by the active tape".
  mutable uint64_t tape_id = 0;
  mutable int32_t node = -1;

  Tensor() = default;

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return shape.empty() ? 0 : n;
  }

  bool defined() const { return static_cast<bool>(data); }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }

  T& at(size_t i) { return (*data)[i]; }
  T at(size_t i) const { return (*data)[i]; }
  T& at(int i, int j) { return (*data)[static_cast<size_t>(i) * cols() + j]; }
  T at(int i, int j) const {
    return (*data)[static_cast<size_t>(i) * cols() + j];
  }

  T scalar() const {
    if (numel() != 1)
      throw ContractError("Tensor::scalar: tensor has " +
                          std::to_string(numel()) + " elements");
    return (*data)[0];
  }

  Tensor<T>& set_requires_grad(bool b = true) {
    requires_grad = b;
    if (b && !grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
    if (!b) grad.reset();
    return *this;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Deep copy with fresh storage.
  Tensor<T> clone() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = std::make_shared<std::vector<T>>(*data);
    out.requires_grad = requires_grad;
    if (requires_grad) out.grad = std::make_shared<std::vector<T>>(*grad);
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data = std::make_shared<std::vector<U>>(numel());
    for (size_t i = 0; i < numel(); ++i)
      (*out.data)[i] = static_cast<U>((*data)[i]);
    out.requires_grad = requires_grad;
    if (requires_grad) out.grad = std::make_shared<std::vector<U>>(numel(), U(0));
    return out;
  }

  bool all_finite() const {
    for (T v : *data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static Tensor<T> zeros(std::vector<int> shape) {
    return full(std::move(shape), T(0));
  }

  static Tensor<T> full(std::vector<int> shape, T value) {
    Tensor<T> t;
    check_shape(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<T>>(t.numel(), value);
    return t;
  }

  static Tensor<T> from(std::vector<int> shape, std::vector<T> values) {
    Tensor<T> t;
    check_shape(shape);
    t.shape = std::move(shape);
    size_t n = t.numel();
    if (values.size() != n)
      throw ContractError("Tensor::from: " + std::to_string(values.size()) +
                          " values for shape " + shape_str(t.shape));
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor<T> randn(std::vector<int> shape, RngStream& rng,
                         double stddev = 1.0, double mean = 0.0) {
    Tensor<T> t = zeros(std::move(shape));
    for (auto& v : *t.data) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
  }

 private:
  static void check_shape(const std::vector<int>& s) {
    if (s.empty()) throw ContractError("Tensor: empty shape");
    for (int d : s)
      if (d <= 0)
        throw ContractError("Tensor: non-positive dimension in " +
                            shape_str(s));
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace hierdoc
