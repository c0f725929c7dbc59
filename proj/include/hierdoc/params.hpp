#pragma once

#include <map>
#include <string>
#include <vector>

#include "hierdoc/errors.hpp"
#include "hierdoc/rng.hpp"
#include "hierdoc/tensor.hpp"

namespace hierdoc {

// Ordered registry of named parameter tensors. Registration order is the
// deterministic order used for initialization and optimizer sweeps; paths
// ("base/word/0/w_qk", ...) are the checkpoint keys.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string path;
    Tensor<T> tensor;
  };

  Tensor<T>& add(const std::string& path, Tensor<T> t) {
    if (index_.count(path))
      throw ContractError("ParamSet: duplicate parameter path " + path);
    t.set_requires_grad(true);
    index_[path] = entries_.size();
    entries_.push_back({path, std::move(t)});
    return entries_.back().tensor;
  }

  bool has(const std::string& path) const { return index_.count(path) > 0; }

  Tensor<T>& get(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end())
      throw ContractError("ParamSet: unknown parameter " + path);
    return entries_[it->second].tensor;
  }

  const Tensor<T>& get(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end())
      throw ContractError("ParamSet: unknown parameter " + path);
    return entries_[it->second].tensor;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Freeze / unfreeze every parameter whose path starts with the prefix.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& e : entries_)
      if (e.path.rfind(prefix, 0) == 0) e.tensor.set_requires_grad(trainable);
  }

  std::vector<std::string> paths_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.path.rfind(prefix, 0) == 0) out.push_back(e.path);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// Weight matrices are N(0, 0.02); layer-norm gains 1; every bias 0.
// Helpers so all modules initialize identically from one "init" stream.
template <typename T>
Tensor<T> init_weight(std::vector<int> shape, RngStream& rng) {
  return Tensor<T>::randn(std::move(shape), rng, 0.02);
}

template <typename T>
Tensor<T> init_zeros(std::vector<int> shape) {
  return Tensor<T>::zeros(std::move(shape));
}

template <typename T>
Tensor<T> init_ones(std::vector<int> shape) {
  return Tensor<T>::full(std::move(shape), T(1));
}

}  // namespace hierdoc
