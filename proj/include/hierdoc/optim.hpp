#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hierdoc/errors.hpp"
#include "hierdoc/params.hpp"
#include "hierdoc/tensor.hpp"

namespace hierdoc {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moment slots exist only for trainable
// parameters; frozen tensors are never touched.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  // One update over every trainable parameter, reading Tensor::grad and
  // leaving the gradients untouched (callers zero them per step).
  void step(ParamSet<T>& params, double lr_override = -1.0) {
    const double lr = lr_override >= 0.0 ? lr_override : cfg_.lr;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& entry : params.entries()) {
      Tensor<T>& p = entry.tensor;
      if (!p.requires_grad) continue;
      Slot& slot = slot_for(entry.path, p.numel());
      const std::vector<T>& g = *p.grad;
      std::vector<T>& d = *p.data;
      for (size_t i = 0; i < d.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi;
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        double x = static_cast<double>(d[i]);
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        x -= lr * cfg_.weight_decay * x;
        d[i] = static_cast<T>(x);
      }
    }
  }

  // Checkpoint access: moments are serialized next to the parameters.
  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  Slot& slot_for(const std::string& path, size_t n) {
    auto it = slots_.find(path);
    if (it == slots_.end()) {
      Slot s;
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
      it = slots_.emplace(path, std::move(s)).first;
    }
    if (it->second.m.size() != n)
      throw ContractError("AdamW: moment shape mismatch for " + path);
    return it->second;
  }

  AdamConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, Slot> slots_;
};

// Global-norm gradient clipping; returns the pre-clip norm.
template <typename T>
double clip_global_norm(ParamSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& e : params.entries()) {
    if (!e.tensor.requires_grad) continue;
    for (T g : *e.tensor.grad) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& e : params.entries()) {
      if (!e.tensor.requires_grad) continue;
      for (T& g : *e.tensor.grad) g *= s;
    }
  }
  return norm;
}

}  // namespace hierdoc
