// AdamW with decoupled weight decay, plus the warmup + cosine-decay schedule.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mgvit/common.hpp"
#include "mgvit/tensor.hpp"

namespace mgvit {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Moment buffers are keyed by parameter name so optimizer state survives
// checkpointing. A parameter whose gradient buffer was never populated this
// step is skipped entirely (no decay, no moment update); a populated buffer of
// zeros still decays. One step counter for the whole optimizer.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }

  void step(const std::vector<std::pair<std::string, Tensor>>& params) {
    step(params, cfg_.lr);
  }

  void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr_now) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, param] : params) {
      if (!param.has_grad()) continue;
      const std::vector<double>& g = param.grad();
      Slot& slot = slots_[name];
      if (slot.m.empty()) {
        slot.m.assign(g.size(), 0.0);
        slot.v.assign(g.size(), 0.0);
      } else if (slot.m.size() != g.size()) {
        throw ShapeError("adamw: moment size " + std::to_string(slot.m.size()) +
                         " vs grad size " + std::to_string(g.size()) + " for " + name);
      }
      auto& theta = const_cast<Tensor&>(param).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g[i];
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        theta[i] -= lr_now * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
      }
    }
  }

  // State access for checkpointing.
  struct Slot {
    std::vector<double> m, v;
  };
  const std::map<std::string, Slot>& slots() const { return slots_; }
  void restore(std::map<std::string, Slot> slots, std::uint64_t step) {
    slots_ = std::move(slots);
    step_ = step;
  }

 private:
  AdamWConfig cfg_;
  std::map<std::string, Slot> slots_;
  std::uint64_t step_ = 0;
};

// Linear warmup from 0 to base_lr, then half-cosine decay to 0 at total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                        double base_lr) {
  if (warmup_steps >= total_steps) throw InputError("warmup_steps must be < total_steps");
  if (step > total_steps) throw InputError("step beyond total_steps");
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace mgvit
