#pragma once
#include <cstddef>
#include <unordered_map>
#include <vector>

#include "spt/params.hpp"

namespace spt {

// Linear warmup to the base rate, then linear decay to zero at total_steps.
struct LrSchedule {
  double base = 1e-3;
  int total_steps = 1;
  double warmup_frac = 0.06;

  double at(int step) const;  // step counts from 0
};

// Adam with decoupled weight decay and bias correction. Gradients are read
// from the tape through each parameter's active lease.
class AdamW {
 public:
  explicit AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update over `params` using grads from `tape`/`lease`. Parameters that
  // never entered the forward pass (no lease) are skipped. `lr_override` < 0
  // means use the constructor rate.
  void step(const std::vector<Parameter*>& params, const ad::Tape& tape, const Leases& lease,
            double lr_override = -1.0);

  // Same update from explicit gradient buffers (one per parameter, matching
  // sizes), for callers that accumulate grads across several tapes.
  void step_with_grads(const std::vector<Parameter*>& params,
                       const std::vector<const std::vector<double>*>& grads,
                       double lr_override = -1.0);

  int steps_taken() const { return t_; }
  double weight_decay() const { return wd_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  Slot& slot_for(Parameter* p);

  double lr_, wd_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::unordered_map<Parameter*, Slot> state_;
};

}  // namespace spt
