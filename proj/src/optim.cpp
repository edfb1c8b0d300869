#include "spt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace spt {

double LrSchedule::at(int step) const {
  const int warm = std::max(1, static_cast<int>(std::lround(warmup_frac * total_steps)));
  if (step <= warm) return base * step / warm;
  if (step >= total_steps) return 0.0;
  return base * (total_steps - step) / static_cast<double>(total_steps - warm);
}

AdamW::Slot& AdamW::slot_for(Parameter* p) {
  Slot& s = state_[p];
  if (s.m.empty()) {
    s.m.assign(p->size(), 0.0);
    s.v.assign(p->size(), 0.0);
  }
  return s;
}

void AdamW::step(const std::vector<Parameter*>& params, const ad::Tape& tape, const Leases& lease,
                 double lr_override) {
  std::vector<const std::vector<double>*> grads;
  std::vector<Parameter*> present;
  std::vector<std::vector<double>> storage;
  storage.reserve(params.size());
  for (Parameter* p : params) {
    ad::Tensor t = lease.find(*p);
    if (!t.valid() || !t.requires_grad()) continue;
    std::span<const double> g = tape.grad_view(t);
    storage.emplace_back(g.begin(), g.end());
    grads.push_back(&storage.back());
    present.push_back(p);
  }
  step_with_grads(present, grads, lr_override);
}

void AdamW::step_with_grads(const std::vector<Parameter*>& params,
                            const std::vector<const std::vector<double>*>& grads,
                            double lr_override) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer step: grads do not match params");
  const double lr = lr_override < 0.0 ? lr_ : lr_override;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    const std::vector<double>& g = *grads[i];
    if (g.size() != p->size())
      throw std::invalid_argument("optimizer step: grad size mismatch for " + p->name);
    Slot& s = slot_for(p);
    for (std::size_t j = 0; j < g.size(); ++j) {
      s.m[j] = beta1_ * s.m[j] + (1.0 - beta1_) * g[j];
      s.v[j] = beta2_ * s.v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = s.m[j] / bc1;
      const double vhat = s.v[j] / bc2;
      p->value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->value[j]);
    }
  }
}

}  // namespace spt
