#pragma once
#include <span>
#include <vector>

#include "spt/backbone.hpp"
#include "spt/prompt_gen.hpp"
#include "spt/rng.hpp"

namespace spt {

// How the gate column is prepared for a pass.
//   off:      plain sigmoid(alpha).
//   detached: multiply by detach(sum(a))/sum(a) — value 1, but its gradient
//             couples the gates through the shared sum.
//   live_sum: same value with the numerator left in the graph, which kills
//             the coupling term. Deliberately wrong; kept so tests can prove
//             the closed-form gradient oracle distinguishes the two.
enum class Reparam { off, detached, live_sum };

// The over-parameterized prompt model: one generator and one gate per
// injection point (0 = after the embedding, i = after block i, up to L).
class HyperNet {
 public:
  static HyperNet create(const RunConfig& cfg);
  void init(RngPool& pool);

  int points() const { return cfg_.layers + 1; }

  ad::Tensor gates(ad::Tape& tape, Leases& lease, Reparam mode) const;  // points x 1

  std::vector<double> gate_values() const;   // sigmoid(alpha), plain numbers
  std::vector<double> alpha_values() const;

  // Independent Bernoulli(mask_keep) per injection point.
  std::vector<int> sample_mask(std::mt19937_64& rng) const;

  // Injector realizing the gated mixing: at point i the slots become
  // (1 - c_i) * carried + c_i * fresh, c_i = mask_i * tau * gate_i, with the
  // fresh block generated from that point's token hiddens. Points masked off
  // are skipped outright, so their generators never touch the tape through
  // this injector. Slots turn live at the first applied point.
  Backbone::Injector injector(ad::Tape& tape, Leases& lease, ad::Tensor gate_col,
                              std::vector<int> mask) const;

  struct Losses {
    ad::Tensor total, task, consistency;  // consistency invalid when skipped
    double total_value = 0.0, task_value = 0.0, consistency_value = 0.0;
  };
  // Cross entropy on the masked pass plus, when lambda_c > 0, lambda_c times
  // the mean squared distance between the masked and unmasked readouts of
  // the same inputs (both passes live on one tape).
  Losses batch_losses(ad::Tape& tape, Leases& lease, const Backbone& bb,
                      std::span<const Sample> batch, std::span<const int> window, Reparam mode,
                      const std::vector<int>& mask, double lambda_c) const;

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  Parameter& alpha() { return *alpha_; }
  const Parameter& alpha() const { return *alpha_; }
  const PromptGenerator& generator(int point) const {
    return gens_[static_cast<std::size_t>(point)];
  }
  const RunConfig& cfg() const { return cfg_; }

  static bool is_gate(const Parameter& p) { return p.name == "gates.alpha"; }

 private:
  RunConfig cfg_;
  ParamStore store_;
  Parameter* alpha_ = nullptr;  // points x 1 logits, zero-init
  std::vector<PromptGenerator> gens_;
};

// Hand-coded gate-logit gradient for sensitivities g_k = dL/d(gate_k) under
// the detached re-parameterization:
//   d L / d alpha_i = a_i (1 - a_i) (g_i - sum_k (a_k / sum_j a_j) g_k).
std::vector<double> gate_grad_closed_form(const std::vector<double>& alpha,
                                          const std::vector<double>& sens);

}  // namespace spt
