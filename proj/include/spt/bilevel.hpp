#pragma once
#include <string>
#include <vector>

#include "spt/hypernet.hpp"
#include "spt/optim.hpp"

namespace spt {

// Disjoint halves of the training indices; generators train on d_omega,
// gates on d_alpha. Re-drawn at every epoch start.
struct TrainSplit {
  std::vector<int> d_omega, d_alpha;
};
TrainSplit split_epoch(int n, std::mt19937_64& rng);

struct SearchOptions {
  Reparam mode = Reparam::detached;
  bool use_masks = true;
  double lambda_c = 1.0;
  std::string metrics_path;  // JSON lines, one object per complete step; empty = off
};

// One gradient step of the hyper-network loss on one batch, updating either
// the generator side (gates_side = false) or the gate side (true); the other
// side is leased without gradients and stays bitwise untouched.
struct StepOut {
  double loss = 0.0, task = 0.0, consistency = 0.0;
};
StepOut optimize_batch(const Backbone& bb, HyperNet& hn, std::span<const Sample> batch,
                       std::span<const int> window, const SearchOptions& opt,
                       const std::vector<int>& mask, AdamW& optim, double lr, bool gates_side);

struct SearchResult {
  std::vector<std::vector<double>> alpha_per_epoch;
  std::vector<double> final_alpha;
  std::vector<double> final_gates;  // sigmoid(final_alpha)
  int steps_run = 0;
};

// Alternating bi-level search over cfg.steps complete steps (inner + outer).
// Initializes the hyper-network from the seed, so the whole trajectory is a
// pure function of (cfg, task, seed, opt).
SearchResult search(const RunConfig& cfg, const Backbone& bb, HyperNet& hn, const TaskData& task,
                    std::uint64_t seed, const SearchOptions& opt);

}  // namespace spt
