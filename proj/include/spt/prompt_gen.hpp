#pragma once
#include <string>

#include "spt/phm.hpp"

namespace spt {

// Instance-aware prompt generator: down-project the layer's token hidden
// states to the bottleneck, mean-pool them into prompt_len contiguous
// segments, apply the activation, and up-project back to model width.
// Both projections are PHM layers sharing the same factor count.
struct PromptGenerator {
  int d_model = 0;
  int bottleneck = 0;
  int prompt_len = 0;
  std::string act = "tanh";  // tanh | relu | identity
  PhmLinear down;
  PhmLinear up;

  static PromptGenerator create(ParamStore& store, const std::string& name, int d_model,
                                int bottleneck, int phm_n, int prompt_len, const std::string& act);
  void init(std::mt19937_64& rng);
  std::size_t param_count() const { return down.param_count() + up.param_count(); }

  // token_h is T x d_model with T >= 1; rows are repeated up to prompt_len
  // when the sequence is shorter than the number of segments.
  ad::Tensor generate(ad::Tape& tape, Leases& lease, ad::Tensor token_h) const;
};

// Segment sizes for pooling T rows into l groups: sizes differ by at most
// one and the earlier segments take the extra rows.
std::vector<int> pooling_segments(int t, int l);

}  // namespace spt
