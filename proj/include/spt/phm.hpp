#pragma once
#include <string>
#include <vector>

#include "spt/params.hpp"

namespace spt {

// Linear map whose weight is a sum of n Kronecker products A_j (x) B_j with
// A_j of size n x n and B_j of size (in/n) x (out/n). Parameter cost is
// n^3 + in*out/n instead of in*out, and there is no bias. The forward can
// either materialize the summed weight or work block-wise; both routes give
// the same map and are cross-checked in the tests.
struct PhmLinear {
  int in_dim = 0;
  int out_dim = 0;
  int n = 0;
  std::vector<Parameter*> a;  // n factors, each n x n
  std::vector<Parameter*> b;  // n factors, each (in/n) x (out/n)

  static PhmLinear create(ParamStore& store, const std::string& name, int in_dim, int out_dim, int n);
  // B entries ~ N(0, 0.02); A starts near identity/n with the same noise,
  // so the initial map is close to a plain scaled linear layer.
  void init(std::mt19937_64& rng);

  std::size_t param_count() const;

  ad::Tensor weight(ad::Tape& tape, Leases& lease) const;  // materialized sum
  ad::Tensor forward(ad::Tape& tape, Leases& lease, ad::Tensor x) const;
  ad::Tensor forward_blockwise(ad::Tape& tape, Leases& lease, ad::Tensor x) const;
};

}  // namespace spt
