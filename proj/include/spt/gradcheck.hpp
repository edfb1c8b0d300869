#pragma once
#include <functional>
#include <span>
#include <vector>

#include "spt/tape.hpp"

namespace spt {

// Central-difference gradient verification. The builder gets a fresh tape and
// a leaf holding the current input values and must return a scalar loss.
// Steps are eps scaled by the magnitude of each entry; relative errors use an
// absolute floor of 1e-4 in the denominator so zero gradients compare cleanly.
struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

using LossBuilder = std::function<ad::Tensor(ad::Tape&, ad::Tensor x)>;

GradCheckReport finite_diff_check(const LossBuilder& f, const ad::Shape& shape,
                                  std::span<const double> x0, double eps = 1e-5);

// Same idea for losses over many parameter blocks held outside any tape.
// `loss_value` must evaluate the loss at the current contents of `blocks`;
// `analytic` holds d(loss)/d(block) in matching order.
GradCheckReport finite_diff_check_blocks(
    const std::function<double()>& loss_value,
    const std::vector<std::vector<double>*>& blocks,
    const std::vector<std::vector<double>>& analytic, double eps = 1e-5);

double rel_err(double a, double b);

}  // namespace spt
