#include "spt/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace spt {

double rel_err(double a, double b) {
  // Floor keeps central-difference noise (~1e-11 on O(1) losses) from
  // registering as error when the true gradient is zero.
  const double denom = std::max(1e-4, std::max(std::fabs(a), std::fabs(b)));
  return std::fabs(a - b) / denom;
}

GradCheckReport finite_diff_check(const LossBuilder& f, const ad::Shape& shape,
                                  std::span<const double> x0, double eps) {
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> analytic;
  {
    ad::Tape tape;
    ad::Tensor leaf = tape.leaf(shape, x, true);
    ad::Tensor loss = f(tape, leaf);
    tape.backward(loss);
    analytic = tape.grad(leaf);
  }
  auto eval = [&](const std::vector<double>& xs) {
    ad::Tape tape;
    ad::Tensor leaf = tape.leaf(shape, xs, false);
    return f(tape, leaf).values()[0];
  };
  GradCheckReport rep;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = eps * std::max(1.0, std::fabs(x[i]));
    const double keep = x[i];
    x[i] = keep + h;
    const double up = eval(x);
    x[i] = keep - h;
    const double dn = eval(x);
    x[i] = keep;
    const double fd = (up - dn) / (2.0 * h);
    const double e = rel_err(analytic[i], fd);
    if (e > rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst_index = static_cast<int>(i);
      rep.analytic = analytic[i];
      rep.numeric = fd;
    }
  }
  return rep;
}

GradCheckReport finite_diff_check_blocks(
    const std::function<double()>& loss_value,
    const std::vector<std::vector<double>*>& blocks,
    const std::vector<std::vector<double>>& analytic, double eps) {
  if (blocks.size() != analytic.size())
    throw std::invalid_argument("finite_diff_check_blocks: block/gradient count mismatch");
  GradCheckReport rep;
  int flat = 0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    std::vector<double>& x = *blocks[b];
    if (x.size() != analytic[b].size())
      throw std::invalid_argument("finite_diff_check_blocks: gradient size mismatch in block " + std::to_string(b));
    for (std::size_t i = 0; i < x.size(); ++i, ++flat) {
      const double keep = x[i];
      const double h = eps * std::max(1.0, std::fabs(keep));
      x[i] = keep + h;
      const double up = loss_value();
      x[i] = keep - h;
      const double dn = loss_value();
      x[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double e = rel_err(analytic[b][i], fd);
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst_index = flat;
        rep.analytic = analytic[b][i];
        rep.numeric = fd;
      }
    }
  }
  return rep;
}

}  // namespace spt
