#include "spt/phm.hpp"

#include <stdexcept>

namespace spt {

PhmLinear PhmLinear::create(ParamStore& store, const std::string& name, int in_dim, int out_dim, int n) {
  if (n < 1 || in_dim % n != 0 || out_dim % n != 0)
    throw std::invalid_argument("PhmLinear " + name + ": n=" + std::to_string(n) +
                                " must divide in_dim=" + std::to_string(in_dim) +
                                " and out_dim=" + std::to_string(out_dim));
  PhmLinear phm;
  phm.in_dim = in_dim;
  phm.out_dim = out_dim;
  phm.n = n;
  for (int j = 0; j < n; ++j) {
    phm.a.push_back(&store.add(name + ".a" + std::to_string(j), {n, n}));
    phm.b.push_back(&store.add(name + ".b" + std::to_string(j), {in_dim / n, out_dim / n}));
  }
  return phm;
}

void PhmLinear::init(std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int j = 0; j < n; ++j) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        a[j]->value[static_cast<std::size_t>(r) * n + c] = (r == c ? 1.0 / n : 0.0) + noise(rng);
    for (double& v : b[j]->value) v = noise(rng);
  }
}

std::size_t PhmLinear::param_count() const {
  std::size_t total = 0;
  for (int j = 0; j < n; ++j) total += a[j]->size() + b[j]->size();
  return total;  // == n^3 + in*out/n
}

ad::Tensor PhmLinear::weight(ad::Tape& tape, Leases& lease) const {
  ad::Tensor w = tape.kron(lease.of(*a[0]), lease.of(*b[0]));
  for (int j = 1; j < n; ++j) w = tape.add(w, tape.kron(lease.of(*a[j]), lease.of(*b[j])));
  return w;
}

ad::Tensor PhmLinear::forward(ad::Tape& tape, Leases& lease, ad::Tensor x) const {
  if (x.cols() != in_dim)
    throw std::invalid_argument("PhmLinear: input has " + std::to_string(x.cols()) +
                                " columns, expected " + std::to_string(in_dim));
  return tape.matmul(x, weight(tape, lease));
}

ad::Tensor PhmLinear::forward_blockwise(ad::Tape& tape, Leases& lease, ad::Tensor x) const {
  if (x.cols() != in_dim)
    throw std::invalid_argument("PhmLinear: input has " + std::to_string(x.cols()) +
                                " columns, expected " + std::to_string(in_dim));
  const int p = in_dim / n, q = out_dim / n;
  // x split into n column chunks; output chunk c collects A_j[r,c] * X_r B_j.
  std::vector<ad::Tensor> xs;
  for (int r = 0; r < n; ++r) xs.push_back(tape.slice_cols(x, r * p, (r + 1) * p));
  std::vector<ad::Tensor> out_chunks(n);
  for (int j = 0; j < n; ++j) {
    ad::Tensor aj = lease.of(*a[j]);
    ad::Tensor bj = lease.of(*b[j]);
    for (int r = 0; r < n; ++r) {
      ad::Tensor z = tape.matmul(xs[r], bj);  // rows x q
      for (int c = 0; c < n; ++c) {
        ad::Tensor scale = tape.slice_cols(tape.slice_rows(aj, r, r + 1), c, c + 1);
        ad::Tensor term = tape.mul(z, scale);
        out_chunks[c] = out_chunks[c].valid() ? tape.add(out_chunks[c], term) : term;
      }
    }
  }
  (void)q;
  return tape.concat_cols(out_chunks);
}

}  // namespace spt
