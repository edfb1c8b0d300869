#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "spt/gradcheck.hpp"
#include "spt/phm.hpp"

using namespace spt;
using ad::Tape;
using ad::Tensor;

namespace {

void fill_rand(ParamStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 0.7);
  for (Parameter* p : store.all())
    for (double& v : p->value) v = d(rng);
}

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Independent oracle: materialize the Kronecker-sum weight with plain loops
// over the raw parameter buffers, then multiply by hand.
std::vector<double> dense_forward(const PhmLinear& phm, const std::vector<double>& x, int rows) {
  const int in = phm.in_dim, out = phm.out_dim, n = phm.n;
  const int rb = in / n, cb = out / n;
  std::vector<double> w(static_cast<std::size_t>(in) * out, 0.0);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q)
        for (int r = 0; r < rb; ++r)
          for (int s = 0; s < cb; ++s)
            w[static_cast<std::size_t>(p * rb + r) * out + q * cb + s] +=
                phm.a[j]->value[static_cast<std::size_t>(p) * n + q] *
                phm.b[j]->value[static_cast<std::size_t>(r) * cb + s];
  std::vector<double> y(static_cast<std::size_t>(rows) * out, 0.0);
  for (int i = 0; i < rows; ++i)
    for (int k = 0; k < in; ++k)
      for (int o = 0; o < out; ++o)
        y[static_cast<std::size_t>(i) * out + o] += x[static_cast<std::size_t>(i) * in + k] * w[static_cast<std::size_t>(k) * out + o];
  return y;
}

}  // namespace

TEST_CASE("parameter count follows n^3 + in*out/n") {
  ParamStore s1;
  PhmLinear p1 = PhmLinear::create(s1, "p", 32, 8, 4);
  CHECK(p1.param_count() == 4 * 4 * 4 + 32 * 8 / 4);  // 128 vs 256 dense
  CHECK(p1.param_count() == 128);
  CHECK(s1.trainable_count() == 128);

  ParamStore s2;
  PhmLinear p2 = PhmLinear::create(s2, "p", 8, 32, 2);
  CHECK(p2.param_count() == 2 * 2 * 2 + 8 * 32 / 2);

  ParamStore s3;
  PhmLinear p3 = PhmLinear::create(s3, "p", 6, 4, 1);  // n=1 is a plain linear map
  CHECK(p3.param_count() == 1 + 24);

  ParamStore s4;
  CHECK_THROWS_AS(PhmLinear::create(s4, "p", 10, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(PhmLinear::create(s4, "q", 8, 6, 4), std::invalid_argument);
}

TEST_CASE("forward matches the loop-built dense weight") {
  ParamStore store;
  PhmLinear phm = PhmLinear::create(store, "p", 8, 6, 2);
  fill_rand(store, 31);
  std::vector<double> x = randv(3 * 8, 32);
  std::vector<double> want = dense_forward(phm, x, 3);

  Tape t;
  Leases lease(t);
  Tensor y = phm.forward(t, lease, t.leaf({3, 8}, x, false));
  REQUIRE(y.rows() == 3);
  REQUIRE(y.cols() == 6);
  std::vector<double> got = y.values();
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("materialized and blockwise forwards agree") {
  ParamStore store;
  PhmLinear phm = PhmLinear::create(store, "p", 12, 8, 4);
  fill_rand(store, 77);
  std::vector<double> x = randv(5 * 12, 78);

  Tape t;
  Leases lease(t);
  Tensor xa = t.leaf({5, 12}, x, false);
  std::vector<double> ya = phm.forward(t, lease, xa).values();
  std::vector<double> yb = phm.forward_blockwise(t, lease, xa).values();
  REQUIRE(ya.size() == yb.size());
  for (std::size_t i = 0; i < ya.size(); ++i) CHECK(std::fabs(ya[i] - yb[i]) < 1e-10);

  CHECK_THROWS_AS(phm.forward(t, lease, t.leaf({2, 7}, randv(14, 1), false)),
                  std::invalid_argument);
}

TEST_CASE("init is near identity/n so the initial map is close to scaled linear") {
  ParamStore store;
  PhmLinear phm = PhmLinear::create(store, "p", 8, 8, 2);
  std::mt19937_64 rng(3);
  phm.init(rng);
  for (int j = 0; j < phm.n; ++j) {
    for (int r = 0; r < phm.n; ++r)
      for (int c = 0; c < phm.n; ++c) {
        const double v = phm.a[j]->value[static_cast<std::size_t>(r) * phm.n + c];
        const double target = r == c ? 1.0 / phm.n : 0.0;
        CHECK(std::fabs(v - target) < 0.2);  // 10 sigma of the 0.02 jitter
      }
    for (double v : phm.b[j]->value) CHECK(std::fabs(v) < 0.2);
  }
}

TEST_CASE("finite differences cover input and both factor families") {
  ParamStore store;
  PhmLinear phm = PhmLinear::create(store, "p", 6, 4, 2);
  fill_rand(store, 9);
  std::vector<double> x = randv(2 * 6, 10);

  // Input gradient through the materialized route.
  LossBuilder f = [&](Tape& t, Tensor leaf) {
    Leases lease(t, [](const Parameter&) { return false; });
    Tensor y = phm.forward(t, lease, leaf);
    return t.sum_all(t.mul(y, y));
  };
  GradCheckReport rx = finite_diff_check(f, {2, 6}, x);
  CAPTURE(rx.analytic);
  CAPTURE(rx.numeric);
  CHECK(rx.max_rel_err < 1e-6);

  // Factor gradients through the blockwise route (the one training uses).
  auto loss_value = [&] {
    Tape t;
    Leases lease(t, [](const Parameter&) { return false; });
    Tensor y = phm.forward_blockwise(t, lease, t.leaf({2, 6}, x, false));
    return t.sum_all(t.mul(y, y)).values()[0];
  };
  Tape t;
  Leases lease(t);
  Tensor y = phm.forward_blockwise(t, lease, t.leaf({2, 6}, x, false));
  t.backward(t.sum_all(t.mul(y, y)));
  std::vector<std::vector<double>*> blocks;
  std::vector<std::vector<double>> analytic;
  for (Parameter* p : store.all()) {
    blocks.push_back(&p->value);
    analytic.push_back(t.grad(lease.of(*p)));
  }
  GradCheckReport rep = finite_diff_check_blocks(loss_value, blocks, analytic);
  CAPTURE(rep.worst_index);
  CAPTURE(rep.analytic);
  CAPTURE(rep.numeric);
  CHECK(rep.max_rel_err < 1e-6);
}
