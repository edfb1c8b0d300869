#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "spt/gradcheck.hpp"
#include "spt/prompt_gen.hpp"

using namespace spt;
using ad::Tape;
using ad::Tensor;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

PromptGenerator make_gen(ParamStore& store, int d, int m, int n, int l, const std::string& act,
                         std::uint64_t seed) {
  PromptGenerator pg = PromptGenerator::create(store, "pg", d, m, n, l, act);
  std::mt19937_64 rng(seed);
  pg.init(rng);
  return pg;
}

}  // namespace

TEST_CASE("pooling segments differ by at most one, extras first") {
  CHECK(pooling_segments(10, 4) == std::vector<int>{3, 3, 2, 2});
  CHECK(pooling_segments(8, 4) == std::vector<int>{2, 2, 2, 2});
  CHECK(pooling_segments(7, 3) == std::vector<int>{3, 2, 2});
  CHECK(pooling_segments(4, 4) == std::vector<int>{1, 1, 1, 1});
  CHECK(pooling_segments(5, 1) == std::vector<int>{5});
  CHECK_THROWS_AS(pooling_segments(3, 4), std::invalid_argument);
}

TEST_CASE("output shape is prompt_len x d_model for long and short inputs") {
  ParamStore store;
  PromptGenerator pg = make_gen(store, 8, 4, 2, 3, "tanh", 5);
  Tape t;
  Leases lease(t);
  Tensor y_long = pg.generate(t, lease, t.leaf({10, 8}, randv(80, 6), false));
  CHECK(y_long.rows() == 3);
  CHECK(y_long.cols() == 8);
  // One row: the repeat path must still produce all three slots.
  Tensor y_short = pg.generate(t, lease, t.leaf({1, 8}, randv(8, 7), false));
  CHECK(y_short.rows() == 3);
  CHECK(y_short.cols() == 8);
}

TEST_CASE("short inputs repeat the final row before pooling") {
  ParamStore store;
  PromptGenerator pg = make_gen(store, 8, 4, 2, 4, "identity", 9);
  Tape t;
  Leases lease(t);
  // With one input row every segment pools the same repeated row, so all
  // four output rows must be identical.
  Tensor y = pg.generate(t, lease, t.leaf({1, 8}, randv(8, 10), false));
  std::vector<double> v = y.values();
  for (int r = 1; r < 4; ++r)
    for (int c = 0; c < 8; ++c) CHECK(v[static_cast<std::size_t>(r) * 8 + c] == doctest::Approx(v[c]));
}

TEST_CASE("constant input rows give constant prompt rows") {
  ParamStore store;
  PromptGenerator pg = make_gen(store, 8, 4, 2, 3, "tanh", 11);
  std::vector<double> row = randv(8, 12);
  std::vector<double> x(9 * 8);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 8; ++c) x[static_cast<std::size_t>(r) * 8 + c] = row[static_cast<std::size_t>(c)];
  Tape t;
  Leases lease(t);
  std::vector<double> y = pg.generate(t, lease, t.leaf({9, 8}, x, false)).values();
  // Identical rows pool to the same mean in every segment.
  for (int r = 1; r < 3; ++r)
    for (int c = 0; c < 8; ++c) CHECK(y[static_cast<std::size_t>(r) * 8 + c] == doctest::Approx(y[c]));
}

TEST_CASE("pooling means are exact for the identity activation") {
  // m = d and phm factors set so down = identity, up = identity: the output
  // is then exactly the segment means of the input.
  ParamStore store;
  PromptGenerator pg = PromptGenerator::create(store, "pg", 4, 4, 2, 2, "identity");
  auto set_identity = [](PhmLinear& phm) {
    // kron(I_2, I_2) = I_4 from the first factor pair; zero the second.
    phm.a[0]->value = {1, 0, 0, 1};
    phm.b[0]->value = {1, 0, 0, 1};
    phm.a[1]->value = {0, 0, 0, 0};
    phm.b[1]->value = {0, 0, 0, 0};
  };
  set_identity(pg.down);
  set_identity(pg.up);
  std::vector<double> x = {1, 2, 3, 4,  5, 6, 7, 8,  9, 10, 11, 12};
  Tape t;
  Leases lease(t);
  std::vector<double> y = pg.generate(t, lease, t.leaf({3, 4}, x, false)).values();
  // Segments for t=3, l=2 are {2, 1}: first row mean of rows 0..1, second row 2.
  std::vector<double> want = {3, 4, 5, 6, 9, 10, 11, 12};
  REQUIRE(y.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(y[i] == doctest::Approx(want[i]));
}

TEST_CASE("finite differences through the whole generator") {
  for (const std::string& act : {"tanh", "relu", "identity"}) {
    ParamStore store;
    PromptGenerator pg = make_gen(store, 6, 4, 2, 2, act, 21);
    std::vector<double> x = randv(5 * 6, 22);

    LossBuilder f = [&](Tape& t, Tensor leaf) {
      Leases lease(t, [](const Parameter&) { return false; });
      Tensor y = pg.generate(t, lease, leaf);
      return t.sum_all(t.mul(y, y));
    };
    GradCheckReport rx = finite_diff_check(f, {5, 6}, x);
    CAPTURE(act);
    CHECK(rx.max_rel_err < 1e-5);

    auto loss_value = [&] {
      Tape t;
      Leases lease(t, [](const Parameter&) { return false; });
      Tensor y = pg.generate(t, lease, t.leaf({5, 6}, x, false));
      return t.sum_all(t.mul(y, y)).values()[0];
    };
    Tape t;
    Leases lease(t);
    Tensor y = pg.generate(t, lease, t.leaf({5, 6}, x, false));
    t.backward(t.sum_all(t.mul(y, y)));
    std::vector<std::vector<double>*> blocks;
    std::vector<std::vector<double>> analytic;
    for (Parameter* p : store.all()) {
      blocks.push_back(&p->value);
      analytic.push_back(t.grad(lease.of(*p)));
    }
    GradCheckReport rep = finite_diff_check_blocks(loss_value, blocks, analytic);
    CAPTURE(act);
    CAPTURE(rep.worst_index);
    CHECK(rep.max_rel_err < 1e-5);
  }
}

TEST_CASE("short-input repeat path carries gradients too") {
  ParamStore store;
  PromptGenerator pg = make_gen(store, 6, 4, 2, 4, "tanh", 31);
  std::vector<double> x = randv(2 * 6, 33);  // 2 rows < 4 slots
  LossBuilder f = [&](Tape& t, Tensor leaf) {
    Leases lease(t, [](const Parameter&) { return false; });
    Tensor y = pg.generate(t, lease, leaf);
    return t.sum_all(t.mul(y, y));
  };
  GradCheckReport rx = finite_diff_check(f, {2, 6}, x);
  CHECK(rx.max_rel_err < 1e-5);
}
