#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>
#include <vector>

#include "spt/harness.hpp"

using namespace spt;

namespace {

RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.vocab = 64;
  cfg.max_len = 16;
  cfg.prompt_len = 2;
  cfg.bottleneck = 4;
  cfg.phm_n = 2;
  cfg.top_k = 2;
  cfg.task_window = "all";
  cfg.steps = 3;
  cfg.batch = 4;
  cfg.train_size = 16;
  cfg.dev_size = 8;
  cfg.test_size = 8;
  return cfg;
}

Backbone frozen_bb(const RunConfig& cfg, std::uint64_t seed) {
  Backbone bb = Backbone::create(cfg);
  std::mt19937_64 rng = RngPool(seed).stream("init.backbone");
  bb.init(rng);
  bb.store().freeze_all();
  return bb;
}

// Recompute the label from the raw tokens, independently of the generator.
int expected_label(const std::vector<int>& tokens) {
  int ones = 0;
  for (int i = 2; i <= 6; ++i)
    if (tokens[static_cast<std::size_t>(i)] >= TokenIds::group1) ++ones;
  int label = ones > 2 ? 1 : 0;
  const int key = tokens[0];
  if (key >= TokenIds::keys_flip && key < TokenIds::keys_flip + 8) label = 1 - label;
  return label;
}

void check_shape(const Sample& s) {
  REQUIRE(s.tokens.size() >= 10);
  REQUIRE(s.tokens.size() <= 12);
  CHECK(s.tokens[1] == TokenIds::open);
  CHECK(s.tokens[7] == TokenIds::close);
  CHECK(s.tokens.back() == TokenIds::mask);
  for (int i = 2; i <= 6; ++i) {
    CHECK(s.tokens[static_cast<std::size_t>(i)] >= TokenIds::group0);
    CHECK(s.tokens[static_cast<std::size_t>(i)] < TokenIds::group1 + 8);
  }
  for (std::size_t i = 8; i + 1 < s.tokens.size(); ++i) {
    CHECK(s.tokens[i] >= TokenIds::filler);
    CHECK(s.tokens[i] < TokenIds::filler + 16);
  }
}

}  // namespace

TEST_CASE("task sequences follow the keyed-majority layout with exact labels") {
  RunConfig cfg = tiny_cfg();
  RngPool pool(5);
  TaskData task = make_task(cfg, pool);
  CHECK(task.name == "alpha");
  CHECK(task.window == cfg.window_blocks());
  REQUIRE(static_cast<int>(task.train.size()) == cfg.train_size);
  REQUIRE(static_cast<int>(task.dev.size()) == cfg.dev_size);
  REQUIRE(static_cast<int>(task.test.size()) == cfg.test_size);

  for (const std::vector<Sample>* split : {&task.train, &task.dev, &task.test})
    for (const Sample& s : *split) {
      check_shape(s);
      CHECK(s.label == expected_label(s.tokens));
      // Task alpha draws only its own two keys.
      const bool plain = s.tokens[0] == TokenIds::keys_plain;
      const bool flip = s.tokens[0] == TokenIds::keys_flip;
      CHECK((plain || flip));
    }

  // Both key conventions actually show up in force.
  int flips = 0;
  for (const Sample& s : task.train)
    if (s.tokens[0] == TokenIds::keys_flip) ++flips;
  CHECK(flips > cfg.train_size / 4);
  CHECK(flips < 3 * cfg.train_size / 4);
}

TEST_CASE("tasks use disjoint keys and splits are balanced and deduplicated") {
  RunConfig cfg = tiny_cfg();
  cfg.task_name = "beta";
  RngPool pool(6);
  TaskData beta = make_task(cfg, pool);
  for (const Sample& s : beta.train)
    CHECK((s.tokens[0] == TokenIds::keys_plain + 1 || s.tokens[0] == TokenIds::keys_flip + 1));

  CHECK(label_balance(beta.train, cfg.labels) == doctest::Approx(0.5));
  CHECK(label_balance(beta.dev, cfg.labels) == doctest::Approx(0.5));
  CHECK(label_balance(beta.test, cfg.labels) == doctest::Approx(0.5));

  std::set<std::vector<int>> seen;
  for (const std::vector<Sample>* split : {&beta.train, &beta.dev, &beta.test})
    for (const Sample& s : *split) CHECK(seen.insert(s.tokens).second);

  RunConfig bad = cfg;
  bad.task_name = "epsilon";
  CHECK_THROWS_AS(make_task(bad, pool), std::invalid_argument);
}

TEST_CASE("task generation is a pure function of the seed") {
  RunConfig cfg = tiny_cfg();
  TaskData a = make_task(cfg, RngPool(9));
  TaskData b = make_task(cfg, RngPool(9));
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].tokens == b.train[i].tokens);
    CHECK(a.train[i].label == b.train[i].label);
  }
  TaskData c = make_task(cfg, RngPool(10));
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size() && !differs; ++i)
    differs = a.train[i].tokens != c.train[i].tokens;
  CHECK(differs);
}

TEST_CASE("pretraining corpus sticks to reserved plain keys and majority labels") {
  RunConfig cfg = tiny_cfg();
  cfg.pretrain_corpus = 64;
  RngPool pool(7);
  std::vector<Sample> corpus = make_pretrain_corpus(cfg, pool);
  REQUIRE(static_cast<int>(corpus.size()) == cfg.pretrain_corpus);
  for (const Sample& s : corpus) {
    check_shape(s);
    CHECK(s.tokens[0] >= TokenIds::keys_plain + 4);  // downstream tasks use 40..43
    CHECK(s.tokens[0] < TokenIds::keys_plain + 8);
    int ones = 0;
    for (int i = 2; i <= 6; ++i)
      if (s.tokens[static_cast<std::size_t>(i)] >= TokenIds::group1) ++ones;
    CHECK(s.label == (ones > 2 ? 1 : 0));
  }
}

TEST_CASE("sample serialization round-trips exactly") {
  RunConfig cfg = tiny_cfg();
  RngPool pool(8);
  TaskData task = make_task(cfg, pool);
  const std::string path =
      (std::filesystem::temp_directory_path() / "spt_test_samples.jsonl").string();
  save_samples(task.train, path);
  std::vector<Sample> back = load_samples(path);
  REQUIRE(back.size() == task.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].tokens == task.train[i].tokens);
    CHECK(back[i].label == task.train[i].label);
  }
  std::remove(path.c_str());
  CHECK_THROWS(load_samples(path));
}

TEST_CASE("label balance reports the majority share and rejects bad labels") {
  std::vector<Sample> s(3);
  s[0].label = 0;
  s[1].label = 0;
  s[2].label = 1;
  CHECK(label_balance(s, 2) == doctest::Approx(2.0 / 3.0));
  s[2].label = 5;
  CHECK_THROWS_AS(label_balance(s, 2), std::out_of_range);
}

TEST_CASE("top-k selection equals exhaustive subset maximization with ties") {
  // Hand case: the tie at 0.5 goes to the lower index.
  CHECK(select_top_k({0.5, 0.7, 0.5, 0.2}, 2) == std::vector<int>{0, 1});
  CHECK(select_top_k({0.1, 0.2, 0.3}, 3) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(select_top_k({0.5, 0.5}, 0), std::invalid_argument);
  CHECK_THROWS_AS(select_top_k({0.5, 0.5}, 3), std::invalid_argument);

  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> quarter(0, 4);  // coarse grid forces ties
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 3 + static_cast<int>(rng() % 6);  // 3..8
    const int k = 1 + static_cast<int>(rng() % n);
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (double& v : vals) v = 0.25 * quarter(rng);

    // Oracle: enumerate every subset of size k, maximize the sum, break ties
    // by the lexicographically smallest sorted index list.
    std::vector<int> best;
    double best_sum = -1.0;
    for (int bits = 0; bits < (1 << n); ++bits) {
      if (__builtin_popcount(static_cast<unsigned>(bits)) != k) continue;
      std::vector<int> subset;
      double sum = 0.0;
      for (int i = 0; i < n; ++i)
        if (bits & (1 << i)) {
          subset.push_back(i);
          sum += vals[static_cast<std::size_t>(i)];
        }
      if (sum > best_sum + 1e-12 ||
          (std::fabs(sum - best_sum) <= 1e-12 && subset < best)) {
        best_sum = sum;
        best = subset;
      }
    }
    CAPTURE(n);
    CAPTURE(k);
    CHECK(select_top_k(vals, k) == best);
  }
}

TEST_CASE("architecture files round-trip") {
  LearnedArchitecture arch;
  arch.chosen_layers = {0, 2, 3};
  arch.gate_values = {0.9, 0.2, 0.8, 0.7, 0.1};
  arch.task = "gamma";
  arch.seed = 17;
  arch.config_hash = "0123456789abcdef";
  const std::string path =
      (std::filesystem::temp_directory_path() / "spt_test_arch.json").string();
  save_architecture(arch, path);
  LearnedArchitecture back = load_architecture(path);
  CHECK(back.chosen_layers == arch.chosen_layers);
  CHECK(back.gate_values == arch.gate_values);
  CHECK(back.task == arch.task);
  CHECK(back.seed == arch.seed);
  CHECK(back.config_hash == arch.config_hash);
  std::remove(path.c_str());
  CHECK_THROWS(load_architecture(path));
}

TEST_CASE("final model validates its placement and counts its parameters") {
  RunConfig cfg = tiny_cfg();
  FinalModel fm = FinalModel::create(cfg, {2, 0});
  CHECK(fm.chosen() == std::vector<int>{0, 2});  // sorted on entry
  // Two generators, each a down and an up map of n^3 + in*out/n parameters.
  const std::size_t per_gen = 2 * (2 * 2 * 2 + 8 * 4 / 2);
  CHECK(fm.tunable_params() == 2 * per_gen);

  CHECK_THROWS_AS(FinalModel::create(cfg, {}), std::invalid_argument);
  CHECK_THROWS_AS(FinalModel::create(cfg, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(FinalModel::create(cfg, {cfg.layers + 1}), std::invalid_argument);
  CHECK_THROWS_AS(FinalModel::create(cfg, {-1}), std::invalid_argument);
}

TEST_CASE("final model injects only at chosen points with the fixed coefficient") {
  RunConfig cfg = tiny_cfg();
  cfg.tau = 0.5;
  FinalModel fm = FinalModel::create(cfg, {1});
  RngPool pool(21);
  fm.init(pool);

  ad::Tape tape;
  Leases lease(tape);
  Backbone::Injector inj = fm.injector(tape, lease);

  std::mt19937_64 rng(22);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> hv(static_cast<std::size_t>(4) * cfg.d_model);
  std::vector<double> sv(static_cast<std::size_t>(cfg.prompt_len) * cfg.d_model);
  for (double& v : hv) v = d(rng);
  for (double& v : sv) v = d(rng);
  ad::Tensor token_h = tape.constant({4, cfg.d_model}, hv);
  ad::Tensor slots = tape.constant({cfg.prompt_len, cfg.d_model}, sv);

  CHECK_FALSE(inj(0, token_h, slots).has_value());
  CHECK_FALSE(inj(2, token_h, slots).has_value());
  auto out = inj(1, token_h, slots);
  REQUIRE(out.has_value());
  CHECK(out->live);
  // Same subnetwork, same lease: recomputing the fresh block is exact.
  ParamStore& store = fm.store();
  REQUIRE(store.has("fg1.down.a0"));
  std::vector<double> fresh;
  {
    PromptGenerator probe = PromptGenerator::create(
        fm.store(), "probe", cfg.d_model, cfg.bottleneck, cfg.phm_n, cfg.prompt_len, cfg.prompt_act);
    for (int j = 0; j < cfg.phm_n; ++j) {
      probe.down.a[static_cast<std::size_t>(j)]->value = store.at("fg1.down.a" + std::to_string(j)).value;
      probe.down.b[static_cast<std::size_t>(j)]->value = store.at("fg1.down.b" + std::to_string(j)).value;
      probe.up.a[static_cast<std::size_t>(j)]->value = store.at("fg1.up.a" + std::to_string(j)).value;
      probe.up.b[static_cast<std::size_t>(j)]->value = store.at("fg1.up.b" + std::to_string(j)).value;
    }
    fresh = probe.generate(tape, lease, token_h).values();
  }
  std::vector<double> mixed = out->slots.values();
  for (std::size_t i = 0; i < mixed.size(); ++i)
    CHECK(mixed[i] == doctest::Approx(0.5 * sv[i] + 0.5 * fresh[i]).epsilon(1e-12));
}

TEST_CASE("eval stats use the sample standard deviation") {
  EvalStats st = eval_stats({0.5, 0.7});
  CHECK(st.mean == doctest::Approx(0.6));
  CHECK(st.stdev == doctest::Approx(std::sqrt(0.02)));
  CHECK(st.per_seed == std::vector<double>{0.5, 0.7});
  EvalStats one = eval_stats({0.4});
  CHECK(one.mean == doctest::Approx(0.4));
  CHECK(one.stdev == 0.0);
  EvalStats none = eval_stats({});
  CHECK(none.mean == 0.0);
}

TEST_CASE("accuracy is deterministic and bounded") {
  RunConfig cfg = tiny_cfg();
  Backbone bb = frozen_bb(cfg, 31);
  RngPool pool(31);
  TaskData task = make_task(cfg, pool);
  double a1 = accuracy(bb, nullptr, task.dev, task.window);
  double a2 = accuracy(bb, nullptr, task.dev, task.window);
  CHECK(a1 == a2);
  CHECK(a1 >= 0.0);
  CHECK(a1 <= 1.0);
  CHECK_THROWS_AS(accuracy(bb, nullptr, std::span<const Sample>{}, task.window),
                  std::invalid_argument);
}

TEST_CASE("retraining evaluates per seed and transfer on the source task is retraining") {
  RunConfig cfg = tiny_cfg();
  Backbone bb = frozen_bb(cfg, 33);
  RngPool pool(33);
  TaskData task = make_task(cfg, pool);
  std::vector<std::uint64_t> seeds = {1, 2};

  RetrainOutcome a = retrain_and_eval(bb, {0, 1}, task, cfg, seeds);
  REQUIRE(a.dev.per_seed.size() == 2);
  REQUIRE(a.test.per_seed.size() == 2);
  for (double v : a.dev.per_seed) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  RetrainOutcome b = retrain_and_eval(bb, {0, 1}, task, cfg, seeds);
  CHECK(a.dev.per_seed == b.dev.per_seed);  // same seeds, same numbers
  CHECK(a.test.per_seed == b.test.per_seed);

  LearnedArchitecture arch;
  arch.chosen_layers = {0, 1};
  arch.task = task.name;
  RetrainOutcome c = transfer(bb, arch, task, cfg, seeds);
  CHECK(c.dev.per_seed == a.dev.per_seed);
  CHECK(c.test.per_seed == a.test.per_seed);

  CHECK_THROWS_AS(retrain_and_eval(bb, {0, 1}, task, cfg, {}), std::invalid_argument);
}

TEST_CASE("manual placements land on the documented points") {
  RunConfig cfg;  // default depth 6, width 32
  CHECK(manual_strategy("M0", cfg).layers == std::vector<int>{4});
  CHECK(manual_strategy("M1", cfg).layers == std::vector<int>{4, 5});
  CHECK(manual_strategy("every_2", cfg).layers == std::vector<int>{1, 3, 5});

  RunConfig deep = cfg;
  deep.layers = 24;
  CHECK(manual_strategy("M0", deep).layers == std::vector<int>{13});
  CHECK(manual_strategy("M1", deep).layers == std::vector<int>{13, 19});

  RunConfig eight = cfg;
  eight.layers = 8;
  CHECK(manual_strategy("every_4", eight).layers == std::vector<int>{1, 5});

  RunConfig two = cfg;
  two.layers = 2;
  CHECK(manual_strategy("M1", two).layers == std::vector<int>{2});  // collapsed duplicate

  CHECK_THROWS_AS(manual_strategy("every_0", cfg), std::invalid_argument);
  CHECK_THROWS_AS(manual_strategy("every_6", cfg), std::invalid_argument);
  CHECK_THROWS_AS(manual_strategy("bogus", cfg), std::invalid_argument);
}

TEST_CASE("manual budgets stay within fifteen percent of the reference") {
  RunConfig cfg;  // width 32, bottleneck 8, depth 6
  const std::vector<std::string> kinds = {"M0", "M1", "every_1", "every_2", "every_3", "every_4"};
  const std::size_t ref = manual_budget(manual_strategy("every_2", cfg), cfg);
  CHECK(ref == 816);
  for (const std::string& kind : kinds) {
    ManualArch arch = manual_strategy(kind, cfg);
    const std::size_t budget = manual_budget(arch, cfg);
    CAPTURE(kind);
    CAPTURE(budget);
    CHECK(static_cast<double>(budget) > 0.85 * static_cast<double>(ref));
    CHECK(static_cast<double>(budget) < 1.15 * static_cast<double>(ref));
  }
  CHECK(manual_budget(manual_strategy("M0", cfg), cfg) == 784);
  CHECK(manual_budget(manual_strategy("every_1", cfg), cfg) == 864);
}

TEST_CASE("heatmap export writes aligned grids and parses back") {
  LearnedArchitecture a;
  a.task = "alpha";
  a.chosen_layers = {0, 2};
  a.gate_values = {0.9, 0.1, 0.8, 0.2, 0.3};
  LearnedArchitecture b;
  b.task = "beta";
  b.chosen_layers = {3, 4};
  b.gate_values = {0.2, 0.3, 0.1, 0.9, 0.7};

  HeatmapCsv csv = export_heatmap({a, b}, 4);
  CHECK(csv.chosen.rfind("task,0,1,2,3,4\n", 0) == 0);
  CHECK(csv.chosen.find("alpha,1,0,1,0,0") != std::string::npos);
  CHECK(csv.chosen.find("beta,0,0,0,1,1") != std::string::npos);
  CHECK(csv.gates.find("alpha,0.9,0.1,0.8,0.2,0.3") != std::string::npos);

  std::vector<HeatmapRow> rows = parse_heatmap(csv.chosen);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].task == "alpha");
  CHECK(rows[0].cells == std::vector<int>{1, 0, 1, 0, 0});
  CHECK(rows[1].task == "beta");
  CHECK(rows[1].cells == std::vector<int>{0, 0, 0, 1, 1});

  LearnedArchitecture bad = a;
  bad.gate_values = {0.5, 0.5};  // depth mismatch
  CHECK_THROWS_AS(export_heatmap({bad}, 4), std::invalid_argument);
}
