#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spt/config.hpp"
#include "spt/params.hpp"
#include "spt/rng.hpp"

using namespace spt;

namespace {

std::string tmp_stem(const std::string& tag) {
  return (std::filesystem::temp_directory_path() / ("spt_test_" + tag)).string();
}

}  // namespace

TEST_CASE("parameter store keeps names, shapes and the trainable partition") {
  ParamStore store;
  Parameter& w = store.add("w", {2, 3});
  Parameter& b = store.add("b", {3, 1});
  store.add("frozen", {1, 1}, false);
  CHECK(w.size() == 6);
  CHECK(b.size() == 3);
  CHECK(store.has("w"));
  CHECK_FALSE(store.has("nope"));
  CHECK(store.total_count() == 10);
  CHECK(store.trainable_count() == 9);
  CHECK(store.trainable().size() == 2);
  CHECK_THROWS_AS(store.add("w", {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(store.at("nope"), std::out_of_range);

  store.freeze_all();
  CHECK(store.trainable_count() == 0);
  for (Parameter* p : store.all()) CHECK_FALSE(p->trainable);
}

TEST_CASE("snapshot concatenates every buffer in registration order") {
  ParamStore store;
  store.add("a", {2, 1}).value = {1.0, 2.0};
  store.add("b", {1, 1}).value = {3.0};
  std::vector<double> snap = store.snapshot();
  CHECK(snap == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("archive round trip restores values byte for byte") {
  RngPool pool(11);
  ParamStore store;
  std::mt19937_64 rng = pool.stream("init");
  store.fill_normal(store.add("emb", {5, 3}), rng, 0.1);
  store.fill_glorot(store.add("w", {4, 4}), rng);
  store.add("flags", {2, 1}, false).value = {0.25, -7.5};

  const std::string stem = tmp_stem("archive");
  CHECK_FALSE(archive_exists(stem));
  save_archive(store, stem, "deadbeef00112233");
  CHECK(archive_exists(stem));

  ParamStore other;
  other.add("emb", {5, 3});
  other.add("w", {4, 4});
  other.add("flags", {2, 1}, false);
  std::string hash = load_archive(other, stem);
  CHECK(hash == "deadbeef00112233");
  for (const Parameter* p : std::as_const(store).all()) {
    const Parameter& q = std::as_const(other).at(p->name);
    REQUIRE(q.value.size() == p->value.size());
    CHECK(std::memcmp(q.value.data(), p->value.data(), sizeof(double) * p->value.size()) == 0);
  }

  // Shape drift between writer and reader must be refused, not misread.
  ParamStore wrong;
  wrong.add("emb", {5, 3});
  wrong.add("w", {2, 8});
  wrong.add("flags", {2, 1}, false);
  CHECK_THROWS(load_archive(wrong, stem));

  std::remove((stem + ".bin").c_str());
  std::remove((stem + ".json").c_str());
}

TEST_CASE("glorot fill scales like sqrt(2 / (fan_in + fan_out))") {
  ParamStore store;
  Parameter& w = store.add("w", {64, 32});
  std::mt19937_64 rng(5);
  store.fill_glorot(w, rng);
  const double want_sd = std::sqrt(2.0 / (64 + 32));
  double sum = 0.0, sq = 0.0;
  for (double v : w.value) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(w.size());
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::fabs(mean) < 0.05);
  CHECK(sd == doctest::Approx(want_sd).epsilon(0.15));
}

TEST_CASE("named rng streams are deterministic and independent") {
  RngPool a(42), b(42), c(43);
  CHECK(a.stream_id("masks") == b.stream_id("masks"));
  CHECK(a.stream_id("masks") != a.stream_id("splits"));
  CHECK(a.stream_id("masks") != c.stream_id("masks"));
  std::mt19937_64 s1 = a.stream("masks"), s2 = b.stream("masks");
  for (int i = 0; i < 8; ++i) CHECK(s1() == s2());
}

TEST_CASE("config canonical text is sorted and hash-stable") {
  RunConfig cfg;
  std::string canon = cfg.canonical();
  CHECK(canon.find("backbone.layers = 6") != std::string::npos);
  CHECK(canon.find("gates.tau = 0.5") != std::string::npos);
  CHECK(canon.find("gates.reparam = on") != std::string::npos);
  // Sorted sections.
  CHECK(canon.find("backbone.") < canon.find("consistency."));
  CHECK(canon.find("consistency.") < canon.find("optim."));
  CHECK(canon.find("optim.") < canon.find("task."));

  RunConfig same;
  CHECK(cfg.config_hash() == same.config_hash());
  CHECK(cfg.config_hash().size() == 16);

  RunConfig other;
  other.tau = 0.25;
  CHECK(cfg.config_hash() != other.config_hash());
}

TEST_CASE("overrides hit single keys and reject unknown or malformed input") {
  RunConfig cfg;
  apply_override(cfg, "optim.lr=0.01");
  CHECK(cfg.lr == doctest::Approx(0.01));
  apply_override(cfg, "gates.reparam=false");
  CHECK_FALSE(cfg.reparam);
  apply_override(cfg, "task.name = gamma");
  CHECK(cfg.task_name == "gamma");
  apply_override(cfg, "prompt.activation=relu");
  CHECK(cfg.prompt_act == "relu");
  CHECK_THROWS_AS(apply_override(cfg, "optim.does_not_exist=1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(cfg, "no_equals_sign"), std::invalid_argument);
  CHECK_THROWS_AS(apply_key(cfg, "backbone.layers", "not_a_number"), std::invalid_argument);
}

TEST_CASE("config file round trip preserves every field") {
  RunConfig cfg;
  cfg.layers = 4;
  cfg.d_model = 16;
  cfg.lambda_c = 0.25;
  cfg.task_window = "2,3";
  cfg.task_name = "beta";
  const std::string path = tmp_stem("config") + ".cfg";
  save_config_file(cfg, path);
  RunConfig back = load_config_file(path);
  CHECK(back.canonical() == cfg.canonical());
  CHECK(back.config_hash() == cfg.config_hash());
  std::remove(path.c_str());
  CHECK_THROWS(load_config_file(path + ".missing"));
}

TEST_CASE("validation pins the documented ranges") {
  RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  RunConfig bad = cfg;
  bad.phm_n = 3;  // must divide both d_model and bottleneck
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.mask_keep = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.top_k = bad.layers + 2;  // more points than exist
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.lambda_c = -0.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.train_size = bad.batch - 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.prompt_act = "gelu";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.task_window = "2,99";  // block outside 0..layers-1
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("visibility window strings resolve to zero-based block lists") {
  RunConfig cfg;
  cfg.layers = 6;
  cfg.task_window = "all";
  CHECK(cfg.window_blocks() == std::vector<int>{0, 1, 2, 3, 4, 5});
  cfg.task_window = "upper_half";
  CHECK(cfg.window_blocks() == std::vector<int>{3, 4, 5});
  cfg.task_window = "lower_half";
  CHECK(cfg.window_blocks() == std::vector<int>{0, 1, 2});
  cfg.task_window = "5,2";
  CHECK(cfg.window_blocks() == std::vector<int>{2, 5});  // sorted
  cfg.task_window = "oops";
  CHECK_THROWS_AS(cfg.window_blocks(), std::invalid_argument);
}
