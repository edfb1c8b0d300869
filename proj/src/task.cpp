#include "spt/task.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace spt {

namespace {

constexpr int kSpanLen = 5;   // odd, so the majority group is never tied
constexpr int kFillerMin = 1;
constexpr int kFillerMax = 3;

int task_index(const std::string& name) {
  const char* names[] = {"alpha", "beta", "gamma", "delta"};
  for (int i = 0; i < 4; ++i)
    if (name == names[i]) return i;
  throw std::invalid_argument("unknown task name '" + name + "' (alpha|beta|gamma|delta)");
}

// One sequence with the given key; returns the majority-group bit.
std::vector<int> draw_sequence(std::mt19937_64& rng, int key, int* majority) {
  std::uniform_int_distribution<int> sym(0, 15);
  std::uniform_int_distribution<int> fill(0, 15);
  std::uniform_int_distribution<int> nf(kFillerMin, kFillerMax);
  std::vector<int> t{key, TokenIds::open};
  int ones = 0;
  for (int i = 0; i < kSpanLen; ++i) {
    const int s = sym(rng);  // 0..7 lands in group0, 8..15 in group1
    ones += s >= 8 ? 1 : 0;
    t.push_back(TokenIds::group0 + s);
  }
  t.push_back(TokenIds::close);
  const int f = nf(rng);
  for (int i = 0; i < f; ++i) t.push_back(TokenIds::filler + fill(rng));
  t.push_back(TokenIds::mask);
  *majority = ones > kSpanLen / 2 ? 1 : 0;
  return t;
}

// Fills a split with exactly balanced labels, rejecting duplicates across
// all splits generated so far.
std::vector<Sample> fill_split(std::mt19937_64& rng, int size, int plain_key, int flip_key,
                               std::set<std::vector<int>>& seen) {
  std::vector<Sample> out;
  int want[2] = {size - size / 2, size / 2};
  std::bernoulli_distribution coin(0.5);
  long attempts = 0;
  while (static_cast<int>(out.size()) < size) {
    if (++attempts > 1000L * size)
      throw std::runtime_error("task generation stalled; key space too small for requested sizes");
    const bool flip = coin(rng);
    int majority = 0;
    std::vector<int> toks = draw_sequence(rng, flip ? flip_key : plain_key, &majority);
    const int label = flip ? 1 - majority : majority;
    if (want[label] == 0 || seen.count(toks)) continue;
    --want[label];
    seen.insert(toks);
    out.push_back({std::move(toks), label});
  }
  return out;
}

}  // namespace

TaskData make_task(const RunConfig& cfg, const RngPool& rng) {
  cfg.validate();
  const int longest = 3 + kSpanLen + kFillerMax;  // key/open/close/mask + span + filler
  if (cfg.max_len < cfg.prompt_len + longest + 1)
    throw std::invalid_argument("config error at 'backbone.max_len': sequences need " +
                                std::to_string(cfg.prompt_len + longest + 1) + " positions");
  const int idx = task_index(cfg.task_name);
  const int plain_key = TokenIds::keys_plain + idx;
  const int flip_key = TokenIds::keys_flip + idx;

  TaskData task;
  task.name = cfg.task_name;
  task.window = cfg.window_blocks();
  std::set<std::vector<int>> seen;
  std::mt19937_64 r_train = rng.stream("task." + cfg.task_name + ".train");
  std::mt19937_64 r_dev = rng.stream("task." + cfg.task_name + ".dev");
  std::mt19937_64 r_test = rng.stream("task." + cfg.task_name + ".test");
  task.train = fill_split(r_train, cfg.train_size, plain_key, flip_key, seen);
  task.dev = fill_split(r_dev, cfg.dev_size, plain_key, flip_key, seen);
  task.test = fill_split(r_test, cfg.test_size, plain_key, flip_key, seen);
  return task;
}

std::vector<Sample> make_pretrain_corpus(const RunConfig& cfg, const RngPool& rng) {
  std::mt19937_64 r = rng.stream("pretrain.data");
  // Keys 44..47 stay clear of every downstream task's keys, so the corpus
  // teaches the majority rule with no key dependence at all.
  std::uniform_int_distribution<int> key(TokenIds::keys_plain + 4, TokenIds::keys_plain + 7);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(cfg.pretrain_corpus));
  for (int i = 0; i < cfg.pretrain_corpus; ++i) {
    int majority = 0;
    std::vector<int> toks = draw_sequence(r, key(r), &majority);
    out.push_back({std::move(toks), majority});
  }
  return out;
}

void save_samples(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const Sample& s : samples)
    f << nlohmann::json{{"tokens", s.tokens}, {"label", s.label}}.dump() << "\n";
}

std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back({j.at("tokens").get<std::vector<int>>(), j.at("label").get<int>()});
  }
  return out;
}

double label_balance(const std::vector<Sample>& samples, int labels) {
  if (samples.empty() || labels <= 0) return 0.0;
  std::vector<int> counts(static_cast<std::size_t>(labels), 0);
  for (const Sample& s : samples) {
    if (s.label < 0 || s.label >= labels)
      throw std::out_of_range("label " + std::to_string(s.label) + " outside 0.." + std::to_string(labels - 1));
    ++counts[static_cast<std::size_t>(s.label)];
  }
  int m = 0;
  for (int c : counts) m = std::max(m, c);
  return static_cast<double>(m) / static_cast<double>(samples.size());
}

}  // namespace spt
