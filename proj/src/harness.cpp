#include "spt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "spt/optim.hpp"

namespace spt {

std::vector<int> select_top_k(const std::vector<double>& gate_values, int k) {
  const int n = static_cast<int>(gate_values.size());
  if (k < 1 || k > n)
    throw std::invalid_argument("top-k: k=" + std::to_string(k) + " outside 1.." + std::to_string(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (gate_values[static_cast<std::size_t>(a)] != gate_values[static_cast<std::size_t>(b)])
      return gate_values[static_cast<std::size_t>(a)] > gate_values[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> chosen(order.begin(), order.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

void save_architecture(const LearnedArchitecture& arch, const std::string& path) {
  nlohmann::json j{{"chosen_layers", arch.chosen_layers},
                   {"gate_values", arch.gate_values},
                   {"task", arch.task},
                   {"seed", arch.seed},
                   {"config_hash", arch.config_hash}};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

LearnedArchitecture load_architecture(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  LearnedArchitecture a;
  a.chosen_layers = j.at("chosen_layers").get<std::vector<int>>();
  a.gate_values = j.at("gate_values").get<std::vector<double>>();
  a.task = j.at("task").get<std::string>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.config_hash = j.at("config_hash").get<std::string>();
  return a;
}

FinalModel FinalModel::create(const RunConfig& cfg, std::vector<int> chosen) {
  cfg.validate();
  std::sort(chosen.begin(), chosen.end());
  if (chosen.empty() || std::adjacent_find(chosen.begin(), chosen.end()) != chosen.end())
    throw std::invalid_argument("chosen layers must be non-empty and distinct");
  if (chosen.front() < 0 || chosen.back() > cfg.layers)
    throw std::invalid_argument("chosen layer outside 0.." + std::to_string(cfg.layers));
  FinalModel fm;
  fm.cfg_ = cfg;
  fm.chosen_ = std::move(chosen);
  for (int p : fm.chosen_)
    fm.gens_.push_back(PromptGenerator::create(fm.store_, "fg" + std::to_string(p), cfg.d_model,
                                               cfg.bottleneck, cfg.phm_n, cfg.prompt_len,
                                               cfg.prompt_act));
  return fm;
}

void FinalModel::init(RngPool& pool) {
  for (std::size_t i = 0; i < gens_.size(); ++i) {
    std::mt19937_64 rng = pool.stream("init.fg" + std::to_string(chosen_[i]));
    gens_[i].init(rng);
  }
}

Backbone::Injector FinalModel::injector(ad::Tape& tape, Leases& lease) const {
  ad::Tape* tp = &tape;
  Leases* ls = &lease;
  return [this, tp, ls](int layer, ad::Tensor token_h,
                        ad::Tensor slots) -> std::optional<Backbone::Injection> {
    auto it = std::lower_bound(chosen_.begin(), chosen_.end(), layer);
    if (it == chosen_.end() || *it != layer) return std::nullopt;
    const PromptGenerator& gen = gens_[static_cast<std::size_t>(it - chosen_.begin())];
    ad::Tensor fresh = gen.generate(*tp, *ls, token_h);
    ad::Tensor c = tp->scalar(cfg_.tau);
    ad::Tensor mixed = tp->add(tp->mul(slots, tp->sub(tp->scalar(1.0), c)), tp->mul(fresh, c));
    return Backbone::Injection{mixed, true};
  };
}

double accuracy(const Backbone& bb, const FinalModel* fm, std::span<const Sample> data,
                std::span<const int> window) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  int hits = 0;
  for (const Sample& s : data) {
    ad::Tape tape;
    Leases lease(tape, [](const Parameter&) { return false; });
    Backbone::Injector inj = fm ? fm->injector(tape, lease) : Backbone::Injector{};
    Backbone::EncodeOut enc = bb.encode(tape, lease, s.tokens, inj, window);
    const std::vector<double>& lg = enc.logits.values();
    int best = 0;
    for (std::size_t i = 1; i < lg.size(); ++i)
      if (lg[i] > lg[best]) best = static_cast<int>(i);
    hits += best == s.label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

EvalStats eval_stats(const std::vector<double>& xs) {
  EvalStats st;
  st.per_seed = xs;
  if (xs.empty()) return st;
  for (double x : xs) st.mean += x;
  st.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - st.mean) * (x - st.mean);
    st.stdev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return st;
}

namespace {

// One retraining run: fresh generators, task loss only, usual schedule.
FinalModel retrain_once(const Backbone& bb, const std::vector<int>& chosen, const TaskData& task,
                        const RunConfig& cfg, std::uint64_t seed) {
  FinalModel fm = FinalModel::create(cfg, chosen);
  RngPool pool(seed);
  fm.init(pool);
  std::mt19937_64 order_rng = pool.stream("retrain.order");

  AdamW opt(cfg.lr, cfg.weight_decay);
  LrSchedule sched{cfg.lr, cfg.steps, cfg.warmup_frac};
  std::vector<int> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (int step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    Leases lease(tape);
    Backbone::Injector inj = fm.injector(tape, lease);
    std::vector<ad::Tensor> logits;
    std::vector<int> labels;
    for (int i = 0; i < cfg.batch; ++i) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const Sample& s = task.train[static_cast<std::size_t>(order[cursor++])];
      logits.push_back(bb.encode(tape, lease, s.tokens, inj, task.window).logits);
      labels.push_back(s.label);
    }
    ad::Tensor loss = tape.cross_entropy_mean(tape.concat_rows(logits), labels);
    if (!std::isfinite(loss.values()[0]))
      throw std::runtime_error("retraining diverged at step " + std::to_string(step));
    tape.backward(loss);
    opt.step(fm.store().trainable(), tape, lease, sched.at(step));
  }
  return fm;
}

}  // namespace

RetrainOutcome retrain_and_eval(const Backbone& bb, const std::vector<int>& chosen,
                                const TaskData& task, const RunConfig& cfg,
                                std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw std::invalid_argument("retrain: no seeds given");
  std::vector<double> dev, test;
  for (std::uint64_t seed : seeds) {
    FinalModel fm = retrain_once(bb, chosen, task, cfg, seed);
    dev.push_back(accuracy(bb, &fm, task.dev, task.window));
    test.push_back(accuracy(bb, &fm, task.test, task.window));
  }
  return {eval_stats(dev), eval_stats(test)};
}

RetrainOutcome transfer(const Backbone& bb, const LearnedArchitecture& arch,
                        const TaskData& target, const RunConfig& cfg,
                        std::span<const std::uint64_t> seeds) {
  return retrain_and_eval(bb, arch.chosen_layers, target, cfg, seeds);
}

ManualArch manual_strategy(const std::string& kind, const RunConfig& cfg) {
  const int depth = cfg.layers;
  ManualArch arch;
  arch.kind = kind;
  arch.phm_n = 2;
  if (cfg.d_model % arch.phm_n != 0)
    throw std::invalid_argument("manual strategy needs an even model width");

  if (kind == "M0") {
    arch.layers = {depth / 2 + 1};
  } else if (kind == "M1") {
    arch.layers = {depth / 2 + 1, 3 * depth / 4 + 1};
    arch.layers.erase(std::unique(arch.layers.begin(), arch.layers.end()), arch.layers.end());
  } else if (kind.rfind("every_", 0) == 0) {
    int k = 0;
    try {
      k = std::stoi(kind.substr(6));
    } catch (const std::exception&) {
      throw std::invalid_argument("bad placement kind '" + kind + "'");
    }
    if (k < 1 || k >= depth)
      throw std::invalid_argument("every_k stride " + std::to_string(k) + " must be in 1.." +
                                  std::to_string(depth - 1));
    for (int p = 1; p <= depth; p += k) arch.layers.push_back(p);
  } else {
    throw std::invalid_argument("unknown placement kind '" + kind + "' (M0|M1|every_k)");
  }
  for (int p : arch.layers)
    if (p > depth) throw std::invalid_argument("placement exceeds depth");

  // Spend roughly the same tunable budget regardless of how many points the
  // kind uses: scale the bottleneck inversely with the point count, with the
  // every-2 placement as the reference.
  const int c_ref = (depth + 1) / 2;
  const double target = static_cast<double>(cfg.bottleneck) * c_ref /
                        static_cast<double>(arch.layers.size());
  int m = static_cast<int>(std::lround(target / arch.phm_n)) * arch.phm_n;
  arch.bottleneck = std::max(arch.phm_n, m);
  return arch;
}

std::size_t manual_budget(const ManualArch& arch, const RunConfig& cfg) {
  RunConfig c = cfg;
  c.bottleneck = arch.bottleneck;
  c.phm_n = arch.phm_n;
  return FinalModel::create(c, arch.layers).tunable_params();
}

HeatmapCsv export_heatmap(const std::vector<LearnedArchitecture>& archs, int layers) {
  std::ostringstream chosen, gates;
  chosen << "task";
  for (int p = 0; p <= layers; ++p) chosen << "," << p;
  chosen << "\n";
  gates << chosen.str();
  for (const LearnedArchitecture& a : archs) {
    if (!a.gate_values.empty() && static_cast<int>(a.gate_values.size()) != layers + 1)
      throw std::invalid_argument("architecture depth mismatch for task " + a.task);
    chosen << a.task;
    gates << a.task;
    for (int p = 0; p <= layers; ++p) {
      const bool on = std::binary_search(a.chosen_layers.begin(), a.chosen_layers.end(), p);
      chosen << "," << (on ? 1 : 0);
      gates << ",";
      if (static_cast<int>(a.gate_values.size()) == layers + 1)
        gates << a.gate_values[static_cast<std::size_t>(p)];
      else
        gates << (on ? 1 : 0);
    }
    chosen << "\n";
    gates << "\n";
  }
  return {chosen.str(), gates.str()};
}

std::vector<HeatmapRow> parse_heatmap(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::vector<HeatmapRow> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    HeatmapRow row;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, row.task, ',')) throw std::runtime_error("heatmap row without task column");
    while (std::getline(ls, cell, ',')) row.cells.push_back(std::stoi(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace spt
