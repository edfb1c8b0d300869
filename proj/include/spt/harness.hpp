#pragma once
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spt/backbone.hpp"
#include "spt/prompt_gen.hpp"
#include "spt/rng.hpp"
#include "spt/task.hpp"

namespace spt {

struct LearnedArchitecture {
  std::vector<int> chosen_layers;   // sorted injection points, exactly K of them
  std::vector<double> gate_values;  // final sigmoid(alpha) per point 0..L
  std::string task;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// Top-K points by gate value; ties go to the lower index. Equals exhaustive
// subset-sum maximization with lexicographic tie-breaking.
std::vector<int> select_top_k(const std::vector<double>& gate_values, int k);

void save_architecture(const LearnedArchitecture& arch, const std::string& path);
LearnedArchitecture load_architecture(const std::string& path);

// The discretized model: fresh generators at the chosen points only, mixing
// with the fixed coefficient tau (gate replaced by 1), pure propagation
// everywhere else. Only the generators are trainable.
class FinalModel {
 public:
  static FinalModel create(const RunConfig& cfg, std::vector<int> chosen);
  void init(RngPool& pool);

  Backbone::Injector injector(ad::Tape& tape, Leases& lease) const;
  std::size_t tunable_params() const { return store_.trainable_count(); }

  ParamStore& store() { return store_; }
  const std::vector<int>& chosen() const { return chosen_; }
  const RunConfig& cfg() const { return cfg_; }

 private:
  RunConfig cfg_;
  std::vector<int> chosen_;
  std::vector<PromptGenerator> gens_;  // parallel to chosen_
  ParamStore store_;
};

double accuracy(const Backbone& bb, const FinalModel* fm, std::span<const Sample> data,
                std::span<const int> window);

struct EvalStats {
  double mean = 0.0, stdev = 0.0;
  std::vector<double> per_seed;
};
EvalStats eval_stats(const std::vector<double>& xs);

struct RetrainOutcome {
  EvalStats dev, test;
};
// Fresh generators at `chosen`, trained on task.train with the usual
// schedule (plain task loss, no gates, no masks), evaluated per seed.
RetrainOutcome retrain_and_eval(const Backbone& bb, const std::vector<int>& chosen,
                                const TaskData& task, const RunConfig& cfg,
                                std::span<const std::uint64_t> seeds);

// Cross-task placement reuse: retrain the source architecture's layout on
// the target task. transfer(arch from A, A) is exactly retraining on A.
RetrainOutcome transfer(const Backbone& bb, const LearnedArchitecture& arch,
                        const TaskData& target, const RunConfig& cfg,
                        std::span<const std::uint64_t> seeds);

// Fixed placements with the bottleneck rescaled so every kind spends a
// comparable tunable-parameter budget. Kinds: M0 (single middle point),
// M1 (middle and three-quarter points), every_k (points 1, 1+k, ... <= L).
struct ManualArch {
  std::string kind;
  std::vector<int> layers;
  int bottleneck = 0;  // rescaled m
  int phm_n = 0;
};
ManualArch manual_strategy(const std::string& kind, const RunConfig& cfg);
std::size_t manual_budget(const ManualArch& arch, const RunConfig& cfg);  // tunable params

// Heatmap export: header "task,0,..,L", one 0/1 row per architecture, plus a
// companion grid of the final gate values in the same layout.
struct HeatmapCsv {
  std::string chosen, gates;
};
HeatmapCsv export_heatmap(const std::vector<LearnedArchitecture>& archs, int layers);
struct HeatmapRow {
  std::string task;
  std::vector<int> cells;
};
std::vector<HeatmapRow> parse_heatmap(const std::string& csv);

}  // namespace spt
