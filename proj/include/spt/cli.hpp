#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "spt/config.hpp"

namespace spt {

// Shared command-line state: config assembled from defaults, an optional
// file and --set overrides; seed; output directory; parallel seed workers.
struct CliOpts {
  RunConfig cfg;
  std::uint64_t seed = 1;
  std::string out = "runs";
  int jobs = 1;
  int eval_seeds = 5;                // retrain/transfer/pilot repetitions
  std::string arch_path;             // retrain/eval input
  std::vector<std::string> arch_paths;  // transfer/heatmap inputs
  std::vector<std::string> task_names;  // transfer targets
};

int cmd_pretrain(const CliOpts& o);
int cmd_search(const CliOpts& o);
int cmd_retrain(const CliOpts& o);
int cmd_eval(const CliOpts& o);
int cmd_pilot(const CliOpts& o);
int cmd_transfer(const CliOpts& o);
int cmd_heatmap(const CliOpts& o);
int cmd_gradcheck(const CliOpts& o);

// Full argv entry point. Exit codes: 0 success, 1 failed validation or
// invariant, 2 usage errors.
int run_cli(int argc, const char* const* argv);

}  // namespace spt
