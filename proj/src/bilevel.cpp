#include "spt/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace spt {

TrainSplit split_epoch(int n, std::mt19937_64& rng) {
  if (n < 2) throw std::invalid_argument("split_epoch: need at least 2 samples, got " + std::to_string(n));
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TrainSplit s;
  s.d_omega.assign(perm.begin(), perm.begin() + n / 2);
  s.d_alpha.assign(perm.begin() + n / 2, perm.end());
  return s;
}

StepOut optimize_batch(const Backbone& bb, HyperNet& hn, std::span<const Sample> batch,
                       std::span<const int> window, const SearchOptions& opt,
                       const std::vector<int>& mask, AdamW& optim, double lr, bool gates_side) {
  ad::Tape tape;
  Leases lease(tape, [gates_side](const Parameter& p) {
    return p.trainable && HyperNet::is_gate(p) == gates_side;
  });
  HyperNet::Losses losses =
      hn.batch_losses(tape, lease, bb, batch, window, opt.mode, mask, opt.lambda_c);
  tape.backward(losses.total);
  optim.step(hn.store().trainable(), tape, lease, lr);
  return {losses.total_value, losses.task_value, losses.consistency_value};
}

SearchResult search(const RunConfig& cfg, const Backbone& bb, HyperNet& hn, const TaskData& task,
                    std::uint64_t seed, const SearchOptions& opt) {
  const int n = static_cast<int>(task.train.size());
  if (n < 2) throw std::invalid_argument("search: training set of size " + std::to_string(n));

  RngPool pool(seed);
  hn.init(pool);
  std::mt19937_64 split_rng = pool.stream("splits");
  std::mt19937_64 mask_rng = pool.stream("masks");

  AdamW opt_omega(cfg.lr, cfg.weight_decay);
  AdamW opt_alpha(cfg.lr, 0.0);
  LrSchedule sched{cfg.lr, cfg.steps, cfg.warmup_frac};
  std::vector<int> window = cfg.window_blocks();
  const std::vector<int> all_on(static_cast<std::size_t>(hn.points()), 1);

  std::ofstream metrics;
  if (!opt.metrics_path.empty()) {
    metrics.open(opt.metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot open metrics file " + opt.metrics_path);
  }

  SearchResult res;
  auto batch_of = [&](const std::vector<int>& idx, std::size_t from) {
    std::vector<Sample> b;
    for (std::size_t i = from; i < idx.size() && b.size() < static_cast<std::size_t>(cfg.batch); ++i)
      b.push_back(task.train[static_cast<std::size_t>(idx[i])]);
    return b;
  };

  int step = 0;
  while (step < cfg.steps) {
    TrainSplit split = split_epoch(n, split_rng);
    for (std::size_t co = 0, ca = 0; co < split.d_omega.size() && ca < split.d_alpha.size() && step < cfg.steps;
         co += cfg.batch, ca += cfg.batch, ++step) {
      const double lr = sched.at(step);
      std::vector<Sample> inner_batch = batch_of(split.d_omega, co);
      std::vector<Sample> outer_batch = batch_of(split.d_alpha, ca);
      std::vector<int> inner_mask = opt.use_masks ? hn.sample_mask(mask_rng) : all_on;
      std::vector<int> outer_mask = opt.use_masks ? hn.sample_mask(mask_rng) : all_on;

      StepOut inner = optimize_batch(bb, hn, inner_batch, window, opt, inner_mask, opt_omega, lr, false);
      StepOut outer = optimize_batch(bb, hn, outer_batch, window, opt, outer_mask, opt_alpha, lr, true);
      if (!std::isfinite(inner.loss) || !std::isfinite(outer.loss))
        throw std::runtime_error("search diverged at step " + std::to_string(step) +
                                 " (inner " + std::to_string(inner.loss) + ", outer " +
                                 std::to_string(outer.loss) + ")");

      if (metrics.is_open()) {
        nlohmann::json line{{"step", step},
                            {"inner_loss", inner.loss},
                            {"outer_loss", outer.loss},
                            {"consistency_loss", inner.consistency},
                            {"lr", lr},
                            {"alpha", hn.alpha_values()}};
        metrics << line.dump() << "\n";
      }
    }
    res.alpha_per_epoch.push_back(hn.alpha_values());
  }

  res.final_alpha = hn.alpha_values();
  res.final_gates = hn.gate_values();
  res.steps_run = step;
  return res;
}

}  // namespace spt
