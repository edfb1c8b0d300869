#include "spt/cli.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "spt/bilevel.hpp"
#include "spt/gradcheck.hpp"
#include "spt/harness.hpp"
#include "spt/hypernet.hpp"
#include "spt/task.hpp"

namespace spt {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string backbone_stem(const CliOpts& o) { return o.out + "/backbone"; }

void ensure_out(const CliOpts& o) { fs::create_directories(o.out); }

// Loads the pretrained frozen backbone and refuses hash mismatches so
// artifacts from different settings never mix.
Backbone load_backbone(const CliOpts& o) {
  const std::string stem = backbone_stem(o);
  if (!archive_exists(stem))
    throw std::runtime_error("no backbone checkpoint under '" + o.out + "'; run `spt pretrain` first");
  Backbone bb = Backbone::create(o.cfg);
  const std::string stored = load_archive(bb.store(), stem);
  if (stored != o.cfg.config_hash())
    throw std::runtime_error("backbone checkpoint was built from config " + stored +
                             " but the current config hashes to " + o.cfg.config_hash() +
                             "; refusing to mix settings");
  bb.store().freeze_all();
  return bb;
}

LearnedArchitecture load_arch_checked(const std::string& path, const CliOpts& o) {
  LearnedArchitecture arch = load_architecture(path);
  if (arch.config_hash != o.cfg.config_hash())
    throw std::runtime_error("architecture " + path + " carries config " + arch.config_hash +
                             " but the current config hashes to " + o.cfg.config_hash() +
                             "; refusing to mix settings");
  return arch;
}

std::vector<std::uint64_t> seed_list(const CliOpts& o) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < o.eval_seeds; ++i) s.push_back(o.seed + static_cast<std::uint64_t>(i));
  return s;
}

// Runs retrain_and_eval one seed at a time, optionally across threads; the
// per-seed results land in seed order either way.
RetrainOutcome retrain_parallel(const Backbone& bb, const std::vector<int>& chosen,
                                const TaskData& task, const RunConfig& cfg,
                                const std::vector<std::uint64_t>& seeds, int jobs) {
  if (jobs <= 1 || seeds.size() <= 1) return retrain_and_eval(bb, chosen, task, cfg, seeds);
  std::vector<double> dev(seeds.size()), test(seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
      try {
        RetrainOutcome one = retrain_and_eval(bb, chosen, task, cfg, {&seeds[i], 1});
        dev[i] = one.dev.per_seed[0];
        test[i] = one.test.per_seed[0];
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(jobs, static_cast<int>(seeds.size()));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return {eval_stats(dev), eval_stats(test)};
}

json stats_json(const EvalStats& s) {
  return json{{"mean", s.mean}, {"std", s.stdev}, {"per_seed", s.per_seed}};
}

void write_json(const json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

}  // namespace

int cmd_pretrain(const CliOpts& o) {
  ensure_out(o);
  RngPool pool(o.seed);
  std::vector<Sample> corpus = make_pretrain_corpus(o.cfg, pool);
  Backbone bb = Backbone::create(o.cfg);
  const double final_loss = bb.pretrain_and_freeze(corpus, o.seed);
  save_archive(bb.store(), backbone_stem(o), o.cfg.config_hash());
  const double train_acc =
      accuracy(bb, nullptr, {corpus.data(), std::min<std::size_t>(corpus.size(), 512)}, {});
  std::cout << "pretrained backbone: " << bb.store().total_count() << " weights, final loss "
            << final_loss << ", corpus accuracy " << train_acc << "\n"
            << "checkpoint: " << backbone_stem(o) << ".bin\n";
  return 0;
}

int cmd_search(const CliOpts& o) {
  ensure_out(o);
  Backbone bb = load_backbone(o);
  RngPool pool(o.seed);
  TaskData task = make_task(o.cfg, pool);
  HyperNet hn = HyperNet::create(o.cfg);

  const std::string tag = o.cfg.task_name + "_seed" + std::to_string(o.seed);
  SearchOptions opt;
  opt.mode = o.cfg.reparam ? Reparam::detached : Reparam::off;
  opt.use_masks = o.cfg.mask_keep < 1.0;  // keep probability 1 means no masking
  opt.lambda_c = o.cfg.lambda_c;
  opt.metrics_path = o.out + "/metrics_" + tag + ".jsonl";

  SearchResult res = search(o.cfg, bb, hn, task, o.seed, opt);

  std::ofstream alpha_log(o.out + "/alpha_" + tag + ".jsonl", std::ios::trunc);
  for (std::size_t e = 0; e < res.alpha_per_epoch.size(); ++e)
    alpha_log << json{{"epoch", e}, {"alpha", res.alpha_per_epoch[e]}}.dump() << "\n";

  LearnedArchitecture arch;
  arch.chosen_layers = select_top_k(res.final_gates, o.cfg.top_k);
  arch.gate_values = res.final_gates;
  arch.task = o.cfg.task_name;
  arch.seed = o.seed;
  arch.config_hash = o.cfg.config_hash();
  const std::string arch_path = o.out + "/arch_" + tag + ".json";
  save_architecture(arch, arch_path);

  std::cout << "search finished after " << res.steps_run << " complete steps\n"
            << "gates:";
  for (double g : res.final_gates) std::cout << " " << g;
  std::cout << "\nchosen layers:";
  for (int p : arch.chosen_layers) std::cout << " " << p;
  std::cout << "\narchitecture: " << arch_path << "\n";
  return 0;
}

int cmd_retrain(const CliOpts& o) {
  ensure_out(o);
  if (o.arch_path.empty()) throw std::runtime_error("retrain needs --arch FILE");
  Backbone bb = load_backbone(o);
  LearnedArchitecture arch = load_arch_checked(o.arch_path, o);
  RngPool pool(o.seed);
  TaskData task = make_task(o.cfg, pool);
  std::vector<std::uint64_t> seeds = seed_list(o);
  RetrainOutcome out = retrain_parallel(bb, arch.chosen_layers, task, o.cfg, seeds, o.jobs);
  json j{{"task", o.cfg.task_name},
         {"chosen_layers", arch.chosen_layers},
         {"seeds", seeds},
         {"config_hash", o.cfg.config_hash()},
         {"dev", stats_json(out.dev)},
         {"test", stats_json(out.test)}};
  const std::string path = o.out + "/retrain_" + o.cfg.task_name + ".json";
  write_json(j, path);
  std::cout << "retrained {" << json(arch.chosen_layers).dump() << "}: dev " << out.dev.mean
            << " +/- " << out.dev.stdev << ", test " << out.test.mean << " +/- " << out.test.stdev
            << "\nresult: " << path << "\n";
  return 0;
}

int cmd_eval(const CliOpts& o) {
  ensure_out(o);
  Backbone bb = load_backbone(o);
  RngPool pool(o.seed);
  TaskData task = make_task(o.cfg, pool);
  json j{{"task", o.cfg.task_name}, {"config_hash", o.cfg.config_hash()}, {"trained", false}};
  if (o.arch_path.empty()) {
    j["model"] = "frozen backbone, no prompts";
    j["dev_accuracy"] = accuracy(bb, nullptr, task.dev, task.window);
    j["test_accuracy"] = accuracy(bb, nullptr, task.test, task.window);
  } else {
    LearnedArchitecture arch = load_arch_checked(o.arch_path, o);
    FinalModel fm = FinalModel::create(o.cfg, arch.chosen_layers);
    fm.init(pool);
    j["model"] = "untrained prompts at chosen layers";
    j["chosen_layers"] = arch.chosen_layers;
    j["dev_accuracy"] = accuracy(bb, &fm, task.dev, task.window);
    j["test_accuracy"] = accuracy(bb, &fm, task.test, task.window);
  }
  const std::string path = o.out + "/eval_" + o.cfg.task_name + ".json";
  write_json(j, path);
  std::cout << "dev accuracy " << j["dev_accuracy"].get<double>() << ", test accuracy "
            << j["test_accuracy"].get<double>() << "\nresult: " << path << "\n";
  return 0;
}

int cmd_pilot(const CliOpts& o) {
  ensure_out(o);
  Backbone bb = load_backbone(o);
  RngPool pool(o.seed);
  TaskData task = make_task(o.cfg, pool);
  std::vector<std::uint64_t> seeds = seed_list(o);

  std::vector<std::string> kinds{"M0", "M1"};
  for (int k = 1; k <= std::min(4, o.cfg.layers - 1); ++k) kinds.push_back("every_" + std::to_string(k));

  json table = json::array();
  for (const std::string& kind : kinds) {
    ManualArch ma = manual_strategy(kind, o.cfg);
    RunConfig cfg = o.cfg;
    cfg.bottleneck = ma.bottleneck;
    cfg.phm_n = ma.phm_n;
    RetrainOutcome out = retrain_parallel(bb, ma.layers, task, cfg, seeds, o.jobs);
    table.push_back(json{{"kind", kind},
                         {"layers", ma.layers},
                         {"bottleneck", ma.bottleneck},
                         {"tunable_params", manual_budget(ma, o.cfg)},
                         {"dev", stats_json(out.dev)},
                         {"test", stats_json(out.test)}});
    std::cout << kind << " layers " << json(ma.layers).dump() << " m=" << ma.bottleneck << ": dev "
              << out.dev.mean << " +/- " << out.dev.stdev << "\n";
  }
  json j{{"task", o.cfg.task_name},
         {"seeds", seeds},
         {"config_hash", o.cfg.config_hash()},
         {"results", table}};
  const std::string path = o.out + "/pilot_" + o.cfg.task_name + ".json";
  write_json(j, path);
  std::cout << "result: " << path << "\n";
  return 0;
}

int cmd_transfer(const CliOpts& o) {
  ensure_out(o);
  if (o.arch_paths.empty()) throw std::runtime_error("transfer needs --archs FILE[,FILE...]");
  if (o.task_names.empty()) throw std::runtime_error("transfer needs --tasks NAME[,NAME...]");
  Backbone bb = load_backbone(o);
  std::vector<std::uint64_t> seeds = seed_list(o);

  std::vector<LearnedArchitecture> archs;
  for (const std::string& p : o.arch_paths) archs.push_back(load_arch_checked(p, o));
  std::vector<TaskData> targets;
  for (const std::string& name : o.task_names) {
    RunConfig cfg = o.cfg;
    cfg.task_name = name;
    RngPool pool(o.seed);
    targets.push_back(make_task(cfg, pool));
  }

  json dev_grid = json::array(), test_grid = json::array();
  for (const LearnedArchitecture& arch : archs) {
    json dev_row = json::array(), test_row = json::array();
    for (const TaskData& target : targets) {
      RetrainOutcome out = retrain_parallel(bb, arch.chosen_layers, target, o.cfg, seeds, o.jobs);
      dev_row.push_back(out.dev.mean);
      test_row.push_back(out.test.mean);
      std::cout << arch.task << " -> " << target.name << ": dev " << out.dev.mean << ", test "
                << out.test.mean << "\n";
    }
    dev_grid.push_back(dev_row);
    test_grid.push_back(test_row);
  }
  json j;
  j["sources"] = json::array();
  for (const LearnedArchitecture& a : archs)
    j["sources"].push_back(json{{"task", a.task}, {"chosen_layers", a.chosen_layers}});
  j["targets"] = o.task_names;
  j["seeds"] = seeds;
  j["config_hash"] = o.cfg.config_hash();
  j["dev_mean"] = dev_grid;
  j["test_mean"] = test_grid;
  const std::string path = o.out + "/transfer.json";
  write_json(j, path);
  std::cout << "result: " << path << "\n";
  return 0;
}

int cmd_heatmap(const CliOpts& o) {
  ensure_out(o);
  if (o.arch_paths.empty()) throw std::runtime_error("heatmap needs --archs FILE[,FILE...]");
  std::vector<LearnedArchitecture> archs;
  for (const std::string& p : o.arch_paths) archs.push_back(load_architecture(p));
  HeatmapCsv csv = export_heatmap(archs, o.cfg.layers);
  write_text(csv.chosen, o.out + "/heatmap_layers.csv");
  write_text(csv.gates, o.out + "/heatmap_gates.csv");
  std::cout << csv.chosen << "heatmaps: " << o.out << "/heatmap_layers.csv, " << o.out
            << "/heatmap_gates.csv\n";
  return 0;
}

int cmd_gradcheck(const CliOpts& o) {
  ensure_out(o);
  json checks = json::array();
  bool all_ok = true;
  auto record = [&](const std::string& name, double measured, double tol, bool ok) {
    checks.push_back(
        json{{"check", name}, {"measured", measured}, {"tolerance", tol}, {"pass", ok}});
    std::cout << (ok ? "pass" : "FAIL") << "  " << name << "  (measured " << measured
              << ", tolerance " << tol << ")\n";
    all_ok = all_ok && ok;
  };

  // Small but structurally complete setup: frozen random backbone, live
  // hyper-network, a couple of samples, a mask that exercises both branches.
  RunConfig cfg = o.cfg;
  cfg.layers = 3;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.prompt_len = 2;
  cfg.bottleneck = 4;
  cfg.phm_n = 2;
  cfg.task_window = "upper_half";
  cfg.train_size = 16;
  cfg.dev_size = 16;
  cfg.test_size = 16;
  RngPool pool(o.seed);
  Backbone bb = Backbone::create(cfg);
  std::mt19937_64 init_rng = pool.stream("init.backbone");
  bb.init(init_rng);
  bb.store().freeze_all();
  HyperNet hn = HyperNet::create(cfg);
  hn.init(pool);
  std::mt19937_64 jitter = pool.stream("gradcheck.alpha");
  std::normal_distribution<double> n01(0.0, 0.5);
  for (double& a : hn.alpha().value) a = n01(jitter);
  TaskData task = make_task(cfg, pool);
  std::vector<Sample> batch(task.train.begin(), task.train.begin() + 2);
  std::vector<int> window = cfg.window_blocks();
  std::vector<int> mask(static_cast<std::size_t>(hn.points()), 1);
  mask[1] = 0;

  {  // full-loss finite differences over every trainable tensor
    // Plain gates here: the re-parameterized mode routes a surrogate gradient
    // that is intentionally not the derivative of its value-identity forward,
    // so it is checked against the closed form below instead.
    auto loss_value = [&] {
      ad::Tape tape;
      Leases lease(tape, [](const Parameter&) { return false; });
      return hn.batch_losses(tape, lease, bb, batch, window, Reparam::off, mask, cfg.lambda_c)
          .total_value;
    };
    ad::Tape tape;
    Leases lease(tape);
    HyperNet::Losses le =
        hn.batch_losses(tape, lease, bb, batch, window, Reparam::off, mask, cfg.lambda_c);
    tape.backward(le.total);
    std::vector<std::vector<double>*> blocks;
    std::vector<std::vector<double>> analytic;
    for (Parameter* p : hn.store().trainable()) {
      blocks.push_back(&p->value);
      analytic.push_back(tape.grad(lease.of(*p)));
    }
    GradCheckReport rep = finite_diff_check_blocks(loss_value, blocks, analytic, 1e-5);
    record("full_loss_finite_difference", rep.max_rel_err, 1e-4, rep.max_rel_err < 1e-4);
  }

  {  // closed-form gate gradient, random trials
    std::mt19937_64 rng = pool.stream("gradcheck.eq7");
    std::normal_distribution<double> na(0.0, 2.0), nw(0.0, 1.0);
    std::uniform_int_distribution<int> nl(2, 9);
    double worst = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
      const int n = nl(rng);
      std::vector<double> alpha(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
      for (double& v : alpha) v = na(rng);
      for (double& v : w) v = nw(rng);
      ad::Tape tape;
      ad::Tensor al = tape.leaf({n, 1}, alpha, true);
      ad::Tensor a = tape.sigmoid(al);
      ad::Tensor sum = tape.sum_all(a);
      ad::Tensor ahat = tape.mul(a, tape.div(tape.detach(sum), sum));
      ad::Tensor loss = tape.sum_all(tape.mul(ahat, tape.leaf({n, 1}, w, false)));
      tape.backward(loss);
      std::vector<double> got = tape.grad(al);
      std::vector<double> want = gate_grad_closed_form(alpha, w);
      for (int i = 0; i < n; ++i) worst = std::max(worst, rel_err(got[static_cast<std::size_t>(i)], want[static_cast<std::size_t>(i)]));
    }
    record("gate_gradient_closed_form", worst, 1e-8, worst < 1e-8);
  }

  {  // the re-parameterized gates change no forward value
    ad::Tape tape;
    Leases lease(tape, [](const Parameter&) { return false; });
    const double with_c =
        hn.batch_losses(tape, lease, bb, batch, window, Reparam::detached, mask, cfg.lambda_c)
            .total_value;
    ad::Tape tape2;
    Leases lease2(tape2, [](const Parameter&) { return false; });
    const double without_c =
        hn.batch_losses(tape2, lease2, bb, batch, window, Reparam::off, mask, cfg.lambda_c)
            .total_value;
    const double diff = std::abs(with_c - without_c);
    record("reparameterization_value_identity", diff, 1e-10, diff < 1e-10);
  }

  {  // frozen backbone: zero gradients, values untouched by a training step
    std::vector<double> before = bb.store().snapshot();
    ad::Tape tape;
    Leases lease(tape);
    HyperNet::Losses le =
        hn.batch_losses(tape, lease, bb, batch, window, Reparam::detached, mask, cfg.lambda_c);
    tape.backward(le.total);
    double gmax = 0.0;
    for (const Parameter* p : std::as_const(bb.store()).all()) {
      ad::Tensor t = lease.find(*p);
      if (!t.valid()) continue;
      for (double g : tape.grad(t)) gmax = std::max(gmax, std::abs(g));
    }
    AdamW opt(cfg.lr, cfg.weight_decay);
    opt.step(hn.store().trainable(), tape, lease, cfg.lr);
    std::vector<double> after = bb.store().snapshot();
    const bool frozen = before == after && gmax == 0.0;
    record("frozen_backbone_zero_grad_and_fixed", gmax, 0.0, frozen);
  }

  {  // masked-off generators take no task-loss gradient; masked-on ones do
    ad::Tape tape;
    Leases lease(tape);
    HyperNet::Losses le =
        hn.batch_losses(tape, lease, bb, batch, window, Reparam::detached, mask, 0.0);
    tape.backward(le.task);
    double off_norm = 0.0, on_norm = 0.0;
    for (Parameter* p : hn.store().trainable()) {
      if (HyperNet::is_gate(*p)) continue;
      const bool masked_off = p->name.rfind("pg1.", 0) == 0;
      ad::Tensor t = lease.find(*p);
      double norm = 0.0;
      if (t.valid())
        for (double g : tape.grad(t)) norm += g * g;
      if (masked_off)
        off_norm += norm;
      else
        on_norm += norm;
    }
    record("mask_off_purity", std::sqrt(off_norm), 1e-12, off_norm == 0.0 && on_norm > 0.0);
  }

  json report{{"config_hash", o.cfg.config_hash()}, {"seed", o.seed}, {"checks", checks},
              {"pass", all_ok}};
  write_json(report, o.out + "/gradcheck.json");
  std::cout << (all_ok ? "all checks passed" : "CHECKS FAILED") << "; report: " << o.out
            << "/gradcheck.json\n";
  return all_ok ? 0 : 1;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"selective prompt layer search on a frozen toy transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  CliOpts o;

  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", overrides, "override single config keys (key=value)");
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--jobs", o.jobs, "parallel workers for independent seed runs");
  app.add_option("--seeds", o.eval_seeds, "number of retrain/eval seeds");

  CLI::App* pretrain = app.add_subcommand("pretrain", "train and freeze the backbone");
  CLI::App* search = app.add_subcommand("search", "bi-level gate search");
  CLI::App* retrain = app.add_subcommand("retrain", "retrain the discretized model");
  retrain->add_option("--arch", o.arch_path, "architecture JSON")->required();
  CLI::App* eval = app.add_subcommand("eval", "evaluate without training");
  eval->add_option("--arch", o.arch_path, "architecture JSON (optional)");
  CLI::App* pilot = app.add_subcommand("pilot", "manual placement sweep");
  CLI::App* transfer = app.add_subcommand("transfer", "cross-task placement matrix");
  transfer->add_option("--archs", o.arch_paths, "architecture JSON files")->delimiter(',')->required();
  transfer->add_option("--tasks", o.task_names, "target task names")->delimiter(',')->required();
  CLI::App* heatmap = app.add_subcommand("heatmap", "export placement grids as CSV");
  heatmap->add_option("--archs", o.arch_paths, "architecture JSON files")->delimiter(',')->required();
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "run the gradient invariant battery");

  for (CLI::App* sub : {pretrain, search, retrain, eval, pilot, transfer, heatmap, gradcheck})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (!config_path.empty()) o.cfg = load_config_file(config_path);
    for (const std::string& kv : overrides) apply_override(o.cfg, kv);
    o.cfg.validate();
    if (o.jobs < 1 || o.eval_seeds < 1)
      throw std::invalid_argument("--jobs and --seeds must be positive");

    if (pretrain->parsed()) return cmd_pretrain(o);
    if (search->parsed()) return cmd_search(o);
    if (retrain->parsed()) return cmd_retrain(o);
    if (eval->parsed()) return cmd_eval(o);
    if (pilot->parsed()) return cmd_pilot(o);
    if (transfer->parsed()) return cmd_transfer(o);
    if (heatmap->parsed()) return cmd_heatmap(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
    std::cerr << "no command given\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace spt
