#pragma once
#include <cstdint>
#include <string>
#include <vector>

namespace spt {

// Flat key=value configuration. Defaults below are the desk-scale model;
// files and --set overrides replace individual keys. The content hash covers
// every hyperparameter (not seed/output paths) and is embedded in all
// artifacts so mismatched combinations are refused instead of misread.
struct RunConfig {
  // backbone
  int layers = 6;       // transformer blocks; prompt sites are 0..layers
  int d_model = 32;
  int heads = 2;
  int vocab = 64;
  int max_len = 32;
  int ffn_mult = 2;
  int labels = 2;

  // prompt generators
  int prompt_len = 4;       // l: reserved slot rows
  int bottleneck = 8;       // m
  int phm_n = 4;            // Kronecker factor count
  std::string prompt_act = "tanh";  // tanh | relu | identity

  // gating and search
  double tau = 0.5;
  bool reparam = true;
  int top_k = 4;
  double lambda_c = 1.0;
  double mask_keep = 0.6;   // Bernoulli keep probability s

  // optimization (search and retrain share the schedule)
  double lr = 5e-4;
  double weight_decay = 0.01;
  double warmup_frac = 0.06;
  int steps = 1000;         // complete steps
  int batch = 8;

  // backbone pretraining
  int pretrain_steps = 1200;
  int pretrain_batch = 32;
  double pretrain_lr = 1e-3;
  int pretrain_corpus = 4096;

  // task family
  std::string task_name = "alpha";
  std::string task_window = "upper_half";  // all | upper_half | lower_half | comma list
  int train_size = 100;
  int dev_size = 256;
  int test_size = 512;

  std::string canonical() const;          // sorted key=value lines
  std::string config_hash() const;        // hex content hash of canonical()
  void validate() const;                  // throws with the offending key path

  std::vector<int> window_blocks() const;  // resolved visibility window
};

RunConfig load_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key_eq_value);
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);
void save_config_file(const RunConfig& cfg, const std::string& path);

}  // namespace spt
