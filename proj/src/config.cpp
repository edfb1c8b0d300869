#include "spt/config.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "spt/rng.hpp"

namespace spt {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw std::invalid_argument("config error at '" + key + "': " + why);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    bad(key, "expected integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    bad(key, "expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  bad(key, "expected on/off, got '" + v + "'");
}

}  // namespace

std::string RunConfig::canonical() const {
  std::map<std::string, std::string> kv;
  kv["backbone.layers"] = std::to_string(layers);
  kv["backbone.d_model"] = std::to_string(d_model);
  kv["backbone.heads"] = std::to_string(heads);
  kv["backbone.vocab"] = std::to_string(vocab);
  kv["backbone.max_len"] = std::to_string(max_len);
  kv["backbone.ffn_mult"] = std::to_string(ffn_mult);
  kv["backbone.labels"] = std::to_string(labels);
  kv["prompt.len"] = std::to_string(prompt_len);
  kv["prompt.bottleneck"] = std::to_string(bottleneck);
  kv["prompt.phm_n"] = std::to_string(phm_n);
  kv["prompt.activation"] = prompt_act;
  kv["gates.tau"] = fmt(tau);
  kv["gates.reparam"] = reparam ? "on" : "off";
  kv["gates.top_k"] = std::to_string(top_k);
  kv["consistency.lambda"] = fmt(lambda_c);
  kv["consistency.mask_keep"] = fmt(mask_keep);
  kv["optim.lr"] = fmt(lr);
  kv["optim.weight_decay"] = fmt(weight_decay);
  kv["optim.warmup_frac"] = fmt(warmup_frac);
  kv["optim.steps"] = std::to_string(steps);
  kv["optim.batch"] = std::to_string(batch);
  kv["pretrain.steps"] = std::to_string(pretrain_steps);
  kv["pretrain.batch"] = std::to_string(pretrain_batch);
  kv["pretrain.lr"] = fmt(pretrain_lr);
  kv["pretrain.corpus"] = std::to_string(pretrain_corpus);
  kv["task.name"] = task_name;
  kv["task.window"] = task_window;
  kv["task.train"] = std::to_string(train_size);
  kv["task.dev"] = std::to_string(dev_size);
  kv["task.test"] = std::to_string(test_size);
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::string RunConfig::config_hash() const { return hex64(fnv1a64(canonical())); }

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "backbone.layers") cfg.layers = to_int(key, v);
  else if (key == "backbone.d_model") cfg.d_model = to_int(key, v);
  else if (key == "backbone.heads") cfg.heads = to_int(key, v);
  else if (key == "backbone.vocab") cfg.vocab = to_int(key, v);
  else if (key == "backbone.max_len") cfg.max_len = to_int(key, v);
  else if (key == "backbone.ffn_mult") cfg.ffn_mult = to_int(key, v);
  else if (key == "backbone.labels") cfg.labels = to_int(key, v);
  else if (key == "prompt.len") cfg.prompt_len = to_int(key, v);
  else if (key == "prompt.bottleneck") cfg.bottleneck = to_int(key, v);
  else if (key == "prompt.phm_n") cfg.phm_n = to_int(key, v);
  else if (key == "prompt.activation") cfg.prompt_act = v;
  else if (key == "gates.tau") cfg.tau = to_double(key, v);
  else if (key == "gates.reparam") cfg.reparam = to_bool(key, v);
  else if (key == "gates.top_k") cfg.top_k = to_int(key, v);
  else if (key == "consistency.lambda") cfg.lambda_c = to_double(key, v);
  else if (key == "consistency.mask_keep") cfg.mask_keep = to_double(key, v);
  else if (key == "optim.lr") cfg.lr = to_double(key, v);
  else if (key == "optim.weight_decay") cfg.weight_decay = to_double(key, v);
  else if (key == "optim.warmup_frac") cfg.warmup_frac = to_double(key, v);
  else if (key == "optim.steps") cfg.steps = to_int(key, v);
  else if (key == "optim.batch") cfg.batch = to_int(key, v);
  else if (key == "pretrain.steps") cfg.pretrain_steps = to_int(key, v);
  else if (key == "pretrain.batch") cfg.pretrain_batch = to_int(key, v);
  else if (key == "pretrain.lr") cfg.pretrain_lr = to_double(key, v);
  else if (key == "pretrain.corpus") cfg.pretrain_corpus = to_int(key, v);
  else if (key == "task.name") cfg.task_name = v;
  else if (key == "task.window") cfg.task_window = v;
  else if (key == "task.train") cfg.train_size = to_int(key, v);
  else if (key == "task.dev") cfg.dev_size = to_int(key, v);
  else if (key == "task.test") cfg.test_size = to_int(key, v);
  else bad(key, "unknown key");
}

void apply_override(RunConfig& cfg, const std::string& key_eq_value) {
  const auto eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("--set expects key=value, got '" + key_eq_value + "'");
  apply_key(cfg, trim(key_eq_value.substr(0, eq)), trim(key_eq_value.substr(eq + 1)));
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    apply_key(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void save_config_file(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config file: " + path);
  out << cfg.canonical();
}

std::vector<int> RunConfig::window_blocks() const {
  std::vector<int> w;
  if (task_window == "all") {
    for (int i = 0; i < layers; ++i) w.push_back(i);
  } else if (task_window == "upper_half") {
    for (int i = layers / 2; i < layers; ++i) w.push_back(i);
  } else if (task_window == "lower_half") {
    for (int i = 0; i < layers / 2; ++i) w.push_back(i);
  } else {
    std::stringstream ss(task_window);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const std::string t = trim(tok);
      if (!t.empty()) w.push_back(to_int("task.window", t));
    }
    std::sort(w.begin(), w.end());
  }
  return w;
}

void RunConfig::validate() const {
  if (layers < 1) bad("backbone.layers", "must be >= 1");
  if (d_model < 2) bad("backbone.d_model", "must be >= 2");
  if (heads < 1 || d_model % heads != 0) bad("backbone.heads", "must divide d_model");
  if (vocab < 8) bad("backbone.vocab", "must be >= 8");
  if (max_len < 4) bad("backbone.max_len", "must be >= 4");
  if (ffn_mult < 1) bad("backbone.ffn_mult", "must be >= 1");
  if (labels < 2) bad("backbone.labels", "must be >= 2");
  if (prompt_len < 1) bad("prompt.len", "must be >= 1");
  if (prompt_len + 8 > max_len) bad("prompt.len", "leaves too little room for tokens under max_len");
  if (bottleneck < 1 || bottleneck >= d_model)
    bad("prompt.bottleneck", "must satisfy 1 <= m < d_model");
  if (phm_n < 1) bad("prompt.phm_n", "must be >= 1");
  if (d_model % phm_n != 0) bad("prompt.phm_n", "must divide d_model");
  if (bottleneck % phm_n != 0) bad("prompt.phm_n", "must divide prompt.bottleneck");
  if (prompt_act != "tanh" && prompt_act != "relu" && prompt_act != "identity")
    bad("prompt.activation", "must be tanh, relu or identity");
  if (tau <= 0.0 || tau > 1.0) bad("gates.tau", "must be in (0, 1]");
  if (top_k < 1 || top_k > layers + 1) bad("gates.top_k", "must be in 1..layers+1");
  if (lambda_c < 0.0) bad("consistency.lambda", "must be >= 0");
  if (mask_keep < 0.0 || mask_keep > 1.0) bad("consistency.mask_keep", "must be in [0, 1]");
  if (lr <= 0.0) bad("optim.lr", "must be > 0");
  if (weight_decay < 0.0) bad("optim.weight_decay", "must be >= 0");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0) bad("optim.warmup_frac", "must be in [0, 1)");
  if (steps < 1) bad("optim.steps", "must be >= 1");
  if (batch < 1) bad("optim.batch", "must be >= 1");
  if (pretrain_steps < 0) bad("pretrain.steps", "must be >= 0");
  if (pretrain_batch < 1) bad("pretrain.batch", "must be >= 1");
  if (pretrain_corpus < pretrain_batch) bad("pretrain.corpus", "must cover at least one batch");
  if (train_size < batch) bad("task.train", "must cover at least one batch");
  if (dev_size < 1) bad("task.dev", "must be >= 1");
  if (test_size < 1) bad("task.test", "must be >= 1");
  for (int b : window_blocks())
    if (b < 0 || b >= layers) bad("task.window", "block index " + std::to_string(b) + " outside 0.." + std::to_string(layers - 1));
}

}  // namespace spt
