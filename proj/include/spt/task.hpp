#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "spt/config.hpp"
#include "spt/rng.hpp"

namespace spt {

struct Sample {
  std::vector<int> tokens;
  int label = 0;
};

struct TaskData {
  std::string name;
  std::vector<int> window;  // visibility window in block indices
  std::vector<Sample> train, dev, test;
};

// Synthetic keyed-majority family. Each sequence is
//   [key] [open] symbols... [close] filler... [mask]
// where the span holds symbols from two groups. The base label is 1 when the
// second group holds the majority. A key from the flip range inverts the
// label; the generic pretraining variant only uses non-flip keys outside the
// downstream key set, so a frozen backbone sits at chance on downstream
// tasks until prompts learn the key convention.
struct TokenIds {
  static constexpr int mask = 1;
  static constexpr int open = 2;
  static constexpr int close = 3;
  static constexpr int group0 = 8;    // 8..15
  static constexpr int group1 = 16;   // 16..23
  static constexpr int filler = 24;   // 24..39
  static constexpr int keys_plain = 40;  // 40..47: label = majority
  static constexpr int keys_flip = 48;   // 48..55: label = 1 - majority
};

// Downstream task: 50/50 mix of one plain key and one flip key, chosen per
// task name so different tasks use disjoint keys.
TaskData make_task(const RunConfig& cfg, const RngPool& rng);
// Pretraining corpus: plain keys only (excluding downstream ones).
std::vector<Sample> make_pretrain_corpus(const RunConfig& cfg, const RngPool& rng);

// Line-delimited serialization: {"tokens":[...],"label":k} per row.
void save_samples(const std::vector<Sample>& samples, const std::string& path);
std::vector<Sample> load_samples(const std::string& path);

double label_balance(const std::vector<Sample>& samples, int labels);  // max class share

}  // namespace spt
