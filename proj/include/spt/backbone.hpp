#pragma once
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spt/config.hpp"
#include "spt/params.hpp"
#include "spt/task.hpp"

namespace spt {

// Pre-norm transformer encoder over [prompt slots][tokens]. The slot rows
// carry whatever the injector last wrote and otherwise flow through the
// blocks like ordinary positions. Token queries may attend to slot keys only
// in blocks listed in the visibility window, and only once an injection has
// marked the slots live; everything else about attention is unrestricted.
// Until the first live injection the token path is bit-identical to a model
// with no slots at all.
class Backbone {
 public:
  struct Injection {
    ad::Tensor slots;  // prompt_len x d_model, replaces the slot rows
    bool live = true;  // false parks the slots out of token view again
  };
  // Called after the embedding (layer 0) and after every block (layers
  // 1..L) with that layer's token hidden states and the current slot rows.
  // Returning nullopt leaves the slots to propagate as they are.
  using Injector =
      std::function<std::optional<Injection>(int layer, ad::Tensor token_h, ad::Tensor slot_state)>;

  struct EncodeOut {
    std::vector<ad::Tensor> token_h;  // per layer 0..L, each T x d
    ad::Tensor readout;               // 1 x d, normalized mask-position state
    ad::Tensor logits;                // 1 x labels
  };

  static Backbone create(const RunConfig& cfg);
  void init(std::mt19937_64& rng);

  EncodeOut encode(ad::Tape& tape, Leases& lease, std::span<const int> tokens,
                   const Injector& injector, std::span<const int> window_blocks) const;
  ad::Tensor classify(ad::Tape& tape, Leases& lease, ad::Tensor readout) const;

  // Supervised training of backbone and head on the generic corpus, then
  // freeze every weight. Returns final training loss.
  double pretrain_and_freeze(std::span<const Sample> corpus, std::uint64_t seed);

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const RunConfig& cfg() const { return cfg_; }

 private:
  struct Block {
    Parameter *ln1g, *ln1b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Parameter *ln2g, *ln2b, *w1, *b1, *w2, *b2;
  };

  ad::Tensor run_block(ad::Tape& tape, Leases& lease, const Block& blk, ad::Tensor x,
                       int slot_rows, bool slots_visible) const;
  ad::Tensor position_rows(ad::Tape& tape, int first, int count) const;

  RunConfig cfg_;
  ParamStore store_;
  Parameter* tok_emb_ = nullptr;
  std::vector<Block> blocks_;
  Parameter *lnf_g_ = nullptr, *lnf_b_ = nullptr;
  Parameter *head_w_ = nullptr, *head_b_ = nullptr;
  std::vector<double> pos_table_;  // max_len x d sinusoidal constants
};

}  // namespace spt
