#include "spt/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "spt/optim.hpp"
#include "spt/rng.hpp"

namespace spt {

Backbone Backbone::create(const RunConfig& cfg) {
  cfg.validate();
  Backbone bb;
  bb.cfg_ = cfg;
  ParamStore& s = bb.store_;
  const int d = cfg.d_model, f = cfg.d_model * cfg.ffn_mult;
  bb.tok_emb_ = &s.add("emb.tok", {cfg.vocab, d});
  for (int b = 0; b < cfg.layers; ++b) {
    const std::string p = "blk" + std::to_string(b) + ".";
    Block blk;
    blk.ln1g = &s.add(p + "ln1.g", {d});
    blk.ln1b = &s.add(p + "ln1.b", {d});
    blk.wq = &s.add(p + "attn.wq", {d, d});
    blk.bq = &s.add(p + "attn.bq", {d});
    blk.wk = &s.add(p + "attn.wk", {d, d});
    blk.bk = &s.add(p + "attn.bk", {d});
    blk.wv = &s.add(p + "attn.wv", {d, d});
    blk.bv = &s.add(p + "attn.bv", {d});
    blk.wo = &s.add(p + "attn.wo", {d, d});
    blk.bo = &s.add(p + "attn.bo", {d});
    blk.ln2g = &s.add(p + "ln2.g", {d});
    blk.ln2b = &s.add(p + "ln2.b", {d});
    blk.w1 = &s.add(p + "ffn.w1", {d, f});
    blk.b1 = &s.add(p + "ffn.b1", {f});
    blk.w2 = &s.add(p + "ffn.w2", {f, d});
    blk.b2 = &s.add(p + "ffn.b2", {d});
    bb.blocks_.push_back(blk);
  }
  bb.lnf_g_ = &s.add("lnf.g", {d});
  bb.lnf_b_ = &s.add("lnf.b", {d});
  bb.head_w_ = &s.add("head.w", {d, cfg.labels});
  bb.head_b_ = &s.add("head.b", {cfg.labels});

  bb.pos_table_.assign(static_cast<std::size_t>(cfg.max_len) * d, 0.0);
  for (int pos = 0; pos < cfg.max_len; ++pos)
    for (int j = 0; j < d; ++j) {
      const double rate = std::pow(10000.0, -2.0 * (j / 2) / d);
      bb.pos_table_[static_cast<std::size_t>(pos) * d + j] =
          (j % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return bb;
}

void Backbone::init(std::mt19937_64& rng) {
  for (Parameter* p : store_.all()) {
    const std::string& n = p->name;
    const bool is_gain = n.ends_with(".g") && n.find("ln") != std::string::npos;
    const bool is_bias = n.ends_with(".b") || n.ends_with(".bq") || n.ends_with(".bk") ||
                         n.ends_with(".bv") || n.ends_with(".bo") || n.ends_with(".b1") ||
                         n.ends_with(".b2");
    if (is_gain) {
      std::fill(p->value.begin(), p->value.end(), 1.0);
    } else if (is_bias) {
      std::fill(p->value.begin(), p->value.end(), 0.0);
    } else if (n == "emb.tok") {
      store_.fill_normal(*p, rng, 0.1);
    } else {
      store_.fill_glorot(*p, rng);
    }
  }
}

ad::Tensor Backbone::position_rows(ad::Tape& tape, int first, int count) const {
  const int d = cfg_.d_model;
  if (first + count > cfg_.max_len)
    throw std::invalid_argument("sequence runs past max_len: needs position " +
                                std::to_string(first + count - 1));
  return tape.constant({count, d},
                       std::span<const double>(pos_table_.data() + static_cast<std::size_t>(first) * d,
                                               static_cast<std::size_t>(count) * d));
}

ad::Tensor Backbone::run_block(ad::Tape& tape, Leases& lease, const Block& blk, ad::Tensor x,
                               int slot_rows, bool slots_visible) const {
  const int s = x.rows(), d = cfg_.d_model;
  const int dh = d / cfg_.heads;
  ad::Tensor xn = tape.layer_norm(x, lease.of(*blk.ln1g), lease.of(*blk.ln1b));
  ad::Tensor q = ad::affine(tape, xn, lease.of(*blk.wq), lease.of(*blk.bq));
  ad::Tensor k = ad::affine(tape, xn, lease.of(*blk.wk), lease.of(*blk.bk));
  ad::Tensor v = ad::affine(tape, xn, lease.of(*blk.wv), lease.of(*blk.bv));

  // Token queries must not see slot keys outside the visibility window or
  // before the first live injection.
  ad::Tensor mask;
  if (slot_rows > 0 && !slots_visible) {
    std::vector<double> m(static_cast<std::size_t>(s) * s, 0.0);
    for (int i = slot_rows; i < s; ++i)
      for (int j = 0; j < slot_rows; ++j) m[static_cast<std::size_t>(i) * s + j] = -1e9;
    mask = tape.constant({s, s}, m);
  }

  std::vector<ad::Tensor> heads;
  ad::Tensor inv_sqrt = tape.scalar(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < cfg_.heads; ++h) {
    ad::Tensor qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    ad::Tensor kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    ad::Tensor vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    ad::Tensor scores = tape.mul(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
    if (mask.valid()) scores = tape.add(scores, mask);
    heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
  }
  ad::Tensor attn = ad::affine(tape, tape.concat_cols(heads), lease.of(*blk.wo), lease.of(*blk.bo));
  x = tape.add(x, attn);

  ad::Tensor xn2 = tape.layer_norm(x, lease.of(*blk.ln2g), lease.of(*blk.ln2b));
  ad::Tensor hidden = tape.relu(ad::affine(tape, xn2, lease.of(*blk.w1), lease.of(*blk.b1)));
  ad::Tensor ffn = ad::affine(tape, hidden, lease.of(*blk.w2), lease.of(*blk.b2));
  return tape.add(x, ffn);
}

Backbone::EncodeOut Backbone::encode(ad::Tape& tape, Leases& lease, std::span<const int> tokens,
                                     const Injector& injector, std::span<const int> window_blocks) const {
  if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
  const int t = static_cast<int>(tokens.size());
  const int l = injector ? cfg_.prompt_len : 0;  // without an injector the slots are inert; skip them
  const int d = cfg_.d_model;

  std::vector<bool> in_window(static_cast<std::size_t>(cfg_.layers), false);
  for (int b : window_blocks)
    if (b >= 0 && b < cfg_.layers) in_window[static_cast<std::size_t>(b)] = true;

  EncodeOut out;
  ad::Tensor tok = tape.add(tape.embedding(lease.of(*tok_emb_), tokens),
                            position_rows(tape, cfg_.prompt_len, t));
  out.token_h.push_back(tok);

  ad::Tensor slots;
  bool active = false;
  if (l > 0) {
    slots = tape.zeros({l, d});
    if (auto inj = injector(0, tok, slots)) {
      if (inj->slots.rows() != l || inj->slots.cols() != d)
        throw std::invalid_argument("injector returned slots of shape " + ad::shape_str(inj->slots.shape()));
      slots = inj->slots;
      active = inj->live;
    }
  }

  ad::Tensor h = tok;
  for (int b = 0; b < cfg_.layers; ++b) {
    ad::Tensor x = l > 0 ? tape.concat_rows({slots, h}) : h;
    const bool visible = active && in_window[static_cast<std::size_t>(b)];
    x = run_block(tape, lease, blocks_[b], x, l, visible);
    if (l > 0) {
      slots = tape.slice_rows(x, 0, l);
      h = tape.slice_rows(x, l, l + t);
    } else {
      h = x;
    }
    out.token_h.push_back(h);
    if (l > 0) {
      if (auto inj = injector(b + 1, h, slots)) {
        if (inj->slots.rows() != l || inj->slots.cols() != d)
          throw std::invalid_argument("injector returned slots of shape " + ad::shape_str(inj->slots.shape()));
        slots = inj->slots;
        active = inj->live;
      }
    }
  }

  ad::Tensor mask_row = tape.slice_rows(h, t - 1, t);
  out.readout = tape.layer_norm(mask_row, lease.of(*lnf_g_), lease.of(*lnf_b_));
  out.logits = classify(tape, lease, out.readout);
  return out;
}

ad::Tensor Backbone::classify(ad::Tape& tape, Leases& lease, ad::Tensor readout) const {
  return ad::affine(tape, readout, lease.of(*head_w_), lease.of(*head_b_));
}

double Backbone::pretrain_and_freeze(std::span<const Sample> corpus, std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  RngPool pool(seed);
  std::mt19937_64 init_rng = pool.stream("init.backbone");
  init(init_rng);

  AdamW opt(cfg_.pretrain_lr, cfg_.weight_decay);
  LrSchedule sched{cfg_.pretrain_lr, cfg_.pretrain_steps, cfg_.warmup_frac};
  std::mt19937_64 order_rng = pool.stream("pretrain.order");
  std::vector<int> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[static_cast<int>(i)] = static_cast<int>(i);
  std::size_t cursor = order.size();  // force shuffle at step 0

  const std::vector<int> no_window;
  double last_loss = 0.0;
  for (int step = 0; step < cfg_.pretrain_steps; ++step) {
    ad::Tape tape;
    Leases lease(tape);
    std::vector<ad::Tensor> logits;
    std::vector<int> labels;
    for (int i = 0; i < cfg_.pretrain_batch; ++i) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const Sample& smp = corpus[static_cast<std::size_t>(order[cursor++])];
      EncodeOut enc = encode(tape, lease, smp.tokens, nullptr, no_window);
      logits.push_back(enc.logits);
      labels.push_back(smp.label);
    }
    ad::Tensor loss = tape.cross_entropy_mean(tape.concat_rows(logits), labels);
    last_loss = loss.values()[0];
    if (!std::isfinite(last_loss))
      throw std::runtime_error("pretraining diverged at step " + std::to_string(step));
    tape.backward(loss);
    opt.step(store_.trainable(), tape, lease, sched.at(step));
  }
  store_.freeze_all();
  return last_loss;
}

}  // namespace spt
