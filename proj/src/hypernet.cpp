#include "spt/hypernet.hpp"

#include <cmath>
#include <stdexcept>

namespace spt {

HyperNet HyperNet::create(const RunConfig& cfg) {
  cfg.validate();
  HyperNet hn;
  hn.cfg_ = cfg;
  hn.alpha_ = &hn.store_.add("gates.alpha", {cfg.layers + 1, 1});
  std::fill(hn.alpha_->value.begin(), hn.alpha_->value.end(), 0.0);
  for (int p = 0; p <= cfg.layers; ++p)
    hn.gens_.push_back(PromptGenerator::create(hn.store_, "pg" + std::to_string(p), cfg.d_model,
                                               cfg.bottleneck, cfg.phm_n, cfg.prompt_len,
                                               cfg.prompt_act));
  return hn;
}

void HyperNet::init(RngPool& pool) {
  std::fill(alpha_->value.begin(), alpha_->value.end(), 0.0);
  for (std::size_t p = 0; p < gens_.size(); ++p) {
    std::mt19937_64 rng = pool.stream("init.pg" + std::to_string(p));
    gens_[p].init(rng);
  }
}

ad::Tensor HyperNet::gates(ad::Tape& tape, Leases& lease, Reparam mode) const {
  ad::Tensor a = tape.sigmoid(lease.of(*alpha_));
  if (mode == Reparam::off) return a;
  ad::Tensor sum = tape.sum_all(a);
  if (sum.values()[0] <= 0.0) throw std::runtime_error("gate sum not positive");
  ad::Tensor num = mode == Reparam::detached ? tape.detach(sum) : sum;
  return tape.mul(a, tape.div(num, sum));
}

std::vector<double> HyperNet::gate_values() const {
  std::vector<double> v(alpha_->value.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-alpha_->value[i]));
  return v;
}

std::vector<double> HyperNet::alpha_values() const { return alpha_->value; }

std::vector<int> HyperNet::sample_mask(std::mt19937_64& rng) const {
  std::bernoulli_distribution keep(cfg_.mask_keep);
  std::vector<int> m(static_cast<std::size_t>(points()));
  for (auto& b : m) b = keep(rng) ? 1 : 0;
  return m;
}

Backbone::Injector HyperNet::injector(ad::Tape& tape, Leases& lease, ad::Tensor gate_col,
                                      std::vector<int> mask) const {
  if (static_cast<int>(mask.size()) != points())
    throw std::invalid_argument("mask length " + std::to_string(mask.size()) + ", expected " +
                                std::to_string(points()));
  if (gate_col.rows() != points() || gate_col.cols() != 1)
    throw std::invalid_argument("gate column of shape " + ad::shape_str(gate_col.shape()));
  ad::Tape* tp = &tape;
  Leases* ls = &lease;
  return [this, tp, ls, gate_col, mask = std::move(mask)](
             int layer, ad::Tensor token_h, ad::Tensor slots) -> std::optional<Backbone::Injection> {
    if (mask[static_cast<std::size_t>(layer)] == 0) return std::nullopt;
    ad::Tensor fresh = gens_[static_cast<std::size_t>(layer)].generate(*tp, *ls, token_h);
    ad::Tensor c = tp->mul(tp->slice_rows(gate_col, layer, layer + 1), tp->scalar(cfg_.tau));
    ad::Tensor keep = tp->sub(tp->scalar(1.0), c);
    ad::Tensor mixed = tp->add(tp->mul(slots, keep), tp->mul(fresh, c));
    return Backbone::Injection{mixed, true};
  };
}

HyperNet::Losses HyperNet::batch_losses(ad::Tape& tape, Leases& lease, const Backbone& bb,
                                        std::span<const Sample> batch, std::span<const int> window,
                                        Reparam mode, const std::vector<int>& mask,
                                        double lambda_c) const {
  if (batch.empty()) throw std::invalid_argument("batch_losses: empty batch");
  ad::Tensor gate_col = gates(tape, lease, mode);
  Backbone::Injector masked_inj = injector(tape, lease, gate_col, mask);

  std::vector<ad::Tensor> logits, readouts_masked, readouts_plain;
  std::vector<int> labels;
  for (const Sample& s : batch) {
    Backbone::EncodeOut enc = bb.encode(tape, lease, s.tokens, masked_inj, window);
    logits.push_back(enc.logits);
    readouts_masked.push_back(enc.readout);
    labels.push_back(s.label);
  }

  Losses out;
  out.task = tape.cross_entropy_mean(tape.concat_rows(logits), labels);
  out.task_value = out.task.values()[0];
  if (lambda_c > 0.0) {
    Backbone::Injector plain_inj =
        injector(tape, lease, gate_col, std::vector<int>(static_cast<std::size_t>(points()), 1));
    for (const Sample& s : batch)
      readouts_plain.push_back(bb.encode(tape, lease, s.tokens, plain_inj, window).readout);
    out.consistency = ad::mse_all(tape, tape.concat_rows(readouts_masked),
                                  tape.concat_rows(readouts_plain));
    out.consistency_value = out.consistency.values()[0];
    out.total = tape.add(out.task, tape.mul(out.consistency, tape.scalar(lambda_c)));
  } else {
    out.total = out.task;
  }
  out.total_value = out.total.values()[0];
  return out;
}

std::vector<double> gate_grad_closed_form(const std::vector<double>& alpha,
                                          const std::vector<double>& sens) {
  if (alpha.size() != sens.size())
    throw std::invalid_argument("closed form: alpha and sensitivity sizes differ");
  std::vector<double> a(alpha.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = 1.0 / (1.0 + std::exp(-alpha[i]));
    sum += a[i];
  }
  double avg = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) avg += a[k] / sum * sens[k];
  std::vector<double> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = a[i] * (1.0 - a[i]) * (sens[i] - avg);
  return g;
}

}  // namespace spt
