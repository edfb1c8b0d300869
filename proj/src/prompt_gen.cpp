#include "spt/prompt_gen.hpp"

#include <stdexcept>

namespace spt {

std::vector<int> pooling_segments(int t, int l) {
  if (t < l) throw std::invalid_argument("pooling_segments: fewer rows than segments");
  std::vector<int> sizes(static_cast<std::size_t>(l), t / l);
  for (int k = 0; k < t % l; ++k) sizes[static_cast<std::size_t>(k)] += 1;
  return sizes;
}

PromptGenerator PromptGenerator::create(ParamStore& store, const std::string& name, int d_model,
                                        int bottleneck, int phm_n, int prompt_len,
                                        const std::string& act) {
  PromptGenerator pg;
  pg.d_model = d_model;
  pg.bottleneck = bottleneck;
  pg.prompt_len = prompt_len;
  pg.act = act;
  pg.down = PhmLinear::create(store, name + ".down", d_model, bottleneck, phm_n);
  pg.up = PhmLinear::create(store, name + ".up", bottleneck, d_model, phm_n);
  return pg;
}

void PromptGenerator::init(std::mt19937_64& rng) {
  down.init(rng);
  up.init(rng);
}

ad::Tensor PromptGenerator::generate(ad::Tape& tape, Leases& lease, ad::Tensor token_h) const {
  ad::Tensor z = down.forward(tape, lease, token_h);  // T x m
  int t = z.rows();
  if (t < prompt_len) {
    // Too few positions to fill every segment: repeat the final row.
    std::vector<ad::Tensor> parts{z};
    ad::Tensor last = tape.slice_rows(z, t - 1, t);
    for (int i = t; i < prompt_len; ++i) parts.push_back(last);
    z = tape.concat_rows(parts);
    t = prompt_len;
  }
  ad::Tensor pooled = tape.segment_mean_rows(z, pooling_segments(t, prompt_len));
  ad::Tensor g = pooled;
  if (act == "tanh") g = tape.tanh(pooled);
  else if (act == "relu") g = tape.relu(pooled);
  else if (act != "identity") throw std::invalid_argument("unknown activation: " + act);
  return up.forward(tape, lease, g);  // prompt_len x d
}

}  // namespace spt
