#pragma once
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "spt/tape.hpp"

namespace spt {

// A named weight block that outlives any single tape. Each training step
// leases it onto a fresh tape via Tape::leaf and writes updates back here.
struct Parameter {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  bool trainable = true;

  std::size_t size() const { return value.size(); }
  ad::Tensor leaf(ad::Tape& tape, bool requires_grad) const {
    return tape.leaf(shape, value, requires_grad);
  }
};

class ParamStore {
 public:
  Parameter& add(const std::string& name, ad::Shape shape, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();
  std::size_t total_count() const;
  std::size_t trainable_count() const;

  void freeze_all();

  // Deterministic init helpers.
  void fill_normal(Parameter& p, std::mt19937_64& rng, double stddev);
  void fill_glorot(Parameter& p, std::mt19937_64& rng);

  // Byte-for-byte snapshot of every value buffer, for frozen-weight checks.
  std::vector<double> snapshot() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-pass cache of parameter leaves. Modules ask for the tensor belonging
// to a parameter; the first request leases it onto the tape, later requests
// reuse the same node so gradients accumulate in one place. The predicate
// decides which parameters get gradients this pass (inner steps want the
// generators, outer steps want the gates, frozen weights never qualify).
class Leases {
 public:
  using WantGrad = std::function<bool(const Parameter&)>;
  explicit Leases(ad::Tape& tape, WantGrad want_grad = nullptr)
      : tape_(&tape), want_(std::move(want_grad)) {}

  ad::Tensor of(const Parameter& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    const bool rg = want_ ? want_(p) : p.trainable;
    ad::Tensor t = p.leaf(*tape_, rg);
    cache_.emplace(&p, t);
    return t;
  }

  // Lease already taken this pass, or an invalid tensor if the parameter
  // never entered the graph.
  ad::Tensor find(const Parameter& p) const {
    auto it = cache_.find(&p);
    return it == cache_.end() ? ad::Tensor{} : it->second;
  }

  ad::Tape& tape() { return *tape_; }

 private:
  ad::Tape* tape_;
  WantGrad want_;
  std::unordered_map<const Parameter*, ad::Tensor> cache_;
};

// Tensor archive: <stem>.bin holds raw little-endian doubles back to back,
// <stem>.json is the manifest with name, shape and byte offset per tensor.
void save_archive(const ParamStore& store, const std::string& stem, const std::string& config_hash);
// Loads into an existing store with matching names/shapes; returns the
// config hash recorded in the manifest.
std::string load_archive(ParamStore& store, const std::string& stem);
bool archive_exists(const std::string& stem);

}  // namespace spt
