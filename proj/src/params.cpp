#include "spt/params.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace spt {

Parameter& ParamStore::add(const std::string& name, ad::Shape shape, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->shape = std::move(shape);
  p->value.assign(ad::numel(p->shape), 0.0);
  p->trainable = trainable;
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParamStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->trainable) out.push_back(p.get());
  return out;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->size();
  return n;
}

void ParamStore::freeze_all() {
  for (auto& p : params_) p->trainable = false;
}

void ParamStore::fill_normal(Parameter& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p.value) v = dist(rng);
}

void ParamStore::fill_glorot(Parameter& p, std::mt19937_64& rng) {
  double fan_in = 1.0, fan_out = 1.0;
  if (p.shape.size() == 2) {
    fan_in = p.shape[0];
    fan_out = p.shape[1];
  } else if (!p.shape.empty()) {
    fan_in = fan_out = p.shape[0];
  }
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (fan_in + fan_out)));
  for (double& v : p.value) v = dist(rng);
}

std::vector<double> ParamStore::snapshot() const {
  std::vector<double> out;
  out.reserve(total_count());
  for (const auto& p : params_) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

void save_archive(const ParamStore& store, const std::string& stem, const std::string& config_hash) {
  std::filesystem::path bin_path = stem + ".bin";
  if (!bin_path.parent_path().empty()) std::filesystem::create_directories(bin_path.parent_path());
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + bin_path.string());
  nlohmann::json manifest;
  manifest["config_hash"] = config_hash;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const Parameter* p : store.all()) {
    bin.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    nlohmann::json t;
    t["name"] = p->name;
    t["shape"] = p->shape;
    t["offset"] = offset;
    t["count"] = p->value.size();
    manifest["tensors"].push_back(t);
    offset += p->value.size() * sizeof(double);
  }
  bin.close();
  std::ofstream mf(stem + ".json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

bool archive_exists(const std::string& stem) {
  return std::filesystem::exists(stem + ".bin") && std::filesystem::exists(stem + ".json");
}

std::string load_archive(ParamStore& store, const std::string& stem) {
  if (!archive_exists(stem))
    throw std::runtime_error("checkpoint not found: expected " + stem + ".bin and " + stem +
                             ".json (run the pretrain command first)");
  std::ifstream mf(stem + ".json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  std::ifstream bin(stem + ".bin", std::ios::binary);
  for (const auto& t : manifest["tensors"]) {
    const std::string name = t["name"];
    Parameter& p = store.at(name);
    const ad::Shape shape = t["shape"].get<ad::Shape>();
    if (shape != p.shape)
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + ad::shape_str(shape) +
                               ", expected " + ad::shape_str(p.shape));
    bin.seekg(static_cast<std::streamoff>(t["offset"].get<std::size_t>()));
    bin.read(reinterpret_cast<char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("checkpoint data truncated for tensor " + name);
  }
  return manifest.value("config_hash", "");
}

}  // namespace spt
