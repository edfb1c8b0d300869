#pragma once
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace spt {

// Every run is driven by one user-visible seed. Components never share a
// generator: they ask for a named substream ("data", "init", "masks", ...)
// so that adding draws in one place cannot reshuffle another.
class RngPool {
 public:
  explicit RngPool(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Deterministic 64-bit stream id for (seed, name).
  std::uint64_t stream_id(std::string_view name) const;

  std::mt19937_64 stream(std::string_view name) const {
    return std::mt19937_64(stream_id(name));
  }

 private:
  std::uint64_t seed_;
};

// splitmix64; used for seed mixing and for content hashes of config text.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);
std::string hex64(std::uint64_t v);

}  // namespace spt
