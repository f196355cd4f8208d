#pragma once

#include <cstdint>
#include <random>

namespace decfl {

using RngEngine = std::mt19937_64;

/// Stream purposes. Each purpose gets a disjoint family of streams so that,
/// e.g., minibatch selection never correlates with initialization noise.
enum class StreamPurpose : std::uint64_t {
  minibatch = 1,
  initialization = 2,
  graph = 3,
  data = 4,
  partition = 5,
  probe = 6,
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation: the engine for (seed, purpose, node,
/// round) depends only on those four values, never on evaluation order.
inline RngEngine make_stream(std::uint64_t seed, StreamPurpose purpose,
                             std::uint64_t node = 0, std::uint64_t round = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  h = splitmix64(h ^ (node + 0x632be59bd9b4e019ULL));
  h = splitmix64(h ^ (round + 0x8cb92ba72f3d8dd7ULL));
  return RngEngine{h};
}

}  // namespace decfl
