#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace qaddr {

using RandomEngine = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive an independent stream seed from a base seed and a tuple of stream
/// coordinates (e.g. shot, site, purpose). Reproducible across thread layouts.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(base);
  for (auto k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

inline RandomEngine make_engine(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  return RandomEngine(derive_seed(base, keys));
}

}  // namespace qaddr
