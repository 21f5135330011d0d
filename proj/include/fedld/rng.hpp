#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "fedld/linalg.hpp"

namespace fedld {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive combination of seed components, e.g. (seed, round, client).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b * 0x632be59bd9b4e019ULL + 1));
}

/// Symmetric Dirichlet(alpha) over `k` categories.
template <typename Rng>
Vector sample_dirichlet(Rng& rng, std::size_t k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  Vector share(k);
  double total = 0.0;
  for (double& s : share) {
    s = gamma(rng);
    total += s;
  }
  if (!(total > 0.0)) {
    // Every draw underflowed (tiny alpha): the limit puts all mass on one category.
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    share.assign(k, 0.0);
    share[pick(rng)] = 1.0;
    return share;
  }
  for (double& s : share) s /= total;
  return share;
}

}  // namespace fedld
