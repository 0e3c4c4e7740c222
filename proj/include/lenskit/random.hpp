#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace lenskit {

// All samplers draw from mt19937_64 through these helpers so that results
// depend only on the engine's (standardized) output sequence, not on the
// standard library's distribution implementations.
using Rng = std::mt19937_64;

// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n), n > 0. Rejection sampling, no modulo bias.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Derives an independent stream seed, e.g. one per document.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

std::string rng_state(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace lenskit
