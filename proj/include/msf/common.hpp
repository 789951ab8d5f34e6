#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace msf {

// Error taxonomy. Every failure surfaces as one of these with a one-line,
// actionable message.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operator shape violations (rank, extent, channel mismatches).
struct shape_error : error {
  using error::error;
};

// Non-finite values produced by a numeric kernel.
struct value_error : error {
  using error::error;
};

// Bad configuration (invalid knob combinations, unknown keys).
struct config_error : error {
  using error::error;
};

// File format / filesystem failures.
struct io_error : error {
  using error::error;
};

template <typename T>
inline void ensure_finite(std::span<const T> values, const char* op_name) {
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw value_error(std::string(op_name) + ": produced a non-finite value");
    }
  }
}

// Deterministic 64-bit stream mixer (splitmix64). Used to derive
// independent sub-seeds from (run seed, epoch, sample, ...) tuples so that
// parallel sample loading cannot perturb the random stream.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t h = mix_seed(seed);
  h = mix_seed(h ^ a);
  h = mix_seed(h ^ b);
  h = mix_seed(h ^ c);
  return h;
}

using Rng = std::mt19937_64;

}  // namespace msf
