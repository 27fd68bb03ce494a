#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace tsrep {

// 64-bit FNV-1a; stable across platforms, used for config digests and
// weight fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t value);

// SplitMix64 finalizer, used to derive independent stream seeds from
// (seed, index) pairs.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0);

}  // namespace tsrep
