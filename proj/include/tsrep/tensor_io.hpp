#pragma once

// TSB1 binary tensor container:
//   "TSB1" | u8 dtype (0 = f32) | u8 rank | rank x u64 LE extents | LE payload

#include <filesystem>
#include <iosfwd>
#include <string>

#include "tsrep/tensor.hpp"

namespace tsrep {

inline constexpr char kTsbMagic[4] = {'T', 'S', 'B', '1'};
inline constexpr std::uint8_t kDtypeF32 = 0;

void write_tsb(std::ostream& os, const Tensor& t);
Tensor read_tsb(std::istream& is);

void save_tsb(const std::filesystem::path& path, const Tensor& t);
Tensor load_tsb(const std::filesystem::path& path);

// Serialized TSB1 bytes, handy for hashing and byte-level comparisons.
std::string tsb_bytes(const Tensor& t);

}  // namespace tsrep
