#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "equireg/encoder.hpp"

namespace equireg {

// EQRG checkpoint, little-endian:
//   "EQRG" | u32 version
//   | u32 c0 | u32 n_hidden | u32 hidden[n_hidden] | u32 c_out
//   | u32 graph_mode (0 knn, 1 ball) | u32 k | u32 radius_lo | u32 radius_hi (f64 bit pattern)
//   | u32 n_decoder_hidden | u32 decoder_hidden[n]
//   | f64 weights, each tensor row-major in ModelParams::for_each_tensor order
//   | u32 CRC32 of every preceding byte

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params);
/// Throws IntegrityError on bad magic, version, CRC or truncated input.
ModelParams deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams read_checkpoint(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

}  // namespace equireg
