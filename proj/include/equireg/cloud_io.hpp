#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "equireg/shapes.hpp"

namespace equireg {

// .xyz: one "x y z" line per point, 17 significant digits.
// .pcb: "EQPC" | u32 version | u32 N | 3N little-endian f64.

constexpr std::uint32_t kPcbVersion = 1;

std::vector<std::uint8_t> serialize_pcb(const Points& points);
/// Throws IntegrityError on bad magic, version or length.
Points deserialize_pcb(const std::vector<std::uint8_t>& bytes);

std::string format_xyz(const Points& points);
/// Throws IntegrityError on a malformed line.
Points parse_xyz(const std::string& text);

/// Dispatches on the extension (.pcb or .xyz). Throws std::invalid_argument
/// for other extensions and std::runtime_error on IO failure.
void write_cloud(const std::filesystem::path& path, const Points& points);
Points read_cloud(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

nlohmann::json shape_to_json(const ShapeModel& shape);
ShapeModel shape_from_json(const nlohmann::json& j);

}  // namespace equireg
