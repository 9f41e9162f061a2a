#include "equireg/cloud_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "equireg/errors.hpp"

namespace equireg {
namespace {

constexpr char kMagic[4] = {'E', 'Q', 'P', 'C'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

nlohmann::json mat_json(const Mat3& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) rows.push_back({m(i, 0), m(i, 1), m(i, 2)});
  return rows;
}

Mat3 mat_from_json(const nlohmann::json& j) {
  Mat3 m;
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("shape json: matrix must be 3 x 3");
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_array() || j[i].size() != 3) throw std::invalid_argument("shape json: matrix must be 3 x 3");
    for (int k = 0; k < 3; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_pcb(const Points& points) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.reserve(12 + 24 * static_cast<std::size_t>(points.rows()));
  put_u32(out, kPcbVersion);
  put_u32(out, static_cast<std::uint32_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (int d = 0; d < 3; ++d) put_u64(out, std::bit_cast<std::uint64_t>(points(i, d)));
  }
  return out;
}

Points deserialize_pcb(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IntegrityError("pcb: bad magic");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kPcbVersion) throw IntegrityError("pcb: unsupported version " + std::to_string(version));
  const auto n = static_cast<std::size_t>(get_le(bytes.data() + 8, 4));
  if (bytes.size() != 12 + 24 * n) throw IntegrityError("pcb: length does not match point count");
  Points points(static_cast<Eigen::Index>(n), 3);
  const std::uint8_t* p = bytes.data() + 12;
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d, p += 8) points(static_cast<Eigen::Index>(i), d) = std::bit_cast<double>(get_le(p, 8));
  }
  return points;
}

std::string format_xyz(const Points& points) {
  std::string out;
  char buf[32];
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (int d = 0; d < 3; ++d) {
      const auto res = std::to_chars(buf, buf + sizeof buf, points(i, d), std::chars_format::general, 17);
      out.append(buf, res.ptr);
      out.push_back(d == 2 ? '\n' : ' ');
    }
  }
  return out;
}

Points parse_xyz(const std::string& text) {
  std::vector<double> values;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double x, y, z;
    std::string extra;
    if (!(ls >> x >> y >> z) || (ls >> extra)) {
      throw IntegrityError("xyz: malformed line " + std::to_string(lineno));
    }
    values.insert(values.end(), {x, y, z});
  }
  Points points(static_cast<Eigen::Index>(values.size() / 3), 3);
  for (std::size_t i = 0; i < values.size(); ++i) points(static_cast<Eigen::Index>(i / 3), static_cast<int>(i % 3)) = values[i];
  return points;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_cloud(const std::filesystem::path& path, const Points& points) {
  const auto ext = path.extension();
  if (ext == ".pcb") {
    write_bytes(path, serialize_pcb(points));
  } else if (ext == ".xyz") {
    const std::string text = format_xyz(points);
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  } else {
    throw std::invalid_argument("unknown cloud extension '" + ext.string() + "' (expected .pcb or .xyz)");
  }
}

Points read_cloud(const std::filesystem::path& path) {
  const auto ext = path.extension();
  if (ext != ".pcb" && ext != ".xyz") {
    throw std::invalid_argument("unknown cloud extension '" + ext.string() + "' (expected .pcb or .xyz)");
  }
  const auto bytes = read_bytes(path);
  if (ext == ".pcb") return deserialize_pcb(bytes);
  return parse_xyz(std::string(bytes.begin(), bytes.end()));
}

nlohmann::json shape_to_json(const ShapeModel& shape) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : shape.parts()) {
    parts.push_back({{"kind", to_string(p.kind)},
                     {"dims", {p.dims.x(), p.dims.y(), p.dims.z()}},
                     {"center", {p.center.x(), p.center.y(), p.center.z()}},
                     {"orientation", mat_json(p.orientation.matrix())}});
  }
  return {{"id", shape.id()}, {"kind", shape.kind_name()}, {"pose", mat_json(shape.pose().matrix())}, {"parts", parts}};
}

ShapeModel shape_from_json(const nlohmann::json& j) {
  std::vector<Primitive> parts;
  for (const auto& pj : j.at("parts")) {
    Primitive p;
    p.kind = primitive_kind_from_string(pj.at("kind").get<std::string>());
    const auto dims = pj.at("dims").get<std::vector<double>>();
    const auto center = pj.at("center").get<std::vector<double>>();
    if (dims.size() != 3 || center.size() != 3) throw std::invalid_argument("shape json: dims and center need 3 values");
    p.dims = Eigen::Vector3d(dims[0], dims[1], dims[2]);
    p.center = Vec3(center[0], center[1], center[2]);
    p.orientation = Rotation(mat_from_json(pj.at("orientation")));
    parts.push_back(p);
  }
  if (parts.empty()) throw std::invalid_argument("shape json: no parts");
  const auto id = j.value("id", std::uint64_t{0});
  ShapeModel shape = parts.size() == 1 ? ShapeModel::single(parts.front(), id) : ShapeModel::make_union(parts, id);
  if (j.contains("pose")) shape = shape.posed(Rotation(mat_from_json(j.at("pose"))));
  return shape;
}

}  // namespace equireg
