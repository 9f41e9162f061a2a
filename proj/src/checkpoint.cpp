#include "equireg/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "equireg/errors.hpp"

namespace equireg {
namespace {

constexpr char kMagic[4] = {'E', 'Q', 'R', 'G'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void expect(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(data_ + pos_, p, n) != 0) throw IntegrityError("checkpoint: bad magic");
    pos_ += n;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw IntegrityError("checkpoint: truncated");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::size_t checked_width(std::uint32_t v) {
  if (v == 0 || v > (1u << 20)) throw IntegrityError("checkpoint: implausible layer width");
  return v;
}

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(size)));
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params) {
  params.validate();
  const Topology& t = params.topology;
  Writer w;
  w.raw(kMagic, 4);
  w.u32(ModelParams::kFormatVersion);
  w.u32(static_cast<std::uint32_t>(t.encoder.c0));
  w.u32(static_cast<std::uint32_t>(t.encoder.hidden.size()));
  for (std::size_t h : t.encoder.hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(t.encoder.c_out));
  w.u32(t.encoder.graph.mode == GraphMode::knn ? 0u : 1u);
  w.u32(static_cast<std::uint32_t>(t.encoder.graph.k));
  const std::uint64_t radius = std::bit_cast<std::uint64_t>(t.encoder.graph.radius);
  w.u32(static_cast<std::uint32_t>(radius));
  w.u32(static_cast<std::uint32_t>(radius >> 32));
  w.u32(static_cast<std::uint32_t>(t.decoder_hidden.size()));
  for (std::size_t h : t.decoder_hidden) w.u32(static_cast<std::uint32_t>(h));
  params.for_each_tensor([&](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
  });
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

ModelParams deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw IntegrityError("checkpoint: truncated");
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes.data() + body, 4);
  if (tail.u32() != crc32_of(bytes.data(), body)) throw IntegrityError("checkpoint: CRC mismatch");

  Reader r(bytes.data(), body);
  r.expect(kMagic, 4);
  if (r.u32() != ModelParams::kFormatVersion) throw IntegrityError("checkpoint: unsupported format version");

  Topology t;
  t.encoder.c0 = checked_width(r.u32());
  const std::uint32_t n_hidden = r.u32();
  if (n_hidden > 64) throw IntegrityError("checkpoint: implausible hidden layer count");
  t.encoder.hidden.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) t.encoder.hidden.push_back(checked_width(r.u32()));
  t.encoder.c_out = checked_width(r.u32());
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw IntegrityError("checkpoint: unknown graph mode");
  t.encoder.graph.mode = mode == 0 ? GraphMode::knn : GraphMode::ball;
  t.encoder.graph.k = checked_width(r.u32());
  const std::uint64_t lo = r.u32();
  const std::uint64_t hi = r.u32();
  t.encoder.graph.radius = std::bit_cast<double>(lo | (hi << 32));
  const std::uint32_t n_dec = r.u32();
  if (n_dec > 64) throw IntegrityError("checkpoint: implausible decoder layer count");
  t.decoder_hidden.clear();
  for (std::uint32_t i = 0; i < n_dec; ++i) t.decoder_hidden.push_back(checked_width(r.u32()));

  ModelParams params;
  RandomStream unused(0);
  try {
    params = ModelParams::init(t, unused);
  } catch (const std::invalid_argument& e) {
    throw IntegrityError(std::string("checkpoint: invalid topology: ") + e.what());
  }
  if (r.remaining() != params.parameter_count() * 8) throw IntegrityError("checkpoint: weight block size mismatch");
  params.for_each_tensor([&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  });
  try {
    params.validate();
  } catch (const std::invalid_argument& e) {
    throw IntegrityError(std::string("checkpoint: ") + e.what());
  }
  return params;
}

void write_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ModelParams read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace equireg
