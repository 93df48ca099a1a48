#pragma once
// Binary storage. Two little-endian layouts share the float-blob convention
// (row-major float32 payloads):
//
//   feature bundle (.mmnr)
//     "MMNR" | u16 version | u32 H, W, D_rgb, D_pc | u8 flags | u16 id length
//     | id bytes | f32 rgb cells | [f32 rgb token] | f32 pc cells
//     | [f32 pc token] | f32 xyz positions | bit rows: rgb valid, pc valid,
//     cloud valid, [gt mask]
//
//     flags: bit0 rgb class token, bit1 pc class token, bit2 gt mask,
//            bit3 label anomalous. Bit rows are ceil(W/8) bytes, MSB first.
//
//   tensor pack (.mmnr, magic "MMNP"), used for maps, prototypes, banks and
//   fusion heads
//     "MMNP" | u16 version | u32 count | per tensor: u16 name length, name,
//     u8 rank, u32 dims[rank] | f32 blobs in declaration order

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmnr/tensor.hpp"

namespace mmnr {

enum class Label : std::uint8_t { Normal = 0, Anomalous = 1 };

struct FeatureBundle {
  FeatureGrid rgb_grid;
  FeatureGrid pc_grid;
  OrganizedPointCloud cloud;
  std::string sample_id;
  Label label = Label::Normal;
  std::optional<Mask> gt_mask;

  std::size_t height() const { return cloud.height(); }
  std::size_t width() const { return cloud.width(); }

  void validate() const {
    const std::size_t h = cloud.height(), w = cloud.width();
    if (rgb_grid.height() != h || rgb_grid.width() != w || pc_grid.height() != h || pc_grid.width() != w)
      throw DataError("FeatureBundle '" + sample_id + "': grid shapes differ from cloud");
    if (gt_mask) {
      if (gt_mask->size() != h * w) throw DataError("FeatureBundle '" + sample_id + "': gt mask shape mismatch");
      if (label == Label::Normal)
        for (auto b : *gt_mask)
          if (b) throw DataError("FeatureBundle '" + sample_id + "': normal sample with defect pixels");
    }
  }

  bool operator==(const FeatureBundle&) const = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t x) { buf_.push_back(x); }
  void u16(std::uint16_t x) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
  }
  void u32(std::uint32_t x) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
  }
  void f32(double x) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(x))); }
  void f32s(VecView xs) {
    for (double x : xs) f32(x);
  }
  void bit_rows(const Mask& m, std::size_t h, std::size_t w) {
    const std::size_t row_bytes = (w + 7) / 8;
    for (std::size_t u = 0; u < h; ++u) {
      std::vector<std::uint8_t> row(row_bytes, 0);
      for (std::size_t v = 0; v < w; ++v)
        if (m[u * w + v]) row[v / 8] |= static_cast<std::uint8_t>(0x80u >> (v % 8));
      bytes(row.data(), row.size());
    }
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  std::size_t remaining() const { return buf_.size() - pos_; }
  void need(std::size_t n, ParseErrc code, const char* what) const {
    if (remaining() < n) throw ParseError(code, what);
  }
  std::uint8_t u8() {
    need(1, ParseErrc::MalformedHeader, "unexpected end of header");
    return buf_[pos_++];
  }
  std::uint16_t u16() {
    need(2, ParseErrc::MalformedHeader, "unexpected end of header");
    std::uint16_t x = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return x;
  }
  std::uint32_t u32() {
    need(4, ParseErrc::MalformedHeader, "unexpected end of header");
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return x;
  }
  // Payload readers assume the caller validated the total length.
  double f32() {
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return static_cast<double>(std::bit_cast<float>(x));
  }
  Vec f32s(std::size_t n) {
    Vec out(n);
    for (auto& x : out) x = f32();
    return out;
  }
  std::string str(std::size_t n) {
    need(n, ParseErrc::MalformedHeader, "unexpected end of header");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Mask bit_rows(std::size_t h, std::size_t w) {
    const std::size_t row_bytes = (w + 7) / 8;
    Mask m(h * w, 0);
    for (std::size_t u = 0; u < h; ++u) {
      for (std::size_t v = 0; v < w; ++v) m[u * w + v] = (buf_[pos_ + v / 8] & (0x80u >> (v % 8))) ? 1 : 0;
      pos_ += row_bytes;
    }
    return m;
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

constexpr std::array<char, 4> kBundleMagic{'M', 'M', 'N', 'R'};
constexpr std::array<char, 4> kPackMagic{'M', 'M', 'N', 'P'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::uint64_t kMaxPayloadBytes = 1ull << 34;

enum BundleFlags : std::uint8_t {
  kRgbToken = 1u << 0,
  kPcToken = 1u << 1,
  kGtMask = 1u << 2,
  kAnomalous = 1u << 3,
};

inline void check_magic(ByteReader& r, const std::array<char, 4>& magic) {
  if (r.remaining() < 4) throw ParseError(ParseErrc::MagicMismatch, "file shorter than magic");
  const std::string m = r.str(4);
  if (m != std::string(magic.begin(), magic.end())) throw ParseError(ParseErrc::MagicMismatch, "bad magic bytes");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_bundle(const FeatureBundle& b) {
  b.validate();
  const std::size_t h = b.height(), w = b.width();
  if (b.sample_id.size() > 0xFFFF) throw DataError("sample id too long");
  detail::ByteWriter out;
  out.bytes(detail::kBundleMagic.data(), 4);
  out.u16(detail::kFormatVersion);
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  out.u32(static_cast<std::uint32_t>(b.rgb_grid.dim()));
  out.u32(static_cast<std::uint32_t>(b.pc_grid.dim()));
  std::uint8_t flags = 0;
  if (b.rgb_grid.class_token()) flags |= detail::kRgbToken;
  if (b.pc_grid.class_token()) flags |= detail::kPcToken;
  if (b.gt_mask) flags |= detail::kGtMask;
  if (b.label == Label::Anomalous) flags |= detail::kAnomalous;
  out.u8(flags);
  out.u16(static_cast<std::uint16_t>(b.sample_id.size()));
  out.bytes(b.sample_id.data(), b.sample_id.size());
  out.f32s(b.rgb_grid.data());
  if (b.rgb_grid.class_token()) out.f32s(*b.rgb_grid.class_token());
  out.f32s(b.pc_grid.data());
  if (b.pc_grid.class_token()) out.f32s(*b.pc_grid.class_token());
  for (const auto& p : b.cloud.positions()) {
    out.f32(p.x);
    out.f32(p.y);
    out.f32(p.z);
  }
  out.bit_rows(b.rgb_grid.valid_mask(), h, w);
  out.bit_rows(b.pc_grid.valid_mask(), h, w);
  out.bit_rows(b.cloud.valid_mask(), h, w);
  if (b.gt_mask) out.bit_rows(*b.gt_mask, h, w);
  return out.buffer();
}

inline FeatureBundle decode_bundle(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  detail::check_magic(in, detail::kBundleMagic);
  const std::uint16_t version = in.u16();
  if (version != detail::kFormatVersion)
    throw ParseError(ParseErrc::UnsupportedVersion, "version " + std::to_string(version));
  const std::uint64_t h = in.u32(), w = in.u32(), d_rgb = in.u32(), d_pc = in.u32();
  const std::uint8_t flags = in.u8();
  if (h == 0 || w == 0 || d_rgb == 0 || d_pc == 0) throw ParseError(ParseErrc::MalformedHeader, "zero dimension");
  if (flags & 0xF0u) throw ParseError(ParseErrc::MalformedHeader, "unknown flag bits");
  const std::uint16_t id_len = in.u16();
  std::string id = in.str(id_len);

  const std::uint64_t cells = h * w;
  const std::uint64_t floats = cells * (d_rgb + d_pc + 3) + ((flags & detail::kRgbToken) ? d_rgb : 0) +
                               ((flags & detail::kPcToken) ? d_pc : 0);
  const std::uint64_t row_bytes = (w + 7) / 8;
  const std::uint64_t bit_bytes = row_bytes * h * ((flags & detail::kGtMask) ? 4 : 3);
  if (floats > detail::kMaxPayloadBytes / 4) throw ParseError(ParseErrc::MalformedHeader, "implausible shape");
  const std::uint64_t payload = floats * 4 + bit_bytes;
  if (in.remaining() != payload)
    throw ParseError(ParseErrc::TruncatedBlob, "payload is " + std::to_string(in.remaining()) + " bytes, expected " +
                                                   std::to_string(payload));

  Vec rgb = in.f32s(cells * d_rgb);
  std::optional<Vec> rgb_token;
  if (flags & detail::kRgbToken) rgb_token = in.f32s(d_rgb);
  Vec pc = in.f32s(cells * d_pc);
  std::optional<Vec> pc_token;
  if (flags & detail::kPcToken) pc_token = in.f32s(d_pc);
  std::vector<Point3> pos(cells);
  for (auto& p : pos) {
    p.x = in.f32();
    p.y = in.f32();
    p.z = in.f32();
  }
  Mask rgb_valid = in.bit_rows(h, w);
  Mask pc_valid = in.bit_rows(h, w);
  Mask cloud_valid = in.bit_rows(h, w);
  std::optional<Mask> gt;
  if (flags & detail::kGtMask) gt = in.bit_rows(h, w);

  FeatureBundle b{
      FeatureGrid(h, w, d_rgb, std::move(rgb), std::move(rgb_valid), std::move(rgb_token)),
      FeatureGrid(h, w, d_pc, std::move(pc), std::move(pc_valid), std::move(pc_token)),
      OrganizedPointCloud(h, w, std::move(pos), std::move(cloud_valid)),
      std::move(id),
      (flags & detail::kAnomalous) ? Label::Anomalous : Label::Normal,
      std::move(gt),
  };
  try {
    b.validate();
  } catch (const DataError& e) {
    throw ParseError(ParseErrc::ShapeMismatch, e.what());
  }
  return b;
}

inline void write_bundle(const FeatureBundle& b, const std::filesystem::path& path) {
  detail::write_file(path, encode_bundle(b));
}

inline FeatureBundle read_bundle(const std::filesystem::path& path) { return decode_bundle(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Tensor packs
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<std::size_t> shape;
  Vec values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
  bool operator==(const Tensor&) const = default;
};

/// Named float32 tensors, written in name order.
using TensorPack = std::map<std::string, Tensor>;

inline std::vector<std::uint8_t> encode_pack(const TensorPack& pack) {
  detail::ByteWriter out;
  out.bytes(detail::kPackMagic.data(), 4);
  out.u16(detail::kFormatVersion);
  out.u32(static_cast<std::uint32_t>(pack.size()));
  for (const auto& [name, t] : pack) {
    if (t.values.size() != t.numel()) throw DataError("tensor '" + name + "': shape/value mismatch");
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.bytes(name.data(), name.size());
    out.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) out.u32(static_cast<std::uint32_t>(d));
  }
  for (const auto& [name, t] : pack) out.f32s(t.values);
  return out.buffer();
}

inline TensorPack decode_pack(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  detail::check_magic(in, detail::kPackMagic);
  const std::uint16_t version = in.u16();
  if (version != detail::kFormatVersion)
    throw ParseError(ParseErrc::UnsupportedVersion, "version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  std::vector<std::pair<std::string, std::vector<std::size_t>>> headers;
  std::uint64_t floats = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = in.u16();
    std::string name = in.str(len);
    const std::uint8_t rank = in.u8();
    std::vector<std::size_t> shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = in.u32();
      n *= d;
      if (n > detail::kMaxPayloadBytes / 4) throw ParseError(ParseErrc::MalformedHeader, "implausible shape");
    }
    floats += n;
    if (floats > detail::kMaxPayloadBytes / 4) throw ParseError(ParseErrc::MalformedHeader, "implausible shape");
    headers.emplace_back(std::move(name), std::move(shape));
  }
  if (in.remaining() != floats * 4)
    throw ParseError(ParseErrc::TruncatedBlob, "payload is " + std::to_string(in.remaining()) + " bytes, expected " +
                                                   std::to_string(floats * 4));
  TensorPack pack;
  for (auto& [name, shape] : headers) {
    Tensor t{shape, {}};
    t.values = in.f32s(t.numel());
    if (!pack.emplace(name, std::move(t)).second) throw ParseError(ParseErrc::MalformedHeader, "duplicate " + name);
  }
  return pack;
}

inline void write_pack(const TensorPack& pack, const std::filesystem::path& path) {
  detail::write_file(path, encode_pack(pack));
}

inline TensorPack read_pack(const std::filesystem::path& path) { return decode_pack(detail::read_file(path)); }

inline const Tensor& require(const TensorPack& pack, const std::string& name) {
  auto it = pack.find(name);
  if (it == pack.end()) throw ParseError(ParseErrc::ShapeMismatch, "missing tensor '" + name + "'");
  return it->second;
}

inline Tensor map_tensor(const ScoreMap& m) { return Tensor{{m.height(), m.width()}, m.scores()}; }

inline void write_map(const ScoreMap& m, const std::filesystem::path& path) {
  write_pack(TensorPack{{"map", map_tensor(m)}}, path);
}

inline ScoreMap read_map(const std::filesystem::path& path) {
  const auto pack = read_pack(path);
  const Tensor& t = require(pack, "map");
  if (t.shape.size() != 2) throw ParseError(ParseErrc::ShapeMismatch, "map tensor must be rank 2");
  return ScoreMap(t.shape[0], t.shape[1], t.values);
}

}  // namespace mmnr
