#pragma once
// Encoder boundary. Pretrained image / point / text encoders are replaced by
// deterministic toy encoders: hand-crafted statistics pushed through a seeded
// orthogonal projection and L2-normalized. Features may instead come from
// external bundles, in which case only the text prototypes are read from a
// sidecar file.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmnr/io.hpp"
#include "mmnr/patching.hpp"
#include "mmnr/tensor.hpp"

namespace mmnr {

enum class EncoderKind { Toy, ExternalBundle };

struct EncoderConfig {
  std::size_t dim = 16;
  std::uint64_t seed = 0;
  EncoderKind kind = EncoderKind::Toy;
  /// Length unit of the point descriptor (scene units).
  double length_scale = 0.05;

  void validate() const {
    if (dim < 4) throw ConfigError("encoder dim must be >= 4");
    if (!(length_scale > 0.0)) throw ConfigError("encoder length_scale must be > 0");
  }
};

/// Seed role tags, XORed into the global seed.
namespace role {
inline constexpr std::uint64_t kImage = 0x494d47;     // "IMG"
inline constexpr std::uint64_t kPoint = 0x505453;     // "PTS"
inline constexpr std::uint64_t kText = 0x545854;      // "TXT"
}  // namespace role

/// out_dim x in_dim matrix with orthonormal columns (out_dim >= in_dim) or
/// orthonormal rows (out_dim < in_dim), from modified Gram-Schmidt on a
/// seeded Gaussian matrix.
class OrthoProjection {
 public:
  OrthoProjection(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed)
      : in_(in_dim), out_(out_dim), m_(in_dim * out_dim) {
    Rng rng(mix_seed(seed));
    for (auto& x : m_) x = rng.normal();
    const bool by_columns = out_ >= in_;
    const std::size_t count = by_columns ? in_ : out_;
    const std::size_t len = by_columns ? out_ : in_;
    auto elem = [&](std::size_t vec, std::size_t i) -> double& {
      return by_columns ? m_[i * in_ + vec] : m_[vec * in_ + i];
    };
    for (std::size_t a = 0; a < count; ++a) {
      for (std::size_t b = 0; b < a; ++b) {
        double p = 0.0;
        for (std::size_t i = 0; i < len; ++i) p += elem(a, i) * elem(b, i);
        for (std::size_t i = 0; i < len; ++i) elem(a, i) -= p * elem(b, i);
      }
      double n = 0.0;
      for (std::size_t i = 0; i < len; ++i) n += elem(a, i) * elem(a, i);
      n = std::sqrt(n);
      for (std::size_t i = 0; i < len; ++i) elem(a, i) /= n;
    }
  }

  Vec apply(VecView x) const {
    Vec y(out_, 0.0);
    for (std::size_t r = 0; r < out_; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < in_; ++c) s += m_[r * in_ + c] * x[c];
      y[r] = s;
    }
    return y;
  }

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

 private:
  std::size_t in_, out_;
  Vec m_;  // row-major out x in
};

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

/// RGB raster with channel values in [0, 1], row-major, interleaved.
struct Raster {
  std::size_t height = 0, width = 0;
  Vec rgb;

  double at(std::size_t y, std::size_t x, std::size_t ch) const { return rgb[(y * width + x) * 3 + ch]; }
};

inline constexpr std::size_t kImageStatDim = 9;

namespace detail {

/// Bias, mean colour, colour spread and a 4-bin gradient orientation
/// histogram of one raster cell. Gradients use in-cell forward differences,
/// so a cell's statistics depend on that cell's pixels only.
inline std::array<double, kImageStatDim> cell_stats(const Raster& r, std::size_t y0, std::size_t x0, std::size_t ch,
                                                    std::size_t cw) {
  std::array<double, kImageStatDim> s{};
  const double n = static_cast<double>(ch * cw);
  double mean[3] = {0, 0, 0};
  for (std::size_t y = y0; y < y0 + ch; ++y)
    for (std::size_t x = x0; x < x0 + cw; ++x)
      for (std::size_t c = 0; c < 3; ++c) mean[c] += r.at(y, x, c);
  for (double& m : mean) m /= n;
  double var = 0.0;
  for (std::size_t y = y0; y < y0 + ch; ++y)
    for (std::size_t x = x0; x < x0 + cw; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = r.at(y, x, c) - mean[c];
        var += d * d;
      }
  var /= 3.0 * n;

  auto lum = [&](std::size_t y, std::size_t x) {
    return 0.299 * r.at(y, x, 0) + 0.587 * r.at(y, x, 1) + 0.114 * r.at(y, x, 2);
  };
  double hist[4] = {0, 0, 0, 0};
  for (std::size_t y = y0; y + 1 < y0 + ch; ++y)
    for (std::size_t x = x0; x + 1 < x0 + cw; ++x) {
      const double gx = lum(y, x + 1) - lum(y, x);
      const double gy = lum(y + 1, x) - lum(y, x);
      const double mag = std::sqrt(gx * gx + gy * gy);
      if (mag == 0.0) continue;
      const double a = std::abs(gx), b = std::abs(gy);
      int bin;
      if (gx * gy >= 0.0)
        bin = b < a ? 0 : 1;  // orientation in [0, 90)
      else
        bin = b >= a ? 2 : 3;  // orientation in [90, 180)
      hist[bin] += mag;
    }
  s[0] = 0.5;
  s[1] = mean[0];
  s[2] = mean[1];
  s[3] = mean[2];
  s[4] = 2.0 * std::sqrt(var);
  for (int i = 0; i < 4; ++i) s[5 + i] = 4.0 * hist[i] / n;
  return s;
}

inline std::optional<Vec> mean_token(const FeatureGrid& g) {
  Vec m(g.dim(), 0.0);
  for (std::size_t i = 0; i < g.cells(); ++i) {
    if (!g.valid(i)) continue;
    const auto c = g.cell(i);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += c[k];
  }
  if (!(norm(m) > 1e-12)) return std::nullopt;
  return normalized(m);
}

}  // namespace detail

/// Normalized mean of the valid cell features, or nullopt if there are none.
inline std::optional<Vec> class_token_of(const FeatureGrid& g) { return detail::mean_token(g); }

/// Toy image encoder: one unit-norm feature per (height/grid_h) x
/// (width/grid_w) raster cell, plus a class token.
inline FeatureGrid encode_image(const Raster& raster, std::size_t grid_h, std::size_t grid_w,
                                const EncoderConfig& cfg) {
  cfg.validate();
  if (grid_h == 0 || grid_w == 0 || raster.height % grid_h != 0 || raster.width % grid_w != 0)
    throw DataError("encode_image: raster does not divide into the patch grid");
  if (raster.rgb.size() != raster.height * raster.width * 3) throw DataError("encode_image: raster size mismatch");
  if (std::all_of(raster.rgb.begin(), raster.rgb.end(), [](double x) { return x == 0.0; }))
    throw DataError("encode_image: degenerate all-zero raster");
  const std::size_t ch = raster.height / grid_h, cw = raster.width / grid_w;
  const OrthoProjection proj(kImageStatDim, cfg.dim, cfg.seed ^ role::kImage);
  Vec data(grid_h * grid_w * cfg.dim);
  for (std::size_t u = 0; u < grid_h; ++u)
    for (std::size_t v = 0; v < grid_w; ++v) {
      const auto s = detail::cell_stats(raster, u * ch, v * cw, ch, cw);
      const Vec f = normalized(proj.apply(s));
      std::copy(f.begin(), f.end(), data.begin() + static_cast<std::ptrdiff_t>((u * grid_w + v) * cfg.dim));
    }
  FeatureGrid g(grid_h, grid_w, cfg.dim, std::move(data), Mask(grid_h * grid_w, 1));
  return g.with_class_token(detail::mean_token(g));
}

// ---------------------------------------------------------------------------
// Point encoder
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPointStatDim = 9;

/// Centroid-relative geometric descriptor of a point set: bias, centroid
/// offset from the bounding-box centre, sqrt covariance eigenvalues, height
/// range and log point count. Points are sorted first so the result does not
/// depend on their order.
inline std::array<double, kPointStatDim> point_descriptor(std::vector<Point3> pts, double length_scale) {
  if (pts.empty()) throw DataError("point_descriptor: empty point set");
  std::sort(pts.begin(), pts.end(), [](const Point3& a, const Point3& b) {
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.z < b.z;
  });
  const double n = static_cast<double>(pts.size());
  Point3 lo = pts.front(), hi = pts.front();
  double cx = 0, cy = 0, cz = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
    cz += p.z;
    lo = Point3{std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = Point3{std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  cx /= n;
  cy /= n;
  cz /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) {
    const Eigen::Vector3d q(p.x - cx, p.y - cy, p.z - cz);
    cov += q * q.transpose();
  }
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = eig.eigenvalues();  // ascending

  const double L = length_scale;
  std::array<double, kPointStatDim> s{};
  s[0] = 0.5;
  s[1] = (cx - 0.5 * (lo.x + hi.x)) / L;
  s[2] = (cy - 0.5 * (lo.y + hi.y)) / L;
  s[3] = (cz - 0.5 * (lo.z + hi.z)) / L;
  s[4] = std::sqrt(std::max(0.0, ev[2])) / L;
  s[5] = std::sqrt(std::max(0.0, ev[1])) / L;
  s[6] = 4.0 * std::sqrt(std::max(0.0, ev[0])) / L;
  s[7] = 2.0 * (hi.z - lo.z) / L;
  s[8] = 0.25 * std::log(n);
  return s;
}

class PointEncoder {
 public:
  explicit PointEncoder(const EncoderConfig& cfg)
      : cfg_((cfg.validate(), cfg)), proj_(kPointStatDim, cfg.dim, cfg.seed ^ role::kPoint) {}

  Vec encode(const std::vector<Point3>& pts) const {
    return normalized(proj_.apply(point_descriptor(pts, cfg_.length_scale)));
  }
  Vec encode(const PointPatch& patch) const {
    if (patch.count() == 0) throw DataError("encode_point_patch: empty patch");
    return encode(patch.points);
  }
  std::size_t dim() const { return cfg_.dim; }

 private:
  EncoderConfig cfg_;
  OrthoProjection proj_;
};

inline Vec encode_point_patch(const PointPatch& patch, const EncoderConfig& cfg) {
  return PointEncoder(cfg).encode(patch);
}

/// Dense per-pixel point features: each valid pixel encodes the valid points
/// of its (2r+1) x (2r+1) neighbourhood. Stands in for the per-point features
/// of a point transformer.
inline FeatureGrid encode_point_grid(const OrganizedPointCloud& cloud, std::size_t radius, const EncoderConfig& cfg) {
  const PointEncoder enc(cfg);
  const std::size_t h = cloud.height(), w = cloud.width();
  Vec data(h * w * cfg.dim, 0.0);
  parallel_for(h, [&](std::size_t u) {
    std::vector<Point3> pts;
    for (std::size_t v = 0; v < w; ++v) {
      if (!cloud.valid(u, v)) continue;
      pts.clear();
      const std::size_t u0 = u >= radius ? u - radius : 0, u1 = std::min(h, u + radius + 1);
      const std::size_t v0 = v >= radius ? v - radius : 0, v1 = std::min(w, v + radius + 1);
      for (std::size_t a = u0; a < u1; ++a)
        for (std::size_t b = v0; b < v1; ++b)
          if (cloud.valid(a, b)) pts.push_back(cloud.at(a, b));
      const Vec f = enc.encode(pts);
      std::copy(f.begin(), f.end(), data.begin() + static_cast<std::ptrdiff_t>((u * w + v) * cfg.dim));
    }
  });
  FeatureGrid g(h, w, cfg.dim, std::move(data), cloud.valid_mask());
  return g.with_class_token(detail::mean_token(g));
}

// ---------------------------------------------------------------------------
// Text prototypes
// ---------------------------------------------------------------------------

struct PromptEnsemble {
  std::vector<std::string> templates;
  std::vector<std::string> normal_states;
  std::vector<std::string> anomalous_states;

  static PromptEnsemble defaults() {
    return PromptEnsemble{
        {"a photo of a {state} {class}.", "a cropped photo of the {state} {class}.",
         "a close-up photo of a {state} {class}.", "a bright photo of a {state} {class}.",
         "a photo of the {state} {class} for visual inspection.", "a photo of a {state} {class} on the line."},
        {"flawless", "perfect"},
        {"damaged", "broken", "with a defect"},
    };
  }

  void validate() const {
    if (templates.empty()) throw ConfigError("prompt ensemble has no templates");
    if (normal_states.empty() || anomalous_states.empty()) throw ConfigError("prompt ensemble has an empty state list");
    for (const auto& t : templates)
      if (t.find("{state}") == std::string::npos || t.find("{class}") == std::string::npos)
        throw ConfigError("template '" + t + "' lacks {state} or {class}");
  }
};

struct TextPrototypes {
  Vec normal;
  Vec anomalous;
  std::string class_name;
};

inline std::string fill_template(std::string t, const std::string& state, const std::string& cls) {
  auto replace = [&](const std::string& key, const std::string& val) {
    for (std::size_t pos = t.find(key); pos != std::string::npos; pos = t.find(key, pos + val.size()))
      t.replace(pos, key.size(), val);
  };
  replace("{state}", state);
  replace("{class}", cls);
  return t;
}

/// Pseudo-embedding of a prompt: the string hash seeds a Gaussian vector.
inline Vec text_vector(const std::string& prompt, const EncoderConfig& cfg) {
  Rng rng(mix_seed(fnv1a(prompt) ^ mix_seed(cfg.seed ^ role::kText)));
  Vec v(cfg.dim);
  for (auto& x : v) x = rng.normal();
  return normalized(v);
}

inline TextPrototypes text_prototypes(const PromptEnsemble& ens, const std::string& class_name,
                                      const EncoderConfig& cfg) {
  ens.validate();
  cfg.validate();
  auto pooled = [&](const std::vector<std::string>& states) {
    Vec m(cfg.dim, 0.0);
    for (const auto& t : ens.templates)
      for (const auto& s : states) {
        const Vec v = text_vector(fill_template(t, s, class_name), cfg);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
      }
    return normalized(m);
  };
  return TextPrototypes{pooled(ens.normal_states), pooled(ens.anomalous_states), class_name};
}

inline void write_prototypes(const TextPrototypes& p, const std::filesystem::path& path) {
  write_pack(TensorPack{{"anomalous", Tensor{{p.anomalous.size()}, p.anomalous}},
                        {"normal", Tensor{{p.normal.size()}, p.normal}}},
             path);
}

inline TextPrototypes read_prototypes(const std::filesystem::path& path, const std::string& class_name) {
  const auto pack = read_pack(path);
  const Tensor& n = require(pack, "normal");
  const Tensor& a = require(pack, "anomalous");
  if (n.shape.size() != 1 || a.shape != n.shape)
    throw ParseError(ParseErrc::ShapeMismatch, "prototype sidecar must hold two equal-length vectors");
  if (!(norm(n.values) > 0.0) || !(norm(a.values) > 0.0)) throw DataError("prototype sidecar has a zero vector");
  return TextPrototypes{n.values, a.values, class_name};
}

}  // namespace mmnr
