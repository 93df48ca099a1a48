#pragma once
// Point feature alignment: sparse center features are spread back onto every
// point by inverse distance weighting and laid out on the image plane, so the
// two modalities share one patch grid.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "mmnr/io.hpp"
#include "mmnr/tensor.hpp"

namespace mmnr {

struct CenterFeatures {
  std::vector<Point3> centers;
  std::vector<Vec> features;

  std::size_t size() const { return centers.size(); }
  std::size_t dim() const { return features.empty() ? 0 : features.front().size(); }

  void validate() const {
    if (centers.empty()) throw DataError("CenterFeatures: K must be >= 1");
    if (features.size() != centers.size()) throw DataError("CenterFeatures: centers and features differ in count");
    for (const auto& c : centers)
      if (!std::isfinite(c.x) || !std::isfinite(c.y) || !std::isfinite(c.z))
        throw DataError("CenterFeatures: non-finite center");
    for (const auto& f : features)
      if (f.size() != dim() || !all_finite(f)) throw DataError("CenterFeatures: bad feature vector");
  }
};

inline double point_distance(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Farthest point sampling over the valid pixels of a cloud. Starts from the
/// first valid pixel in scanline order; returns pixel indices.
inline std::vector<std::size_t> farthest_point_sample(const OrganizedPointCloud& cloud, std::size_t k) {
  std::vector<std::size_t> pix;
  for (std::size_t i = 0; i < cloud.pixels(); ++i)
    if (cloud.valid(i)) pix.push_back(i);
  if (pix.empty()) throw DataError("farthest_point_sample: cloud has no valid points");
  k = std::min(k, pix.size());
  std::vector<double> dist(pix.size(), std::numeric_limits<double>::infinity());
  std::vector<std::size_t> out;
  std::size_t cur = 0;
  for (;;) {
    out.push_back(pix[cur]);
    if (out.size() == k) break;
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t j = 0; j < pix.size(); ++j) {
      dist[j] = std::min(dist[j], point_distance(cloud.at(pix[j]), cloud.at(pix[cur])));
      if (dist[j] > best_d) {
        best_d = dist[j];
        best = j;
      }
    }
    cur = best;
  }
  return out;
}

/// Centers at FPS pixels carrying the feature of the grid cell under them.
inline CenterFeatures sample_centers(const OrganizedPointCloud& cloud, const FeatureGrid& grid, std::size_t k) {
  if (grid.height() != cloud.height() || grid.width() != cloud.width())
    throw DataError("sample_centers: grid and cloud dims differ");
  CenterFeatures cf;
  for (std::size_t i : farthest_point_sample(cloud, k)) {
    cf.centers.push_back(cloud.at(i));
    const auto c = grid.cell(i);
    cf.features.emplace_back(c.begin(), c.end());
  }
  return cf;
}

inline constexpr double kIdwEpsilon = 1e-8;
inline constexpr std::size_t kIdwNeighbors = 8;

/// Inverse distance weights of the nearest min(K, neighbors) centers,
/// normalized to sum to 1. Ties in distance go to the lower center index.
inline std::vector<std::pair<std::size_t, double>> idw_weights(const Point3& p, const std::vector<Point3>& centers,
                                                               double eps = kIdwEpsilon,
                                                               std::size_t neighbors = kIdwNeighbors) {
  if (centers.empty()) throw DataError("idw_weights: K must be >= 1");
  if (!(eps > 0.0)) throw ConfigError("idw_weights: epsilon must be > 0");
  std::vector<std::pair<double, std::size_t>> d(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) d[i] = {point_distance(p, centers[i]), i};
  const std::size_t n = std::min(std::max<std::size_t>(1, neighbors), centers.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), d.end());
  std::vector<std::pair<std::size_t, double>> w(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = {d[i].second, 1.0 / (d[i].first + eps)};
    total += w[i].second;
  }
  for (auto& x : w) x.second /= total;
  return w;
}

/// Interpolated features of the valid points, keyed by pixel index.
struct PointFeatures {
  std::size_t height = 0, width = 0, dim = 0;
  std::vector<std::size_t> pixels;
  std::vector<Vec> features;
};

inline PointFeatures interpolate_point_features(const OrganizedPointCloud& cloud, const CenterFeatures& cf,
                                                double eps = kIdwEpsilon, std::size_t neighbors = kIdwNeighbors) {
  cf.validate();
  PointFeatures out{cloud.height(), cloud.width(), cf.dim(), {}, {}};
  for (std::size_t i = 0; i < cloud.pixels(); ++i)
    if (cloud.valid(i)) out.pixels.push_back(i);
  out.features.assign(out.pixels.size(), Vec(cf.dim(), 0.0));
  parallel_for(out.pixels.size(), [&](std::size_t j) {
    Vec& f = out.features[j];
    for (const auto& [c, a] : idw_weights(cloud.at(out.pixels[j]), cf.centers, eps, neighbors))
      for (std::size_t d = 0; d < f.size(); ++d) f[d] += a * cf.features[c][d];
  });
  return out;
}

/// Lays point features out on the H x W image plane; pixels without a point
/// are zero and invalid.
inline FeatureGrid project_to_plane(const PointFeatures& pf) {
  Vec data(pf.height * pf.width * pf.dim, 0.0);
  Mask valid(pf.height * pf.width, 0);
  for (std::size_t j = 0; j < pf.pixels.size(); ++j) {
    const std::size_t p = pf.pixels[j];
    if (p >= valid.size()) throw DataError("project_to_plane: pixel index out of range");
    std::copy(pf.features[j].begin(), pf.features[j].end(), data.begin() + static_cast<std::ptrdiff_t>(p * pf.dim));
    valid[p] = 1;
  }
  return FeatureGrid(pf.height, pf.width, pf.dim, std::move(data), std::move(valid));
}

/// Mean of the valid cells of each factor x factor block. A block is valid
/// if it holds at least one valid cell.
inline FeatureGrid average_pool(const FeatureGrid& g, std::size_t factor) {
  if (factor == 0 || g.height() % factor || g.width() % factor)
    throw ConfigError("average_pool: grid dims must be divisible by the pool factor");
  const std::size_t h = g.height() / factor, w = g.width() / factor, d = g.dim();
  Vec data(h * w * d, 0.0);
  Mask valid(h * w, 0);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      std::size_t n = 0;
      double* out = data.data() + (u * w + v) * d;
      for (std::size_t a = 0; a < factor; ++a)
        for (std::size_t b = 0; b < factor; ++b) {
          const std::size_t r = u * factor + a, c = v * factor + b;
          if (!g.valid(r, c)) continue;
          const auto cell = g.cell(r, c);
          for (std::size_t k = 0; k < d; ++k) out[k] += cell[k];
          ++n;
        }
      if (n) {
        for (std::size_t k = 0; k < d; ++k) out[k] /= static_cast<double>(n);
        valid[u * w + v] = 1;
      }
    }
  return FeatureGrid(h, w, d, std::move(data), std::move(valid));
}

// ---------------------------------------------------------------------------
// Patch grid shared by both modalities
// ---------------------------------------------------------------------------

struct AlignParams {
  std::size_t centers = 64;
  std::size_t pool = 4;
  double eps = kIdwEpsilon;
  std::size_t neighbors = kIdwNeighbors;

  void validate() const {
    if (centers == 0) throw ConfigError("align: centers must be >= 1");
    if (pool == 0) throw ConfigError("align: pool factor must be >= 1");
    if (!(eps > 0.0)) throw ConfigError("align: epsilon must be > 0");
  }
};

/// Per-sample patch features on the pooled grid. Only cells valid in both
/// modalities are kept; `cells` lists their grid indices in scanline order.
struct PatchSet {
  std::string sample_id;
  std::size_t height = 0, width = 0;
  std::vector<std::size_t> cells;
  std::vector<Vec> rgb, pc, fused;

  std::size_t size() const { return cells.size(); }
};

/// Image features pooled directly; point features rebuilt from FPS centers by
/// interpolation and projection, then pooled the same way.
inline PatchSet extract_patches(const FeatureBundle& b, const AlignParams& params) {
  params.validate();
  const FeatureGrid rgb = average_pool(b.rgb_grid, params.pool);
  PatchSet ps{b.sample_id, rgb.height(), rgb.width(), {}, {}, {}, {}};
  if (b.cloud.valid_count() == 0) return ps;
  const CenterFeatures cf = sample_centers(b.cloud, b.pc_grid, params.centers);
  const FeatureGrid pc =
      average_pool(project_to_plane(interpolate_point_features(b.cloud, cf, params.eps, params.neighbors)), params.pool);
  for (std::size_t i = 0; i < rgb.cells(); ++i)
    if (rgb.valid(i) && pc.valid(i)) {
      ps.cells.push_back(i);
      ps.rgb.emplace_back(rgb.cell(i).begin(), rgb.cell(i).end());
      ps.pc.emplace_back(pc.cell(i).begin(), pc.cell(i).end());
    }
  return ps;
}

}  // namespace mmnr
