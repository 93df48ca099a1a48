#pragma once
// Background plane removal (RANSAC) and bilinear resizing.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "mmnr/io.hpp"
#include "mmnr/tensor.hpp"

namespace mmnr {

/// Plane n.p + d = 0 with unit normal n.
struct Plane {
  double nx = 0.0, ny = 0.0, nz = 1.0, d = 0.0;
  double distance(const Point3& p) const { return std::abs(nx * p.x + ny * p.y + nz * p.z + d); }
};

struct RansacParams {
  double dist_threshold = 0.005;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  /// A hypothesis counts as background only if it explains at least this
  /// fraction of the valid points; otherwise nothing is removed.
  double min_support = 0.3;
  /// The plane must also contain this fraction of the valid pixels on the
  /// image border. A cloud whose background is already gone has no border
  /// support, so a second pass removes nothing.
  double border_support = 0.5;
};

struct PlaneFit {
  Plane plane;
  std::size_t inliers = 0;
  bool accepted = false;
};

namespace detail {

inline std::optional<Plane> plane_through(const Point3& a, const Point3& b, const Point3& c) {
  const double ux = b.x - a.x, uy = b.y - a.y, uz = b.z - a.z;
  const double vx = c.x - a.x, vy = c.y - a.y, vz = c.z - a.z;
  double nx = uy * vz - uz * vy, ny = uz * vx - ux * vz, nz = ux * vy - uy * vx;
  const double n = std::sqrt(nx * nx + ny * ny + nz * nz);
  if (!(n > 1e-15)) return std::nullopt;
  nx /= n;
  ny /= n;
  nz /= n;
  return Plane{nx, ny, nz, -(nx * a.x + ny * a.y + nz * a.z)};
}

/// Total least-squares plane through a point set (smallest principal axis).
inline Plane least_squares_plane(const std::vector<Point3>& pts) {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : pts) mean += Eigen::Vector3d(p.x, p.y, p.z);
  mean /= static_cast<double>(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) {
    const Eigen::Vector3d q = Eigen::Vector3d(p.x, p.y, p.z) - mean;
    cov += q * q.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Vector3d n = eig.eigenvectors().col(0);
  if (n.z() < 0) n = -n;
  return Plane{n.x(), n.y(), n.z(), -n.dot(mean)};
}

}  // namespace detail

/// Best RANSAC plane over the valid points: 3-point hypotheses, inlier count
/// as consensus, ties broken by lower mean absolute inlier residual, then a
/// least-squares refit on the consensus set.
inline PlaneFit fit_background_plane(const OrganizedPointCloud& cloud, const RansacParams& params) {
  std::vector<Point3> pts;
  pts.reserve(cloud.pixels());
  for (std::size_t i = 0; i < cloud.pixels(); ++i)
    if (cloud.valid(i)) pts.push_back(cloud.at(i));
  if (pts.size() < 3) throw DataError("remove_background_plane: fewer than 3 valid points");

  Rng rng(mix_seed(params.seed ^ 0x72616e736163ull));
  PlaneFit best;
  double best_residual = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < params.iterations; ++it) {
    const std::size_t i = rng.index(pts.size());
    std::size_t j = rng.index(pts.size() - 1);
    if (j >= i) ++j;
    std::size_t k = rng.index(pts.size() - 2);
    if (k >= std::min(i, j)) ++k;
    if (k >= std::max(i, j)) ++k;
    const auto plane = detail::plane_through(pts[i], pts[j], pts[k]);
    if (!plane) continue;
    std::size_t count = 0;
    double residual = 0.0;
    for (const auto& p : pts) {
      const double r = plane->distance(p);
      if (r <= params.dist_threshold) {
        ++count;
        residual += r;
      }
    }
    const double mean_residual = count ? residual / static_cast<double>(count) : 0.0;
    if (count > best.inliers || (count == best.inliers && count > 0 && mean_residual < best_residual)) {
      best.plane = *plane;
      best.inliers = count;
      best_residual = mean_residual;
    }
  }
  if (best.inliers == 0) return best;

  std::vector<Point3> consensus;
  for (const auto& p : pts)
    if (best.plane.distance(p) <= params.dist_threshold) consensus.push_back(p);
  if (consensus.size() >= 3) {
    const Plane refit = detail::least_squares_plane(consensus);
    std::size_t refit_count = 0;
    for (const auto& p : pts) refit_count += refit.distance(p) <= params.dist_threshold;
    if (refit_count >= best.inliers) {
      best.plane = refit;
      best.inliers = refit_count;
    }
  }
  std::size_t border = 0, border_in = 0;
  for (std::size_t u = 0; u < cloud.height(); ++u)
    for (std::size_t v = 0; v < cloud.width(); ++v) {
      if (u != 0 && v != 0 && u + 1 != cloud.height() && v + 1 != cloud.width()) continue;
      if (!cloud.valid(u, v)) continue;
      ++border;
      border_in += best.plane.distance(cloud.at(u, v)) <= params.dist_threshold;
    }
  best.accepted = static_cast<double>(best.inliers) >= params.min_support * static_cast<double>(pts.size()) &&
                  border > 0 && static_cast<double>(border_in) >= params.border_support * static_cast<double>(border);
  return best;
}

/// Validity mask after removing every point within the threshold of the
/// background plane.
inline Mask background_keep_mask(const OrganizedPointCloud& cloud, const RansacParams& params) {
  const PlaneFit fit = fit_background_plane(cloud, params);
  Mask keep(cloud.pixels(), 1);
  if (!fit.accepted) return keep;
  for (std::size_t i = 0; i < cloud.pixels(); ++i)
    if (cloud.valid(i) && fit.plane.distance(cloud.at(i)) <= params.dist_threshold) keep[i] = 0;
  return keep;
}

inline OrganizedPointCloud remove_background_plane(const OrganizedPointCloud& cloud, const RansacParams& params) {
  return cloud.masked(background_keep_mask(cloud, params));
}

/// Removes the background from a whole bundle; removed pixels are cleared in
/// both feature grids as well.
inline FeatureBundle remove_background_plane(const FeatureBundle& b, const RansacParams& params) {
  const Mask keep = background_keep_mask(b.cloud, params);
  FeatureBundle out = b;
  out.cloud = b.cloud.masked(keep);
  out.rgb_grid = b.rgb_grid.masked(keep);
  out.pc_grid = b.pc_grid.masked(keep);
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear resize (align-corners sampling)
// ---------------------------------------------------------------------------

namespace detail {

struct Tap {
  std::size_t lo, hi;
  double frac;  // weight of hi
};

inline std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = out == 1 ? (static_cast<double>(in) - 1.0) / 2.0
                          : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo >= in) lo = in - 1;
    const double frac = src - static_cast<double>(lo);
    const std::size_t hi = (frac > 0.0 && lo + 1 < in) ? lo + 1 : lo;
    taps[i] = Tap{lo, hi, hi == lo ? 0.0 : frac};
  }
  return taps;
}

/// Resizes `channels` interleaved channels of an H x W raster. Output cells
/// are valid only if every tap with nonzero weight is valid.
inline void resize_raster(std::size_t h, std::size_t w, std::size_t channels, const Vec& in, const Mask& valid,
                          std::size_t th, std::size_t tw, Vec& out, Mask& out_valid) {
  if (h == 0 || w == 0) throw DataError("resize_bilinear: empty input");
  if (th == 0 || tw == 0) throw DataError("resize_bilinear: target dims must be >= 1");
  const auto rows = resize_taps(h, th);
  const auto cols = resize_taps(w, tw);
  out.assign(th * tw * channels, 0.0);
  out_valid.assign(th * tw, 0);
  for (std::size_t u = 0; u < th; ++u) {
    for (std::size_t v = 0; v < tw; ++v) {
      const Tap& r = rows[u];
      const Tap& c = cols[v];
      const std::size_t idx[4] = {r.lo * w + c.lo, r.lo * w + c.hi, r.hi * w + c.lo, r.hi * w + c.hi};
      const double wt[4] = {(1 - r.frac) * (1 - c.frac), (1 - r.frac) * c.frac, r.frac * (1 - c.frac),
                            r.frac * c.frac};
      bool ok = true;
      for (int t = 0; t < 4; ++t)
        if (wt[t] > 0.0 && !valid[idx[t]]) ok = false;
      out_valid[u * tw + v] = ok ? 1 : 0;
      if (!ok) continue;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double s = 0.0;
        for (int t = 0; t < 4; ++t)
          if (wt[t] > 0.0) s += wt[t] * in[idx[t] * channels + ch];
        out[(u * tw + v) * channels + ch] = s;
      }
    }
  }
}

}  // namespace detail

inline FeatureGrid resize_bilinear(const FeatureGrid& g, std::size_t th, std::size_t tw) {
  Vec out;
  Mask valid;
  detail::resize_raster(g.height(), g.width(), g.dim(), g.data(), g.valid_mask(), th, tw, out, valid);
  return FeatureGrid(th, tw, g.dim(), std::move(out), std::move(valid), g.class_token());
}

inline OrganizedPointCloud resize_bilinear(const OrganizedPointCloud& c, std::size_t th, std::size_t tw) {
  Vec flat(c.pixels() * 3);
  for (std::size_t i = 0; i < c.pixels(); ++i) {
    flat[3 * i] = c.at(i).x;
    flat[3 * i + 1] = c.at(i).y;
    flat[3 * i + 2] = c.at(i).z;
  }
  Vec out;
  Mask valid;
  detail::resize_raster(c.height(), c.width(), 3, flat, c.valid_mask(), th, tw, out, valid);
  std::vector<Point3> pts(th * tw);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Point3{out[3 * i], out[3 * i + 1], out[3 * i + 2]};
  return OrganizedPointCloud(th, tw, std::move(pts), std::move(valid));
}

inline ScoreMap resize_bilinear(const ScoreMap& m, std::size_t th, std::size_t tw) {
  Vec out;
  Mask valid;
  detail::resize_raster(m.height(), m.width(), 1, m.scores(), Mask(m.size(), 1), th, tw, out, valid);
  return ScoreMap(th, tw, std::move(out));
}

inline AnomalyMap resize_bilinear(const AnomalyMap& m, std::size_t th, std::size_t tw) {
  const ScoreMap s = resize_bilinear(static_cast<const ScoreMap&>(m), th, tw);
  return AnomalyMap(th, tw, s.scores());
}

inline Mask resize_nearest(const Mask& m, std::size_t h, std::size_t w, std::size_t th, std::size_t tw) {
  Mask out(th * tw);
  for (std::size_t u = 0; u < th; ++u)
    for (std::size_t v = 0; v < tw; ++v) out[u * tw + v] = m[(u * h / th) * w + (v * w / tw)];
  return out;
}

/// Resizes every component of a bundle. The gt mask is resampled by nearest
/// neighbour so it stays binary.
inline FeatureBundle resize_bilinear(const FeatureBundle& b, std::size_t th, std::size_t tw) {
  FeatureBundle out;
  out.rgb_grid = resize_bilinear(b.rgb_grid, th, tw);
  out.pc_grid = resize_bilinear(b.pc_grid, th, tw);
  out.cloud = resize_bilinear(b.cloud, th, tw);
  out.sample_id = b.sample_id;
  out.label = b.label;
  if (b.gt_mask) out.gt_mask = resize_nearest(*b.gt_mask, b.height(), b.width(), th, tw);
  return out;
}

}  // namespace mmnr
