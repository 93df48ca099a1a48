#pragma once
// Multi-scale window masks and the segmentation of feature grids and
// organized point clouds into aligned window patches.
//
// A window of kernel k anchored at (u, v) covers rows
// [u - floor((k-1)/2), u - floor((k-1)/2) + k) and likewise for columns,
// clipped to the grid. Anchors start at 0 and advance by the stride until the
// last window reaches the far edge, so every cell is covered whenever
// stride <= k.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mmnr/tensor.hpp"

namespace mmnr {

enum class Scale { L = 0, M = 1, S = 2 };

inline constexpr std::array<Scale, 3> kScales{Scale::L, Scale::M, Scale::S};

inline const char* to_string(Scale s) {
  switch (s) {
    case Scale::L: return "l";
    case Scale::M: return "m";
    case Scale::S: return "s";
  }
  return "?";
}

struct Window {
  std::ptrdiff_t anchor_u = 0, anchor_v = 0;
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // half-open row / column ranges

  bool contains(std::size_t u, std::size_t v) const { return u >= r0 && u < r1 && v >= c0 && v < c1; }
  std::size_t area() const { return (r1 - r0) * (c1 - c0); }

  Mask to_mask(std::size_t h, std::size_t w) const {
    Mask m(h * w, 0);
    for (std::size_t u = r0; u < r1; ++u)
      for (std::size_t v = c0; v < c1; ++v) m[u * w + v] = 1;
    return m;
  }

  bool operator==(const Window&) const = default;
};

struct ScaleMaskSet {
  Scale scale = Scale::L;
  std::size_t kernel = 0;
  std::size_t stride = 0;
  std::size_t height = 0, width = 0;
  std::vector<Window> windows;

  /// Number of windows covering each cell.
  std::vector<std::size_t> coverage() const {
    std::vector<std::size_t> c(height * width, 0);
    for (const auto& w : windows)
      for (std::size_t u = w.r0; u < w.r1; ++u)
        for (std::size_t v = w.c0; v < w.c1; ++v) ++c[u * width + v];
    return c;
  }

  bool operator==(const ScaleMaskSet&) const = default;
};

struct MaskConfig {
  std::size_t k_m = 0, k_s = 0;
  std::size_t stride_m = 0, stride_s = 0;

  /// k_m = ceil(H/4), k_s = ceil(H/8), strides k/2 (50% overlap).
  static MaskConfig defaults_for(std::size_t h, std::size_t w) {
    const std::size_t side = std::min(h, w);
    MaskConfig c;
    c.k_m = (side + 3) / 4;
    c.k_s = (side + 7) / 8;
    c.stride_m = std::max<std::size_t>(1, c.k_m / 2);
    c.stride_s = std::max<std::size_t>(1, c.k_s / 2);
    return c;
  }
};

struct MaskSet {
  ScaleMaskSet l, m, s;

  const ScaleMaskSet& at(Scale sc) const {
    switch (sc) {
      case Scale::L: return l;
      case Scale::M: return m;
      case Scale::S: return s;
    }
    return l;
  }
  std::size_t height() const { return l.height; }
  std::size_t width() const { return l.width; }
};

namespace detail {

struct Span1 {
  std::ptrdiff_t anchor;
  std::size_t lo, hi;
};

inline std::vector<Span1> window_spans(std::size_t n, std::size_t k, std::size_t stride) {
  const auto offset = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto sn = static_cast<std::ptrdiff_t>(n);
  std::vector<Span1> spans;
  for (std::ptrdiff_t a = 0;; a += static_cast<std::ptrdiff_t>(stride)) {
    const std::ptrdiff_t lo = a - offset;
    const std::ptrdiff_t hi = lo + static_cast<std::ptrdiff_t>(k);
    spans.push_back(Span1{a, static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, lo)),
                          static_cast<std::size_t>(std::min(sn, hi))});
    if (hi >= sn) break;
  }
  return spans;
}

}  // namespace detail

/// Windows of one scale tiling an h x w grid.
inline ScaleMaskSet build_scale_masks(std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                                      Scale scale = Scale::S) {
  if (h == 0 || w == 0) throw ConfigError("build_masks: empty grid");
  if (k == 0 || k > std::min(h, w)) throw ConfigError("build_masks: kernel " + std::to_string(k) + " does not fit grid");
  if (stride == 0) throw ConfigError("build_masks: stride must be >= 1");
  if (stride > k) throw ConfigError("build_masks: stride larger than kernel leaves gaps");
  ScaleMaskSet set{scale, k, stride, h, w, {}};
  const auto rows = detail::window_spans(h, k, stride);
  const auto cols = detail::window_spans(w, k, stride);
  for (const auto& r : rows)
    for (const auto& c : cols) set.windows.push_back(Window{r.anchor, c.anchor, r.lo, r.hi, c.lo, c.hi});
  return set;
}

/// The l scale is a single window selecting the whole grid.
inline ScaleMaskSet full_mask(std::size_t h, std::size_t w) {
  return ScaleMaskSet{Scale::L, std::max(h, w), std::max(h, w), h, w,
                      {Window{static_cast<std::ptrdiff_t>(h / 2), static_cast<std::ptrdiff_t>(w / 2), 0, h, 0, w}}};
}

inline MaskSet build_masks(std::size_t h, std::size_t w, const MaskConfig& cfg) {
  if (!(cfg.k_s < cfg.k_m)) throw ConfigError("build_masks: need k_s < k_m");
  if (cfg.k_m > std::min(h, w)) throw ConfigError("build_masks: k_m larger than grid");
  return MaskSet{full_mask(h, w), build_scale_masks(h, w, cfg.k_m, cfg.stride_m, Scale::M),
                 build_scale_masks(h, w, cfg.k_s, cfg.stride_s, Scale::S)};
}

inline MaskSet build_masks(std::size_t h, std::size_t w, std::size_t k_m, std::size_t k_s, std::size_t stride) {
  return build_masks(h, w, MaskConfig{k_m, k_s, stride, stride});
}

// ---------------------------------------------------------------------------
// Image segmentation
// ---------------------------------------------------------------------------

struct WindowFeatures {
  Window window;
  std::vector<Vec> features;  // valid cells under the window, scanline order
};

struct ImageSegments {
  std::optional<Vec> class_token;
  std::array<std::vector<WindowFeatures>, 3> scales;

  const std::vector<WindowFeatures>& at(Scale s) const { return scales[static_cast<int>(s)]; }
};

inline std::vector<WindowFeatures> segment_image(const FeatureGrid& grid, const ScaleMaskSet& masks) {
  if (grid.height() != masks.height || grid.width() != masks.width)
    throw DataError("segment_image: grid and mask dims differ");
  std::vector<WindowFeatures> out;
  out.reserve(masks.windows.size());
  for (const auto& w : masks.windows) {
    WindowFeatures wf{w, {}};
    for (std::size_t u = w.r0; u < w.r1; ++u)
      for (std::size_t v = w.c0; v < w.c1; ++v)
        if (grid.valid(u, v)) {
          const auto c = grid.cell(u, v);
          wf.features.emplace_back(c.begin(), c.end());
        }
    out.push_back(std::move(wf));
  }
  return out;
}

inline ImageSegments segment_image(const FeatureGrid& grid, const MaskSet& masks, bool require_class_token) {
  if (require_class_token && !grid.class_token()) throw DataError("segment_image: grid has no class token");
  ImageSegments seg;
  seg.class_token = grid.class_token();
  for (Scale s : kScales) seg.scales[static_cast<int>(s)] = segment_image(grid, masks.at(s));
  return seg;
}

/// Normalized mean of a window's features; nullopt when empty or degenerate.
inline std::optional<Vec> mean_feature(const WindowFeatures& wf) {
  if (wf.features.empty()) return std::nullopt;
  Vec m(wf.features.front().size(), 0.0);
  for (const auto& f : wf.features)
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += f[i];
  if (!(norm(m) > 1e-12)) return std::nullopt;
  return normalized(m);
}

// ---------------------------------------------------------------------------
// Aligned multi-scale point cloud segmentation
// ---------------------------------------------------------------------------

struct PointPatch {
  Window window;
  Scale scale = Scale::S;
  std::vector<Point3> points;

  std::size_t count() const { return points.size(); }
};

inline constexpr std::size_t kDefaultMinPoints = 128;

/// Valid points under each window; windows with count <= min_points are
/// discarded.
inline std::vector<PointPatch> segment_cloud_ampcfe(const OrganizedPointCloud& cloud, const ScaleMaskSet& masks,
                                                    std::size_t min_points) {
  if (min_points < 1) throw ConfigError("segment_cloud_ampcfe: threshold must be >= 1");
  if (cloud.height() != masks.height || cloud.width() != masks.width)
    throw DataError("segment_cloud_ampcfe: cloud and mask dims differ");
  std::vector<PointPatch> out;
  for (const auto& w : masks.windows) {
    PointPatch p{w, masks.scale, {}};
    for (std::size_t u = w.r0; u < w.r1; ++u)
      for (std::size_t v = w.c0; v < w.c1; ++v)
        if (cloud.valid(u, v)) p.points.push_back(cloud.at(u, v));
    if (p.count() > min_points) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace mmnr
