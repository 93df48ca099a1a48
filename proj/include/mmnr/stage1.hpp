#pragma once
// Intra-modal reference selection: zero-shot suspect scores from class tokens
// against text prototypes, the N most normal-looking training samples as
// references, and window-harmonic suspect maps for those references.

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mmnr/encoders.hpp"
#include "mmnr/io.hpp"
#include "mmnr/patching.hpp"

namespace mmnr {

/// Shifted-cosine zero-shot score c_a / (c_a + c_n), where each cosine is
/// first mapped to [0, 1] by (c + 1) / 2 so negative similarities cannot flip
/// the ratio. 0.5 when both shifted similarities vanish.
inline double zero_shot_score(VecView token, const TextPrototypes& protos) {
  const double ca = (cosine_sim(token, protos.anomalous) + 1.0) / 2.0;
  const double cn = (cosine_sim(token, protos.normal) + 1.0) / 2.0;
  if (ca + cn < 1e-9) return 0.5;
  return ca / (ca + cn);
}

// ---------------------------------------------------------------------------
// Per-sample multi-scale features used by the first two stages
// ---------------------------------------------------------------------------

struct WindowVector {
  std::size_t index = 0;  // position in the scale's mask set
  Window window;
  Vec feature;  // unit norm
};

struct ModalityWindows {
  std::optional<Vec> class_token;
  std::array<std::vector<WindowVector>, 3> scales;

  const std::vector<WindowVector>& at(Scale s) const { return scales[static_cast<int>(s)]; }
};

struct StageFeatures {
  std::string sample_id;
  ModalityWindows rgb;
  ModalityWindows pc;
};

struct StageFeatureParams {
  MaskConfig masks;
  std::size_t min_points = kDefaultMinPoints;
  EncoderConfig point_encoder;
};

/// Image windows: normalized mean of the window's valid cell features
/// (windows without valid cells are skipped). Point windows: aligned point
/// patches with more than `min_points` points, encoded by the point encoder.
inline StageFeatures extract_stage_features(const FeatureBundle& b, const MaskSet& masks,
                                            const PointEncoder& encoder, std::size_t min_points) {
  StageFeatures f;
  f.sample_id = b.sample_id;
  if (!b.rgb_grid.class_token()) throw DataError("sample '" + b.sample_id + "' has no image class token");
  f.rgb.class_token = normalized(*b.rgb_grid.class_token());
  for (Scale s : kScales) {
    const auto segs = segment_image(b.rgb_grid, masks.at(s));
    auto& out = f.rgb.scales[static_cast<int>(s)];
    for (std::size_t i = 0; i < segs.size(); ++i)
      if (auto m = mean_feature(segs[i])) out.push_back(WindowVector{i, segs[i].window, std::move(*m)});
  }
  for (Scale s : kScales) {
    const ScaleMaskSet& set = masks.at(s);
    auto& out = f.pc.scales[static_cast<int>(s)];
    const auto patches = segment_cloud_ampcfe(b.cloud, set, min_points);
    std::size_t cursor = 0;
    for (const auto& p : patches) {
      while (!(set.windows[cursor] == p.window)) ++cursor;
      out.push_back(WindowVector{cursor, p.window, encoder.encode(p)});
    }
  }
  if (!f.pc.at(Scale::L).empty()) f.pc.class_token = f.pc.at(Scale::L).front().feature;
  return f;
}

// ---------------------------------------------------------------------------
// Reference selection
// ---------------------------------------------------------------------------

struct SuspectScore {
  std::string sample_id;
  double s_image = 0.0;
  double s_pc = 0.0;
  double s_ref = 0.0;
};

inline SuspectScore suspect_score(const StageFeatures& f, const TextPrototypes& rgb_protos,
                                  const TextPrototypes& pc_protos) {
  if (!f.pc.class_token)
    throw DataError("sample '" + f.sample_id + "': whole-cloud patch has too few points for a class token");
  SuspectScore s{f.sample_id, zero_shot_score(*f.rgb.class_token, rgb_protos),
                 zero_shot_score(*f.pc.class_token, pc_protos), 0.0};
  s.s_ref = s.s_image + s.s_pc;
  return s;
}

struct ReferenceSelection {
  std::vector<SuspectScore> scores;  // input order
  std::vector<std::size_t> refs;     // indices into the input, most normal first
};

inline constexpr std::size_t kDefaultReferences = 4;

/// The `n` samples with the smallest s_ref, ties by sample id.
inline ReferenceSelection select_references(const std::vector<StageFeatures>& train, const TextPrototypes& rgb_protos,
                                            const TextPrototypes& pc_protos, std::size_t n) {
  if (train.empty()) throw DataError("select_references: empty training set");
  if (n == 0 || n > train.size()) throw ConfigError("select_references: need 1 <= N <= |train|");
  ReferenceSelection sel;
  sel.scores.resize(train.size());
  parallel_for(train.size(), [&](std::size_t i) { sel.scores[i] = suspect_score(train[i], rgb_protos, pc_protos); });
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sel.scores[a].s_ref != sel.scores[b].s_ref) return sel.scores[a].s_ref < sel.scores[b].s_ref;
    return sel.scores[a].sample_id < sel.scores[b].sample_id;
  });
  sel.refs.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  return sel;
}

// ---------------------------------------------------------------------------
// Suspect maps
// ---------------------------------------------------------------------------

inline constexpr double kHarmonicFloor = 1e-6;

/// Harmonic mean of the window scores covering each pixel, for one scale.
/// Pixels no scored window covers are reported through `covered`.
inline Vec harmonic_window_map(const std::vector<std::pair<Window, double>>& windows, std::size_t h, std::size_t w,
                               Mask& covered) {
  Vec count(h * w, 0.0), inv(h * w, 0.0);
  for (const auto& [win, score] : windows)
    for (std::size_t u = win.r0; u < win.r1; ++u)
      for (std::size_t v = win.c0; v < win.c1; ++v) {
        count[u * w + v] += 1.0;
        inv[u * w + v] += 1.0 / std::max(score, kHarmonicFloor);
      }
  Vec out(h * w, 0.0);
  covered.assign(h * w, 0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (count[i] > 0) {
      out[i] = count[i] / inv[i];
      covered[i] = 1;
    }
  return out;
}

/// Per-pixel suspect map of one sample: zero-shot score of every m and s
/// window's mean feature, harmonic mean over covering windows, arithmetic
/// mean across the two scales. Pixels covered at neither scale (background)
/// get 0.
inline AnomalyMap suspected_anomaly_map(const ModalityWindows& feats, const TextPrototypes& protos, std::size_t h,
                                        std::size_t w) {
  Vec sum(h * w, 0.0), scales(h * w, 0.0);
  for (Scale s : {Scale::M, Scale::S}) {
    std::vector<std::pair<Window, double>> scored;
    for (const auto& wv : feats.at(s)) scored.emplace_back(wv.window, zero_shot_score(wv.feature, protos));
    Mask covered;
    const Vec m = harmonic_window_map(scored, h, w, covered);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (covered[i]) {
        sum[i] += m[i];
        scales[i] += 1.0;
      }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = scales[i] > 0 ? sum[i] / scales[i] : 0.0;
  return AnomalyMap(h, w, std::move(sum));
}

struct ReferenceSet {
  std::vector<std::size_t> indices;  // into the training set
  std::vector<StageFeatures> refs;
  std::vector<AnomalyMap> suspect_maps;

  /// Element-wise mean of the suspect maps: one weight map per class.
  AnomalyMap mean_suspect_map() const {
    if (suspect_maps.empty()) throw DataError("ReferenceSet: no suspect maps");
    const auto& first = suspect_maps.front();
    Vec m(first.size(), 0.0);
    for (const auto& s : suspect_maps)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += s.at(i);
    for (double& x : m) x /= static_cast<double>(suspect_maps.size());
    return AnomalyMap(first.height(), first.width(), std::move(m));
  }
};

inline ReferenceSet build_reference_set(const std::vector<StageFeatures>& train, const ReferenceSelection& sel,
                                        const TextPrototypes& rgb_protos, std::size_t h, std::size_t w) {
  ReferenceSet rs;
  rs.indices = sel.refs;
  for (auto i : sel.refs) {
    rs.refs.push_back(train[i]);
    rs.suspect_maps.push_back(suspected_anomaly_map(train[i].rgb, rgb_protos, h, w));
  }
  return rs;
}

}  // namespace mmnr
