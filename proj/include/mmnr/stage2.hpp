#pragma once
// Enhanced multi-modal denoising: every training sample is compared patch by
// patch against the references of its own modality, the patch scores are
// weighted by the suspect map and aggregated per pixel, and the samples with
// the highest combined score are dropped.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mmnr/dataset.hpp"
#include "mmnr/stage1.hpp"

namespace mmnr {

struct PatchScore {
  std::size_t index = 0;  // window position in the scale's mask set
  Window window;
  double score = 0.0;
};

struct PatchScoreField {
  Scale scale = Scale::S;
  std::vector<PatchScore> entries;
};

/// s = 1 - max cosine against every reference patch of the same scale. Window
/// features are unit norm, so the cosine is a clamped dot product.
inline PatchScoreField intra_modal_score(const std::vector<WindowVector>& query,
                                         const std::vector<const WindowVector*>& refs, Scale scale) {
  if (refs.empty()) throw ConfigError(std::string("intra_modal_score: no reference patches at scale ") + to_string(scale));
  PatchScoreField field{scale, {}};
  field.entries.reserve(query.size());
  for (const auto& q : query) {
    double best = -1.0;
    for (const WindowVector* r : refs) best = std::max(best, std::clamp(dot(q.feature, r->feature), -1.0, 1.0));
    field.entries.push_back(PatchScore{q.index, q.window, 1.0 - best});
  }
  return field;
}

/// Reference patches of one modality and scale, pooled over all references.
inline std::vector<const WindowVector*> reference_patches(const ReferenceSet& rs, bool point_modality, Scale scale) {
  std::vector<const WindowVector*> out;
  for (const auto& r : rs.refs)
    for (const auto& wv : (point_modality ? r.pc : r.rgb).at(scale)) out.push_back(&wv);
  return out;
}

/// Weight of one window: the suspect map restricted to the window rectangle,
/// row-major over the rectangle.
struct WindowWeight {
  Window window;
  Vec values;

  double at(std::size_t u, std::size_t v) const { return values[(u - window.r0) * (window.c1 - window.c0) + (v - window.c0)]; }
};

inline std::vector<WindowWeight> patch_weights(const AnomalyMap& suspect, const ScaleMaskSet& masks) {
  if (suspect.height() != masks.height || suspect.width() != masks.width)
    throw DataError("patch_weights: map and mask dims differ");
  std::vector<WindowWeight> out;
  out.reserve(masks.windows.size());
  for (const auto& w : masks.windows) {
    WindowWeight ww{w, {}};
    ww.values.reserve(w.area());
    for (std::size_t u = w.r0; u < w.r1; ++u)
      for (std::size_t v = w.c0; v < w.c1; ++v) ww.values.push_back(suspect.at(u, v));
    out.push_back(std::move(ww));
  }
  return out;
}

struct AggregatedMap {
  AnomalyMap map;
  Mask covered;  // 0 where no scored patch covers the pixel
};

/// Per pixel: sum over covering patches of weight * score, divided by the
/// number of covering patches. Uncovered pixels are 0 and flagged.
inline AggregatedMap aggregate_scores(const PatchScoreField& field, const std::vector<WindowWeight>& weights,
                                      std::size_t h, std::size_t w) {
  Vec num(h * w, 0.0), den(h * w, 0.0);
  for (const auto& e : field.entries) {
    if (e.index >= weights.size() || !(weights[e.index].window == e.window))
      throw DataError("aggregate_scores: patch does not match its weight window");
    const WindowWeight& ww = weights[e.index];
    for (std::size_t u = e.window.r0; u < e.window.r1; ++u)
      for (std::size_t v = e.window.c0; v < e.window.c1; ++v) {
        num[u * w + v] += ww.at(u, v) * e.score;
        den[u * w + v] += 1.0;
      }
  }
  Mask covered(h * w, 0);
  for (std::size_t i = 0; i < num.size(); ++i) {
    if (den[i] > 0) {
      num[i] /= den[i];
      covered[i] = 1;
    } else {
      num[i] = 0.0;
    }
  }
  return AggregatedMap{AnomalyMap(h, w, std::move(num)), std::move(covered)};
}

/// (s_zero + max(m + s) + max(l)) / 3. Pixels flagged at any of the m/s
/// scales are left out of the first max, flagged l pixels out of the second;
/// an empty max contributes 0.
inline double final_sample_score(double s_zero, const AggregatedMap& l, const AggregatedMap& m,
                                 const AggregatedMap& s) {
  double best_ms = 0.0, best_l = 0.0;
  bool any_ms = false, any_l = false;
  for (std::size_t i = 0; i < m.map.size(); ++i) {
    if (m.covered[i] && s.covered[i]) {
      const double v = m.map.at(i) + s.map.at(i);
      best_ms = any_ms ? std::max(best_ms, v) : v;
      any_ms = true;
    }
    if (l.covered[i]) {
      best_l = any_l ? std::max(best_l, l.map.at(i)) : l.map.at(i);
      any_l = true;
    }
  }
  return (s_zero + best_ms + best_l) / 3.0;
}

/// Overload for plain maps with full coverage.
inline double final_sample_score(double s_zero, const AnomalyMap& l, const AnomalyMap& m, const AnomalyMap& s) {
  const auto full = [](const AnomalyMap& a) { return AggregatedMap{a, Mask(a.size(), 1)}; };
  return final_sample_score(s_zero, full(l), full(m), full(s));
}

// ---------------------------------------------------------------------------
// Per-sample scoring and sample removal
// ---------------------------------------------------------------------------

struct DenoiseParams {
  double lambda_image = 1.0;
  double lambda_pc = 1.5;
  double tau = 0.0;

  void validate() const {
    if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("denoise: tau must lie in [0, 1)");
    if (!(lambda_image >= 0.0) || !(lambda_pc >= 0.0)) throw ConfigError("denoise: lambdas must be >= 0");
  }
};

struct SampleDenoiseScore {
  std::string sample_id;
  double s_image_final = 0.0;
  double s_pc_final = 0.0;
  double s_final = 0.0;
};

/// Final image and point scores of one sample against the reference set,
/// with `weight` as the per-pixel suspect map of every window.
inline SampleDenoiseScore score_sample(const StageFeatures& f, const SuspectScore& zero, const ReferenceSet& rs,
                                       const AnomalyMap& weight, const MaskSet& masks) {
  const std::size_t h = masks.height(), w = masks.width();
  SampleDenoiseScore out{f.sample_id, 0.0, 0.0, 0.0};
  for (bool point : {false, true}) {
    std::array<AggregatedMap, 3> agg{AggregatedMap{AnomalyMap(h, w, 0.0), {}}, AggregatedMap{AnomalyMap(h, w, 0.0), {}},
                                     AggregatedMap{AnomalyMap(h, w, 0.0), {}}};
    for (Scale s : kScales) {
      const auto& query = (point ? f.pc : f.rgb).at(s);
      const auto field = intra_modal_score(query, reference_patches(rs, point, s), s);
      agg[static_cast<int>(s)] = aggregate_scores(field, patch_weights(weight, masks.at(s)), h, w);
    }
    const double v = final_sample_score(point ? zero.s_pc : zero.s_image, agg[0], agg[1], agg[2]);
    (point ? out.s_pc_final : out.s_image_final) = v;
  }
  return out;
}

struct DenoiseReport {
  std::vector<SampleDenoiseScore> samples;  // input order
  std::vector<std::string> removed_ids;     // highest s_final first
  std::vector<std::size_t> removed;         // indices, same order
  std::vector<std::size_t> kept;            // indices, input order
  DenoiseParams params;
};

/// Combines the per-sample scores and removes the top ceil(tau * M), ties
/// broken by ascending sample id.
inline DenoiseReport rank_and_remove(std::vector<SampleDenoiseScore> samples, const DenoiseParams& params) {
  params.validate();
  if (samples.empty()) throw DataError("denoise: empty training set");
  for (auto& s : samples) s.s_final = params.lambda_image * s.s_image_final + params.lambda_pc * s.s_pc_final;
  const std::size_t n_remove = ceil_count(params.tau, samples.size());
  if (n_remove >= samples.size()) throw ConfigError("denoise: tau would remove every training sample");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (samples[a].s_final != samples[b].s_final) return samples[a].s_final > samples[b].s_final;
    return samples[a].sample_id < samples[b].sample_id;
  });
  DenoiseReport rep;
  rep.params = params;
  std::vector<std::uint8_t> drop(samples.size(), 0);
  for (std::size_t i = 0; i < n_remove; ++i) {
    rep.removed.push_back(order[i]);
    rep.removed_ids.push_back(samples[order[i]].sample_id);
    drop[order[i]] = 1;
  }
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!drop[i]) rep.kept.push_back(i);
  rep.samples = std::move(samples);
  return rep;
}

inline DenoiseReport denoise(const std::vector<StageFeatures>& train, const ReferenceSelection& sel,
                             const ReferenceSet& rs, const MaskSet& masks, const DenoiseParams& params) {
  params.validate();
  if (train.size() != sel.scores.size()) throw DataError("denoise: selection does not match training set");
  const AnomalyMap weight = rs.mean_suspect_map();
  std::vector<SampleDenoiseScore> scores(train.size());
  parallel_for(train.size(), [&](std::size_t i) { scores[i] = score_sample(train[i], sel.scores[i], rs, weight, masks); });
  return rank_and_remove(std::move(scores), params);
}

}  // namespace mmnr
