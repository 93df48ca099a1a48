#pragma once
// Threshold-free detection metrics: image and pixel AUROC and the
// per-region-overlap curve area (AUPRO).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <vector>

#include "mmnr/tensor.hpp"

namespace mmnr {

/// Mann-Whitney AUROC; tied positive/negative pairs count one half. Pair
/// counts are kept in integers so the result is exact.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, twice_wins = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (!std::isfinite(scores[order[j]])) throw NumericError("auroc: non-finite score");
      (labels[order[j]] ? gp : gn) += 1;
      ++j;
    }
    twice_wins += 2 * gp * neg + gp * gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw DataError("auroc: need both positive and negative labels");
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// 8-connected components of a binary h x w mask, labelled in scanline order
/// of their first pixel. Pixels of each component are in discovery order.
inline std::vector<std::vector<std::size_t>> connected_components(const Mask& mask, std::size_t h, std::size_t w) {
  if (mask.size() != h * w) throw DataError("connected_components: mask size mismatch");
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::vector<std::size_t>> comps;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    comps.emplace_back();
    seen[start] = 1;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      comps.back().push_back(p);
      const std::size_t u = p / w, v = p % w;
      for (std::size_t a = u ? u - 1 : 0; a <= std::min(u + 1, h - 1); ++a)
        for (std::size_t b = v ? v - 1 : 0; b <= std::min(v + 1, w - 1); ++b) {
          const std::size_t q = a * w + b;
          if (mask[q] && !seen[q]) {
            seen[q] = 1;
            queue.push_back(q);
          }
        }
    }
  }
  return comps;
}

inline constexpr double kDefaultFprLimit = 0.3;

/// Area under the PRO-vs-FPR curve up to `fpr_limit`, divided by the limit.
/// Every unique score is a threshold (score >= t is predicted anomalous).
/// The curve is linearly interpolated at the limit.
inline double aupro(const std::vector<ScoreMap>& maps, const std::vector<Mask>& gts, double fpr_limit = kDefaultFprLimit) {
  if (maps.size() != gts.size()) throw DataError("aupro: maps and masks differ in count");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("aupro: fpr_limit must lie in (0, 1]");
  struct Px {
    double score;
    std::int64_t comp;  // -1 for normal pixels
  };
  std::vector<Px> px;
  std::vector<double> comp_size;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    const ScoreMap& s = maps[m];
    if (gts[m].size() != s.size()) throw DataError("aupro: mask size mismatch");
    std::vector<std::int64_t> label(s.size(), -1);
    for (const auto& c : connected_components(gts[m], s.height(), s.width())) {
      for (std::size_t p : c) label[p] = static_cast<std::int64_t>(comp_size.size());
      comp_size.push_back(static_cast<double>(c.size()));
    }
    for (std::size_t p = 0; p < s.size(); ++p) px.push_back(Px{s.at(p), label[p]});
  }
  if (comp_size.empty()) throw DataError("aupro: no anomalous pixels");
  const auto normals = static_cast<double>(std::count_if(px.begin(), px.end(), [](const Px& p) { return p.comp < 0; }));
  if (normals == 0) throw DataError("aupro: no normal pixels");
  std::sort(px.begin(), px.end(), [](const Px& a, const Px& b) { return a.score > b.score; });

  // Curve points (fpr, pro), starting above the highest score.
  std::vector<double> xs{0.0}, ys{0.0};
  std::vector<double> hit(comp_size.size(), 0.0);
  double fp = 0.0;
  const double ncomp = static_cast<double>(comp_size.size());
  for (std::size_t i = 0; i < px.size();) {
    std::size_t j = i;
    while (j < px.size() && px[j].score == px[i].score) {
      if (px[j].comp < 0) {
        fp += 1.0;
      } else {
        hit[static_cast<std::size_t>(px[j].comp)] += 1.0;
      }
      ++j;
    }
    double pro = 0.0;
    for (std::size_t c = 0; c < hit.size(); ++c) pro += hit[c] / comp_size[c];
    xs.push_back(fp / normals);
    ys.push_back(std::min(1.0, pro / ncomp));
    i = j;
  }
  // Collapse runs of equal PRO so flat stretches integrate as one segment.
  std::vector<double> cx, cy;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const bool interior = i > 0 && i + 1 < xs.size() && ys[i - 1] == ys[i] && ys[i + 1] == ys[i];
    if (!interior) {
      cx.push_back(xs[i]);
      cy.push_back(ys[i]);
    }
  }
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < cx.size(); ++i) {
    const double x0 = cx[i], x1 = cx[i + 1];
    if (x0 >= fpr_limit) break;
    if (x1 <= fpr_limit) {
      area += (x1 - x0) * (cy[i] + cy[i + 1]) / 2.0;
    } else {
      const double yl = cy[i] + (cy[i + 1] - cy[i]) * (fpr_limit - x0) / (x1 - x0);
      area += (fpr_limit - x0) * (cy[i] + yl) / 2.0;
      break;
    }
  }
  return std::min(1.0, area / fpr_limit);
}

struct EvalResult {
  double i_auroc = 0.0;
  double p_auroc = 0.0;
  double aupro = 0.0;
  double fpr_limit = kDefaultFprLimit;
};

/// Pixel AUROC over every pixel of every map.
inline double pixel_auroc(const std::vector<ScoreMap>& maps, const std::vector<Mask>& gts) {
  if (maps.size() != gts.size()) throw DataError("pixel_auroc: maps and masks differ in count");
  std::vector<double> s;
  std::vector<int> l;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    if (gts[m].size() != maps[m].size()) throw DataError("pixel_auroc: mask size mismatch");
    s.insert(s.end(), maps[m].scores().begin(), maps[m].scores().end());
    for (auto g : gts[m]) l.push_back(g ? 1 : 0);
  }
  return auroc(s, l);
}

}  // namespace mmnr
