#pragma once
// Noise-discriminative coreset selection: local outlier factor over patch
// features, removal of the most outlying patches, and greedy k-center
// subsampling into an exact nearest-neighbour memory bank.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mmnr/dataset.hpp"
#include "mmnr/io.hpp"

namespace mmnr {

inline constexpr double kReachEpsilon = 1e-12;
inline constexpr std::size_t kDefaultLofK = 5;
inline constexpr double kDefaultCoresetFraction = 0.1;

struct LofResult {
  std::size_t k = 0;
  std::vector<double> k_distance;
  std::vector<std::vector<std::size_t>> neighbors;  // ascending index, ties included
  std::vector<double> lrd;
  std::vector<double> eta;
};

/// Local outlier factor. The neighbourhood of a point is every other point
/// within its k-distance, so equidistant points beyond the k-th are included.
/// eta > 1 marks locally sparse (outlying) points.
inline LofResult lof(const std::vector<Vec>& points, std::size_t k) {
  const std::size_t n = points.size();
  if (k < 1) throw ConfigError("lof: k must be >= 1");
  if (n <= k) throw DataError("lof: need more than k points");
  for (const auto& p : points)
    if (p.size() != points.front().size()) throw DataError("lof: dimension mismatch");

  LofResult r;
  r.k = k;
  r.k_distance.resize(n);
  r.neighbors.resize(n);
  std::vector<std::vector<double>> nd(n);  // distances to neighbours, same order
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> d(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = j == i ? std::numeric_limits<double>::infinity() : l2_dist(points[i], points[j]);
    std::vector<double> sorted(d);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
    const double dk = sorted[k - 1];
    r.k_distance[i] = dk;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && d[j] <= dk) {
        r.neighbors[i].push_back(j);
        nd[i].push_back(d[j]);
      }
  });
  r.lrd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t < r.neighbors[i].size(); ++t)
      s += std::max(r.k_distance[r.neighbors[i][t]], nd[i][t]);
    const double mean = s / static_cast<double>(r.neighbors[i].size());
    r.lrd[i] = 1.0 / std::max(mean, kReachEpsilon);
  }
  r.eta.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t b : r.neighbors[i]) s += r.lrd[b];
    r.eta[i] = s / static_cast<double>(r.neighbors[i].size()) / r.lrd[i];
  }
  return r;
}

/// Indices (ascending) that survive removal of the ceil(tau * n) highest-eta
/// entries; among equal eta the earlier entry is removed first.
inline std::vector<std::size_t> filter_top_tau(const std::vector<double>& eta, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("filter_top_tau: tau must lie in [0, 1)");
  const std::size_t n = eta.size();
  const std::size_t n_remove = ceil_count(tau, n);
  if (n == 0 || n_remove >= n) throw DataError("filter_top_tau: every patch would be removed");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return eta[a] > eta[b]; });
  std::vector<std::uint8_t> drop(n, 0);
  for (std::size_t i = 0; i < n_remove; ++i) drop[order[i]] = 1;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) kept.push_back(i);
  return kept;
}

/// Farthest-point greedy k-center: starts from the point nearest the mean and
/// repeatedly adds the point farthest from the current selection, until
/// ceil(fraction * n) points are chosen. Ties go to the lower index. Returns
/// indices in pick order.
inline std::vector<std::size_t> greedy_coreset(const std::vector<Vec>& points, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("greedy_coreset: fraction must lie in (0, 1]");
  const std::size_t n = points.size();
  if (n == 0) return {};
  const std::size_t target = std::max<std::size_t>(1, ceil_count(fraction, n));
  Vec mean(points.front().size(), 0.0);
  for (const auto& p : points)
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += p[d];
  for (double& m : mean) m /= static_cast<double>(n);
  std::size_t cur = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = squared_l2(points[i], mean);
    if (d < best) {
      best = d;
      cur = i;
    }
  }
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> picks;
  for (;;) {
    picks.push_back(cur);
    if (picks.size() >= target) break;
    parallel_for(n, [&](std::size_t j) { dist[j] = std::min(dist[j], l2_dist(points[j], points[cur])); });
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (dist[j] > far_d) {
        far_d = dist[j];
        far = j;
      }
    if (far_d <= 0.0) break;  // every point already coincides with a pick
    cur = far;
  }
  return picks;
}

/// Largest distance from any point to its nearest selected point.
inline double coverage_radius(const std::vector<Vec>& points, const std::vector<std::size_t>& picks) {
  if (picks.empty()) throw DataError("coverage_radius: empty selection");
  double r = 0.0;
  for (const auto& p : points) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t c : picks) m = std::min(m, l2_dist(p, points[c]));
    r = std::max(r, m);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Immutable set of patch features with their eta weights. Queries are an
/// exact linear scan; ties go to the lower entry index.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::vector<Vec> entries, std::vector<double> weights)
      : entries_(std::move(entries)), weights_(std::move(weights)) {
    if (entries_.size() != weights_.size()) throw DataError("MemoryBank: entries and weights differ in count");
    for (const auto& e : entries_)
      if (e.size() != entries_.front().size() || !all_finite(e)) throw DataError("MemoryBank: bad entry");
    if (!all_finite(weights_)) throw NumericError("MemoryBank: non-finite weight");
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return entries_.empty() ? 0 : entries_.front().size(); }
  const std::vector<Vec>& entries() const { return entries_; }
  const std::vector<double>& weights() const { return weights_; }

  Neighbor nearest(VecView q) const {
    if (entries_.empty()) throw DataError("MemoryBank: empty bank");
    if (q.size() != dim()) throw DataError("MemoryBank: query dimension mismatch");
    Neighbor best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const double d = squared_l2(q, entries_[i]);
      if (d < best.distance) best = Neighbor{i, d};
    }
    best.distance = std::sqrt(best.distance);
    return best;
  }

  bool operator==(const MemoryBank&) const = default;

 private:
  std::vector<Vec> entries_;
  std::vector<double> weights_;
};

struct BankParams {
  std::size_t lof_k = kDefaultLofK;
  double tau = 0.1;
  double fraction = kDefaultCoresetFraction;

  void validate() const {
    if (lof_k < 1) throw ConfigError("bank: lof_k must be >= 1");
    if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("bank: tau must lie in [0, 1)");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("bank: fraction must lie in (0, 1]");
  }
};

struct BankBuild {
  MemoryBank bank;
  std::vector<std::size_t> selected;  // indices into the input, pick order
  std::vector<double> eta;            // of every input patch
};

/// lof -> filter_top_tau -> greedy_coreset; the bank keeps the eta of every
/// selected entry.
inline BankBuild build_bank(const std::vector<Vec>& features, const BankParams& params) {
  params.validate();
  if (features.empty()) throw DataError("build_bank: no patch features");
  BankBuild out;
  out.eta = lof(features, params.lof_k).eta;
  const auto kept = filter_top_tau(out.eta, params.tau);
  std::vector<Vec> kept_feats;
  kept_feats.reserve(kept.size());
  for (auto i : kept) kept_feats.push_back(features[i]);
  std::vector<Vec> entries;
  std::vector<double> weights;
  for (auto j : greedy_coreset(kept_feats, params.fraction)) {
    out.selected.push_back(kept[j]);
    entries.push_back(features[kept[j]]);
    weights.push_back(out.eta[kept[j]]);
  }
  out.bank = MemoryBank(std::move(entries), std::move(weights));
  return out;
}

inline TensorPack bank_to_pack(const MemoryBank& b) {
  Vec flat;
  flat.reserve(b.size() * b.dim());
  for (const auto& e : b.entries()) flat.insert(flat.end(), e.begin(), e.end());
  return TensorPack{{"entries", Tensor{{b.size(), b.dim()}, std::move(flat)}},
                    {"weights", Tensor{{b.size()}, b.weights()}}};
}

inline MemoryBank bank_from_pack(const TensorPack& p) {
  const Tensor& e = require(p, "entries");
  const Tensor& w = require(p, "weights");
  if (e.shape.size() != 2 || w.shape.size() != 1 || w.shape[0] != e.shape[0])
    throw ParseError(ParseErrc::ShapeMismatch, "memory bank tensors");
  std::vector<Vec> entries(e.shape[0]);
  for (std::size_t i = 0; i < entries.size(); ++i)
    entries[i].assign(e.values.begin() + static_cast<std::ptrdiff_t>(i * e.shape[1]),
                      e.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * e.shape[1]));
  return MemoryBank(std::move(entries), w.values);
}

inline void write_bank(const MemoryBank& b, const std::filesystem::path& path) { write_pack(bank_to_pack(b), path); }
inline MemoryBank read_bank(const std::filesystem::path& path) { return bank_from_pack(read_pack(path)); }

}  // namespace mmnr
