#pragma once
// Decision layer fusion: per-bank image scores (phi) and patch distance maps
// (psi) for the image, point and fused banks, combined by two linear
// one-class SVMs trained with stochastic subgradient steps.

#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <vector>

#include "mmnr/align.hpp"
#include "mmnr/coreset.hpp"
#include "mmnr/fusion.hpp"
#include "mmnr/preprocess.hpp"

namespace mmnr {

/// Nearest distance of `f` to the bank and the largest weight among the
/// entries at exactly that distance.
inline std::pair<double, double> nearest_weighted(const MemoryBank& bank, VecView f) {
  if (f.size() != bank.dim()) throw DataError("phi: feature dimension mismatch");
  double best = std::numeric_limits<double>::infinity(), weight = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const double d = squared_l2(f, bank.entries()[i]);
    if (d < best) {
      best = d;
      weight = bank.weights()[i];
    } else if (d == best) {
      weight = std::max(weight, bank.weights()[i]);
    }
  }
  return {std::sqrt(best), weight};
}

/// eta(m*) * ||f* - m*|| for the patch f* farthest from its nearest bank
/// entry m*. Among equally far patches the larger weighted value wins, so the
/// result does not depend on patch or entry order.
inline double phi(const MemoryBank& bank, const std::vector<Vec>& patches) {
  if (bank.empty()) throw DataError("phi: empty bank");
  if (patches.empty()) throw DataError("phi: no patches");
  std::vector<std::pair<double, double>> nw(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) { nw[i] = nearest_weighted(bank, patches[i]); });
  double far = -1.0, score = 0.0;
  for (const auto& [d, w] : nw) {
    if (d > far) {
      far = d;
      score = w * d;
    } else if (d == far) {
      score = std::max(score, w * d);
    }
  }
  return score;
}

/// Per-patch nearest-bank distance on the patch grid; cells without a patch
/// are 0.
inline AnomalyMap psi(const MemoryBank& bank, const std::vector<Vec>& patches, const std::vector<std::size_t>& cells,
                      std::size_t h, std::size_t w) {
  if (bank.empty()) throw DataError("psi: empty bank");
  if (patches.size() != cells.size()) throw DataError("psi: patches and cells differ in count");
  Vec m(h * w, 0.0);
  parallel_for(patches.size(), [&](std::size_t i) {
    if (cells[i] >= m.size()) throw DataError("psi: cell out of range");
    m[cells[i]] = bank.nearest(patches[i]).distance;
  });
  return AnomalyMap(h, w, std::move(m));
}

// ---------------------------------------------------------------------------
// Linear one-class SVM
// ---------------------------------------------------------------------------

using Triple = std::array<double, 3>;

struct OcsvmParams {
  double nu = 0.5;
  double lr = 1e-4;
  std::size_t steps = 1000;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  bool standardize = false;

  void validate() const {
    if (!(nu > 0.0 && nu <= 1.0)) throw ConfigError("ocsvm: nu must lie in (0, 1]");
    if (!(lr >= 0.0)) throw ConfigError("ocsvm: lr must be >= 0");
    if (batch == 0) throw ConfigError("ocsvm: batch must be >= 1");
  }
};

struct Ocsvm {
  Triple w{1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)};
  double rho = 0.0;
  double nu = 0.5;
  Triple mean{0.0, 0.0, 0.0};
  Triple scale{1.0, 1.0, 1.0};
  bool fallback = false;

  Triple transform(const Triple& x) const {
    return {(x[0] - mean[0]) / scale[0], (x[1] - mean[1]) / scale[1], (x[2] - mean[2]) / scale[2]};
  }

  /// w . x - rho on the (optionally standardized) input.
  double decision(const Triple& x) const {
    const Triple t = transform(x);
    return w[0] * t[0] + w[1] * t[1] + w[2] * t[2] - rho;
  }

  bool operator==(const Ocsvm&) const = default;
};

inline double tdot(const Triple& a, const Triple& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

/// 1/2 |w|^2 + 1/(nu n) sum max(0, rho - w.x) - rho.
inline double ocsvm_objective(const Triple& w, double rho, const std::vector<Triple>& x, double nu) {
  double hinge = 0.0;
  for (const auto& xi : x) hinge += std::max(0.0, rho - tdot(w, xi));
  return 0.5 * tdot(w, w) + hinge / (nu * static_cast<double>(x.size())) - rho;
}

struct OcsvmGradient {
  Triple dw{0.0, 0.0, 0.0};
  double drho = 0.0;
};

/// Subgradient of the objective over the rows of `x` listed in `rows`; a
/// hinge exactly at its kink counts as inactive.
inline OcsvmGradient ocsvm_subgradient(const Triple& w, double rho, const std::vector<Triple>& x,
                                       const std::vector<std::size_t>& rows, double nu) {
  OcsvmGradient g{w, -1.0};
  const double c = 1.0 / (nu * static_cast<double>(rows.size()));
  for (std::size_t r : rows)
    if (rho - tdot(w, x[r]) > 0.0) {
      for (int k = 0; k < 3; ++k) g.dw[k] -= c * x[r][k];
      g.drho += c;
    }
  return g;
}

inline OcsvmGradient ocsvm_subgradient(const Triple& w, double rho, const std::vector<Triple>& x, double nu) {
  std::vector<std::size_t> rows(x.size());
  std::iota(rows.begin(), rows.end(), 0);
  return ocsvm_subgradient(w, rho, x, rows, nu);
}

/// Minibatch subgradient descent from w = (1,1,1)/sqrt 3, rho = 0, reshuffling
/// each epoch. Identical inputs fall back to equal weights through the point.
inline Ocsvm train_ocsvm(const std::vector<Triple>& raw, const OcsvmParams& params) {
  params.validate();
  if (raw.size() < 2) throw DataError("train_ocsvm: need at least 2 training triples");
  for (const auto& t : raw)
    for (double v : t)
      if (!std::isfinite(v)) throw NumericError("train_ocsvm: non-finite training score");
  Ocsvm m;
  m.nu = params.nu;
  if (std::all_of(raw.begin(), raw.end(), [&](const Triple& t) { return t == raw.front(); })) {
    std::cerr << "warning: ocsvm training inputs are all identical; using equal weights\n";
    m.fallback = true;
    m.rho = tdot(m.w, raw.front());
    return m;
  }
  if (params.standardize) {
    for (int k = 0; k < 3; ++k) {
      double s = 0.0, ss = 0.0;
      for (const auto& t : raw) s += t[k];
      m.mean[k] = s / static_cast<double>(raw.size());
      for (const auto& t : raw) ss += (t[k] - m.mean[k]) * (t[k] - m.mean[k]);
      const double sd = std::sqrt(ss / static_cast<double>(raw.size()));
      m.scale[k] = sd > 1e-12 ? sd : 1.0;
    }
  }
  std::vector<Triple> x(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) x[i] = m.transform(raw[i]);

  Rng rng(mix_seed(params.seed ^ 0x6f637376ull));
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t b = std::min(params.batch, x.size());
  std::vector<std::size_t> rows(b);
  for (std::size_t step = 0; step < params.steps; ++step) {
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      rows[i] = order[cursor++];
    }
    const OcsvmGradient g = ocsvm_subgradient(m.w, m.rho, x, rows, params.nu);
    for (int k = 0; k < 3; ++k) m.w[k] -= params.lr * g.dw[k];
    m.rho -= params.lr * g.drho;
  }
  if (!std::isfinite(m.rho) || !std::isfinite(tdot(m.w, m.w))) throw NumericError("train_ocsvm: parameters diverged");
  return m;
}

inline TensorPack ocsvm_to_pack(const Ocsvm& m) {
  return TensorPack{{"w", Tensor{{3}, {m.w[0], m.w[1], m.w[2]}}},
                    {"rho", Tensor{{1}, {m.rho}}},
                    {"nu", Tensor{{1}, {m.nu}}},
                    {"mean", Tensor{{3}, {m.mean[0], m.mean[1], m.mean[2]}}},
                    {"scale", Tensor{{3}, {m.scale[0], m.scale[1], m.scale[2]}}},
                    {"fallback", Tensor{{1}, {m.fallback ? 1.0 : 0.0}}}};
}

inline Ocsvm ocsvm_from_pack(const TensorPack& p) {
  const auto triple = [&](const char* name) {
    const Tensor& t = require(p, name);
    if (t.values.size() != 3) throw ParseError(ParseErrc::ShapeMismatch, std::string("ocsvm ") + name);
    return Triple{t.values[0], t.values[1], t.values[2]};
  };
  const auto scalar = [&](const char* name) {
    const Tensor& t = require(p, name);
    if (t.values.size() != 1) throw ParseError(ParseErrc::ShapeMismatch, std::string("ocsvm ") + name);
    return t.values[0];
  };
  Ocsvm m;
  m.w = triple("w");
  m.rho = scalar("rho");
  m.nu = scalar("nu");
  m.mean = triple("mean");
  m.scale = triple("scale");
  m.fallback = scalar("fallback") != 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Final outputs
// ---------------------------------------------------------------------------

struct Banks {
  MemoryBank rgb, pc, fused;
};

struct DecisionModel {
  Banks banks;
  Ocsvm image, pixel;
};

struct DecisionOutput {
  double s_image = 0.0;
  ScoreMap s_pixel;     // full resolution
  ScoreMap patch_map;   // on the patch grid, before resizing
};

/// Mean over the in-bounds 3 x 3 neighbourhood of every pixel.
inline ScoreMap smooth3x3(const ScoreMap& m) {
  const std::size_t h = m.height(), w = m.width();
  Vec out(h * w, 0.0);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      double s = 0.0;
      int n = 0;
      for (std::size_t a = u ? u - 1 : 0; a <= std::min(u + 1, h - 1); ++a)
        for (std::size_t b = v ? v - 1 : 0; b <= std::min(v + 1, w - 1); ++b) {
          s += m.at(a, b);
          ++n;
        }
      out[u * w + v] = s / n;
    }
  return ScoreMap(h, w, std::move(out));
}

inline Triple phi_triple(const Banks& banks, const PatchSet& ps) {
  return {phi(banks.rgb, ps.rgb), phi(banks.pc, ps.pc), phi(banks.fused, ps.fused)};
}

/// Per-cell psi triples of a sample on its patch grid (cells with patches).
inline std::vector<Triple> psi_triples(const Banks& banks, const PatchSet& ps) {
  const AnomalyMap a = psi(banks.rgb, ps.rgb, ps.cells, ps.height, ps.width);
  const AnomalyMap b = psi(banks.pc, ps.pc, ps.cells, ps.height, ps.width);
  const AnomalyMap c = psi(banks.fused, ps.fused, ps.cells, ps.height, ps.width);
  std::vector<Triple> out;
  out.reserve(ps.cells.size());
  for (std::size_t cell : ps.cells) out.push_back({a.at(cell), b.at(cell), c.at(cell)});
  return out;
}

/// Image score and pixel map of one sample. Cells without a patch carry the
/// all-zero psi triple. The pixel map is resized to h x w and, if requested,
/// smoothed with a 3 x 3 mean filter.
inline DecisionOutput decide(const PatchSet& ps, const DecisionModel& model, std::size_t h, std::size_t w,
                             bool smooth = true) {
  if (model.banks.rgb.empty() || model.banks.pc.empty() || model.banks.fused.empty())
    throw DataError("decide: missing memory bank");
  if (ps.fused.size() != ps.size()) throw DataError("decide: patches have not been fused");
  DecisionOutput out;
  if (ps.size() == 0) {
    out.s_image = model.image.decision({0.0, 0.0, 0.0});
  } else {
    out.s_image = model.image.decision(phi_triple(model.banks, ps));
  }
  Vec grid(ps.height * ps.width, model.pixel.decision({0.0, 0.0, 0.0}));
  if (ps.size()) {
    const auto triples = psi_triples(model.banks, ps);
    for (std::size_t i = 0; i < ps.cells.size(); ++i) grid[ps.cells[i]] = model.pixel.decision(triples[i]);
  }
  out.patch_map = ScoreMap(ps.height, ps.width, std::move(grid));
  out.s_pixel = resize_bilinear(out.patch_map, h, w);
  if (smooth) out.s_pixel = smooth3x3(out.s_pixel);
  return out;
}

}  // namespace mmnr
