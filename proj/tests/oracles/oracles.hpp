#pragma once
// Brute-force reference implementations used only by tests. Nothing here
// calls into the library, so a shared bug cannot hide in both.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <utility>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline double dist(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// LOF straight from the definition: N_k(p) holds every q != p with
// d(p, q) <= k-distance(p); reach-dist_k(p, o) = max(k-distance(o), d(p, o)).
inline std::vector<double> lof(const std::vector<Vec>& x, std::size_t k, double reach_floor = 1e-12) {
  const std::size_t n = x.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i][j] = dist(x[i], x[j]);
  std::vector<double> kd(n);
  std::vector<std::vector<std::size_t>> nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(d[i][j]);
    std::sort(others.begin(), others.end());
    kd[i] = others[k - 1];
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && d[i][j] <= kd[i]) nb[i].push_back(j);
  }
  std::vector<double> lrd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t o : nb[i]) s += std::max(kd[o], d[i][o]);
    lrd[i] = 1.0 / std::max(s / static_cast<double>(nb[i].size()), reach_floor);
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t o : nb[i]) s += lrd[o] / lrd[i];
    out[i] = s / static_cast<double>(nb[i].size());
  }
  return out;
}

// Smallest achievable k-center radius, by enumerating every k-subset.
inline double optimal_k_center_radius(const std::vector<Vec>& x, std::size_t k) {
  const std::size_t n = x.size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> pick(n, 0);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), 1);
  std::sort(pick.begin(), pick.end());
  do {
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < n; ++c)
        if (pick[c]) m = std::min(m, dist(x[i], x[c]));
      r = std::max(r, m);
    }
    best = std::min(best, r);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

struct Rect {
  std::size_t r0, r1, c0, c1;
};

// Per-pixel multi-scale aggregation: for each pixel, average weight * score
// over every window that contains it. Uncovered pixels are 0.
inline std::vector<double> aggregate(const std::vector<Rect>& windows, const std::vector<double>& scores,
                                     const std::vector<double>& weight, std::size_t h, std::size_t w) {
  std::vector<double> out(h * w, 0.0);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      double num = 0.0;
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < windows.size(); ++i) {
        const Rect& r = windows[i];
        if (u >= r.r0 && u < r.r1 && v >= r.c0 && v < r.c1) {
          num += weight[u * w + v] * scores[i];
          ++cnt;
        }
      }
      out[u * w + v] = cnt ? num / static_cast<double>(cnt) : 0.0;
    }
  return out;
}

// AUROC as the fraction of (positive, negative) pairs ranked correctly, ties
// counting one half.
inline double auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        if (s[i] > s[j]) good += 1.0;
        else if (s[i] == s[j]) good += 0.5;
      }
  return good / pairs;
}

// 8-connected regions by repeated flood fill with an explicit stack.
inline std::vector<std::vector<std::size_t>> regions(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  std::vector<int> lab(m.size(), -1);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || lab[s] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::vector<std::size_t> stack{s};
    lab[s] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      out.back().push_back(p);
      const auto pu = static_cast<long>(p / w), pv = static_cast<long>(p % w);
      for (long du = -1; du <= 1; ++du)
        for (long dv = -1; dv <= 1; ++dv) {
          const long a = pu + du, b = pv + dv;
          if (a < 0 || b < 0 || a >= static_cast<long>(h) || b >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(a) * w + static_cast<std::size_t>(b);
          if (m[q] && lab[q] < 0) {
            lab[q] = id;
            stack.push_back(q);
          }
        }
    }
  }
  return out;
}

// AUPRO by recomputing (FPR, PRO) from scratch at every unique threshold,
// then integrating the trapezoids up to the limit and normalizing by it.
inline double aupro(const std::vector<std::vector<double>>& maps, const std::vector<std::vector<std::uint8_t>>& gts,
                    std::size_t h, std::size_t w, double limit) {
  std::set<double> thr;
  for (const auto& m : maps) thr.insert(m.begin(), m.end());
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> comps;  // (map, pixels)
  double normals = 0.0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    for (auto& c : regions(gts[k], h, w)) comps.emplace_back(k, std::move(c));
    for (auto g : gts[k]) normals += g ? 0.0 : 1.0;
  }
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (auto it = thr.rbegin(); it != thr.rend(); ++it) {
    const double t = *it;
    double fp = 0.0;
    for (std::size_t k = 0; k < maps.size(); ++k)
      for (std::size_t p = 0; p < maps[k].size(); ++p)
        if (!gts[k][p] && maps[k][p] >= t) fp += 1.0;
    double pro = 0.0;
    for (const auto& [k, px] : comps) {
      double hit = 0.0;
      for (auto p : px) hit += maps[k][p] >= t ? 1.0 : 0.0;
      pro += hit / static_cast<double>(px.size());
    }
    curve.emplace_back(fp / normals, pro / static_cast<double>(comps.size()));
  }
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    auto [x0, y0] = curve[i];
    auto [x1, y1] = curve[i + 1];
    if (x0 >= limit) break;
    if (x1 > limit) {
      y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
      x1 = limit;
    }
    area += (x1 - x0) * (y0 + y1) / 2.0;
  }
  return area / limit;
}

// Central differences of f at x along every coordinate.
inline Vec numeric_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Index of the nearest row (lowest index on ties) and its distance.
inline std::pair<std::size_t, double> nearest(const std::vector<Vec>& rows, const Vec& q) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double d = dist(rows[i], q);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return {best, bd};
}

}  // namespace oracle
