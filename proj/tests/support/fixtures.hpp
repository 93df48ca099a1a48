#pragma once
// Random inputs shared by the unit and acceptance tests.

#include <string>
#include <vector>

#include "mmnr/io.hpp"
#include "mmnr/synth.hpp"

namespace fixture {

using namespace mmnr;

inline Vec random_vec(Rng& rng, std::size_t d, double lo = -1.0, double hi = 1.0) {
  Vec v(d);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline std::vector<Vec> random_points(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<Vec> pts(n);
  for (auto& p : pts) p = random_vec(rng, d);
  return pts;
}

/// Values exactly representable in float32, so a stored bundle reads back
/// bit-identical. The volatile keeps g++ 11's SLP vectorizer from dropping
/// the double->float->double round trip when this is inlined (seen at -O3).
inline double f32(double x) {
  volatile float f = static_cast<float>(x);
  return static_cast<double>(f);
}

inline Mask random_mask(Rng& rng, std::size_t n, double p_one) {
  Mask m(n);
  for (auto& b : m) b = rng.uniform() < p_one ? 1 : 0;
  return m;
}

inline FeatureGrid random_grid(Rng& rng, std::size_t h, std::size_t w, std::size_t d, bool token) {
  Vec data(h * w * d);
  for (double& x : data) x = f32(rng.uniform(-1.0, 1.0));
  std::optional<Vec> t;
  if (token) {
    t = Vec(d);
    for (double& x : *t) x = f32(rng.uniform(-1.0, 1.0));
  }
  return FeatureGrid(h, w, d, std::move(data), random_mask(rng, h * w, 0.8), std::move(t));
}

inline FeatureBundle random_bundle(Rng& rng, const std::string& id) {
  const std::size_t h = 1 + rng.index(12), w = 1 + rng.index(12);
  const std::size_t dr = 1 + rng.index(9), dp = 1 + rng.index(9);
  std::vector<Point3> pos(h * w);
  for (auto& p : pos) p = Point3{f32(rng.uniform(-2, 2)), f32(rng.uniform(-2, 2)), f32(rng.uniform(-2, 2))};
  const bool anomalous = rng.uniform() < 0.5;
  std::optional<Mask> gt;
  if (anomalous || rng.uniform() < 0.3) gt = anomalous ? random_mask(rng, h * w, 0.3) : Mask(h * w, 0);
  return FeatureBundle{random_grid(rng, h, w, dr, rng.uniform() < 0.5),
                       random_grid(rng, h, w, dp, rng.uniform() < 0.5),
                       OrganizedPointCloud(h, w, std::move(pos), random_mask(rng, h * w, 0.7)),
                       id,
                       anomalous ? Label::Anomalous : Label::Normal,
                       std::move(gt)};
}

/// A small synthetic dataset that keeps end-to-end tests fast.
inline SynthSpec small_spec() {
  SynthSpec s;
  s.classes = 2;
  s.train_per_class = 40;
  s.test_per_class = 16;
  s.grid = 16;
  s.rgb_dim = 8;
  s.pc_dim = 8;
  return s;
}

}  // namespace fixture
