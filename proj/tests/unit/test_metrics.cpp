#include <gtest/gtest.h>

#include <cmath>

#include "mmnr/metrics.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace mmnr;

namespace {

struct Instance {
  std::size_t h, w;
  std::vector<ScoreMap> maps;
  std::vector<Mask> gts;
};

// Blobby masks and scores that correlate with them, with coarse quantization
// so thresholds tie.
Instance random_instance(Rng& rng) {
  Instance in{2 + rng.index(7), 2 + rng.index(7), {}, {}};
  const std::size_t n = 1 + rng.index(4);
  bool any = false;
  for (std::size_t k = 0; k < n; ++k) {
    Mask m(in.h * in.w, 0);
    const std::size_t r = rng.index(in.h), c = rng.index(in.w);
    for (std::size_t u = 0; u < in.h; ++u)
      for (std::size_t v = 0; v < in.w; ++v)
        if ((u == r && v + 1 >= c && v <= c + 1) || rng.uniform() < 0.1) m[u * in.w + v] = 1;
    Vec s(m.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::round(8.0 * (rng.uniform() + (m[i] ? 0.4 : 0.0))) / 8.0;
    any |= std::count(m.begin(), m.end(), 0) > 0;
    in.maps.emplace_back(in.h, in.w, std::move(s));
    in.gts.push_back(std::move(m));
  }
  if (!any) in.gts[0][0] = 0;
  return in;
}

double oracle_aupro(const Instance& in, double limit) {
  std::vector<std::vector<double>> maps;
  std::vector<std::vector<std::uint8_t>> gts;
  for (const auto& m : in.maps) maps.push_back(m.scores());
  for (const auto& g : in.gts) gts.emplace_back(g.begin(), g.end());
  return oracle::aupro(maps, gts, in.h, in.w, limit);
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_DOUBLE_EQ(auroc({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auroc({0.4, 0.4, 0.4, 0.4}, {1, 0, 1, 0}), 0.5);
  // 0.9 beats both negatives, 0.3 beats neither
  EXPECT_DOUBLE_EQ(auroc({0.9, 0.3, 0.8, 0.4}, {1, 1, 0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(auroc({0.9, 0.3, 0.8, 0.2}, {1, 1, 0, 0}), 0.75);
  EXPECT_DOUBLE_EQ(auroc({0.5, 0.3, 0.5, 0.2}, {1, 1, 0, 0}), 0.625);
}

TEST(Auroc, MatchesPairCountingOracle) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.index(300);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.3;
      s[i] = std::round(rng.uniform() * 20.0 + y[i] * 4.0);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auroc(s, y), oracle::auroc(s, y), 1e-12);
  }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
  Rng rng(2);
  std::vector<double> s(200);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < s.size(); ++i) {
    y[i] = i % 3 == 0;
    s[i] = rng.uniform(-2.0, 2.0) + y[i];
  }
  std::vector<double> t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3.0 * s[i]) + 7.0;
  EXPECT_EQ(auroc(s, y), auroc(t, y));
}

TEST(Auroc, SingleClassIsError) {
  EXPECT_THROW(auroc({0.1, 0.2}, {1, 1}), DataError);
  EXPECT_THROW(auroc({0.1, 0.2}, {0, 0}), DataError);
  EXPECT_THROW(auroc({0.1}, {0, 1}), DataError);
}

TEST(ConnectedComponents, Examples) {
  Mask rect(5 * 6, 0);
  for (std::size_t u = 1; u < 4; ++u)
    for (std::size_t v = 2; v < 5; ++v) rect[u * 6 + v] = 1;
  const auto c = connected_components(rect, 5, 6);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].size(), 9u);

  EXPECT_EQ(connected_components(Mask{1, 0, 0, 1}, 2, 2).size(), 1u);
  EXPECT_EQ(connected_components(Mask{0, 1, 1, 0}, 2, 2).size(), 1u);
  EXPECT_EQ(connected_components(Mask{1, 0, 1, 0, 0, 0, 1, 0, 1}, 3, 3).size(), 4u);
  EXPECT_TRUE(connected_components(Mask(9, 0), 3, 3).empty());
}

TEST(ConnectedComponents, MatchesFloodFillOracle) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 1 + rng.index(10), w = 1 + rng.index(10);
    const Mask m = fixture::random_mask(rng, h * w, 0.45);
    auto a = connected_components(m, h, w);
    auto b = oracle::regions(std::vector<std::uint8_t>(m.begin(), m.end()), h, w);
    for (auto& x : a) std::sort(x.begin(), x.end());
    for (auto& x : b) std::sort(x.begin(), x.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(Aupro, PerfectPredictionIsOne) {
  Mask g(8 * 8, 0);
  for (std::size_t i : {9u, 10u, 17u, 18u, 45u}) g[i] = 1;
  Vec s(64, 0.1);
  for (std::size_t i = 0; i < 64; ++i)
    if (g[i]) s[i] = 0.9;
  EXPECT_NEAR(aupro({ScoreMap(8, 8, s)}, {g}), 1.0, 1e-12);
}

TEST(Aupro, ConstantMapIsChance) {
  for (std::size_t k : {1u, 5u, 20u}) {
    Mask g(36, 0);
    for (std::size_t i = 0; i < k; ++i) g[i] = 1;
    const Instance in{6, 6, {ScoreMap(6, 6, Vec(36, 0.3))}, {g}};
    const double want = oracle_aupro(in, 0.3);
    EXPECT_NEAR(want, 0.15, 1e-12);
    EXPECT_NEAR(aupro(in.maps, in.gts), want, 1e-12);
  }
}

TEST(Aupro, MatchesExhaustiveSweepOracle) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const Instance in = random_instance(rng);
    bool has_anomaly = false;
    for (const auto& g : in.gts) has_anomaly |= std::count(g.begin(), g.end(), 1) > 0;
    if (!has_anomaly) continue;
    for (double limit : {0.3, 1.0, 0.05})
      EXPECT_NEAR(aupro(in.maps, in.gts, limit), oracle_aupro(in, limit), 1e-3) << t << " " << limit;
  }
}

TEST(Aupro, RaisingScoresInsideDefectsNeverHurts) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    Instance in = random_instance(rng);
    const double base = aupro(in.maps, in.gts);
    for (std::size_t k = 0; k < in.maps.size(); ++k) {
      Vec s = in.maps[k].scores();
      for (std::size_t i = 0; i < s.size(); ++i)
        if (in.gts[k][i]) s[i] += 0.25;
      in.maps[k] = ScoreMap(in.h, in.w, std::move(s));
    }
    EXPECT_GE(aupro(in.maps, in.gts) + 1e-12, base);
  }
}

TEST(Aupro, Errors) {
  EXPECT_THROW(aupro({ScoreMap(2, 2, Vec(4, 0.0))}, {Mask(4, 0)}), DataError);
  EXPECT_THROW(aupro({ScoreMap(2, 2, Vec(4, 0.0))}, {Mask{1, 0, 0, 0}}, 0.0), ConfigError);
  EXPECT_THROW(aupro({ScoreMap(2, 2, Vec(4, 0.0))}, {}), DataError);
}

TEST(PixelAuroc, PoolsEveryPixel) {
  const std::vector<ScoreMap> maps{ScoreMap(1, 2, Vec{0.9, 0.1}), ScoreMap(1, 2, Vec{0.3, 0.8})};
  const std::vector<Mask> gts{Mask{1, 0}, Mask{0, 1}};
  EXPECT_DOUBLE_EQ(pixel_auroc(maps, gts), 1.0);
  EXPECT_DOUBLE_EQ(pixel_auroc(maps, {Mask{1, 0}, Mask{1, 0}}), oracle::auroc({0.9, 0.1, 0.3, 0.8}, {1, 0, 1, 0}));
}
