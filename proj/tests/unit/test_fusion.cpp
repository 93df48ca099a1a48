#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mmnr/fusion.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace mmnr;

namespace {

const FusionConfig kSmall{3, 4, 4, 5, 0.07};

std::vector<Vec> flat_params(FusionHead h) {
  std::vector<Vec> out;
  for (Vec* p : h.parameters()) out.push_back(*p);
  return out;
}

std::vector<PatchPair> random_pairs(Rng& rng, std::size_t n, std::size_t dr, std::size_t dp) {
  std::vector<PatchPair> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(PatchPair{fixture::random_vec(rng, dr), fixture::random_vec(rng, dp)});
  return b;
}

// Both modalities are noisy linear views of a shared latent.
struct Correlated {
  std::vector<Vec> a, b;
  Rng noise;

  Correlated(std::size_t dr, std::size_t dp, std::size_t latent, std::uint64_t seed) : noise(seed) {
    for (std::size_t i = 0; i < dr; ++i) a.push_back(fixture::random_vec(noise, latent));
    for (std::size_t i = 0; i < dp; ++i) b.push_back(fixture::random_vec(noise, latent));
  }

  PatchPair draw() {
    const Vec z = fixture::random_vec(noise, a[0].size());
    PatchPair p{Vec(a.size()), Vec(b.size())};
    for (std::size_t i = 0; i < a.size(); ++i) p.rgb[i] = dot(a[i], z) + 0.05 * noise.normal();
    for (std::size_t i = 0; i < b.size(); ++i) p.pc[i] = dot(b[i], z) + 0.05 * noise.normal();
    return p;
  }
};

double top1_retrieval(const std::vector<PatchPair>& batch, const FusionHead& head) {
  std::vector<UffOutput> out;
  for (const auto& p : batch) out.push_back(uff_forward(p.rgb, p.pc, head));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < batch.size(); ++j)
      if (dot(out[i].h_rgb, out[j].h_pc) > dot(out[i].h_rgb, out[best].h_pc)) best = j;
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

}  // namespace

TEST(UffForward, ZeroHeadFusesToZero) {
  const FusionHead z = FusionHead::init(kSmall, 1).zeros_like();
  Rng rng(1);
  const auto out = uff_forward(fixture::random_vec(rng, 3), fixture::random_vec(rng, 4), z);
  ASSERT_EQ(out.fused.size(), 7u);
  for (double x : out.fused) EXPECT_EQ(x, 0.0);
}

TEST(UffForward, ProjectionsAreUnitNorm) {
  const FusionHead h = FusionHead::init(kSmall, 2);
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Vec x = fixture::random_vec(rng, 3), y = fixture::random_vec(rng, 4);
    const auto out = uff_forward(x, y, h);
    EXPECT_NEAR(norm(out.h_rgb), 1.0, 1e-12);
    EXPECT_NEAR(norm(out.h_pc), 1.0, 1e-12);
    EXPECT_EQ(out.fused, uff_fuse(x, y, h));
  }
}

TEST(UffForward, StackedIdentityMatchesHandMatmul) {
  const std::size_t d = 3;
  FusionHead h = FusionHead::init(FusionConfig{d, d, 4, 2, 0.07}, 3);
  Rng rng(3);
  for (Mlp* m : {&h.mlp_rgb, &h.mlp_pc}) {
    std::fill(m->hidden.weight.begin(), m->hidden.weight.end(), 0.0);
    std::fill(m->hidden.bias.begin(), m->hidden.bias.end(), 0.0);
    for (std::size_t r = 0; r < 4 * d; ++r) m->hidden.weight[r * d + r % d] = 1.0;
    std::fill(m->output.bias.begin(), m->output.bias.end(), 0.0);
  }
  const Vec x = fixture::random_vec(rng, d, 0.0, 1.0), y = fixture::random_vec(rng, d, 0.0, 1.0);
  const Vec fused = uff_fuse(x, y, h);
  ASSERT_EQ(fused.size(), 2 * d);
  for (int m = 0; m < 2; ++m) {
    const Linear& out = m == 0 ? h.mlp_rgb.output : h.mlp_pc.output;
    const Vec& in = m == 0 ? x : y;
    for (std::size_t o = 0; o < d; ++o) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4 * d; ++c) s += out.weight[o * 4 * d + c] * in[c % d];
      EXPECT_NEAR(fused[m * d + o], s, 1e-14);
    }
  }
}

TEST(UffForward, DimensionMismatchIsError) {
  const FusionHead h = FusionHead::init(kSmall, 4);
  EXPECT_THROW(uff_forward(Vec(4), Vec(4), h), DataError);
}

TEST(InfoNce, EqualLogitsGiveLogB) {
  for (std::size_t b : {2u, 3u, 7u, 16u}) {
    const std::vector<Vec> l(b, Vec(b, 0.3));
    EXPECT_NEAR(infonce_from_logits(l), std::log(static_cast<double>(b)), 1e-14);
  }
}

TEST(InfoNce, ThreePairsHandComputed) {
  const std::vector<Vec> l{{2, 0, 1}, {0, 1, 0}, {1, 1, 3}};
  const double e = std::exp(1.0);
  // rows
  const double r0 = std::log(e * e + 1 + e) - 2, r1 = std::log(1 + e + 1) - 1, r2 = std::log(e + e + e * e * e) - 3;
  // columns
  const double c0 = std::log(e * e + 1 + e) - 2, c1 = std::log(1 + e + e) - 1, c2 = std::log(e + 1 + e * e * e) - 3;
  EXPECT_NEAR(infonce_from_logits(l), ((r0 + r1 + r2) / 3 + (c0 + c1 + c2) / 3) / 2, 1e-14);
}

TEST(InfoNce, LimitOfSeparatedPositives) {
  std::vector<Vec> l(4, Vec(4, -1e3));
  for (std::size_t i = 0; i < 4; ++i) l[i][i] = 1e3;
  EXPECT_NEAR(infonce_from_logits(l), 0.0, 1e-300);
  EXPECT_GE(infonce_from_logits(l), 0.0);
}

TEST(InfoNce, SinglePairIsError) {
  EXPECT_THROW(infonce_from_logits({{1.0}}), DataError);
  Rng rng(5);
  EXPECT_THROW(infonce_loss(random_pairs(rng, 1, 3, 4), FusionHead::init(kSmall, 5)), DataError);
}

TEST(InfoNce, NonNegativeOnRandomBatches) {
  Rng rng(6);
  for (int t = 0; t < 30; ++t) {
    const FusionHead h = FusionHead::init(kSmall, t);
    EXPECT_GE(infonce_loss(random_pairs(rng, 2 + rng.index(10), 3, 4), h), 0.0);
  }
}

TEST(InfoNce, LogitGradientMatchesFiniteDifference) {
  Rng rng(7);
  std::vector<Vec> l(4, Vec(4));
  for (auto& row : l) row = fixture::random_vec(rng, 4, -3.0, 3.0);
  std::vector<Vec> g;
  infonce_from_logits(l, &g);
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec n = oracle::numeric_gradient(
        [&](const Vec& row) {
          auto m = l;
          m[i] = row;
          return infonce_from_logits(m);
        },
        l[i], 1e-5);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g[i][j], n[j], 1e-9);
  }
}

TEST(InfoNce, ParameterGradientMatchesFiniteDifference) {
  Rng rng(8);
  const FusionHead head = FusionHead::init(kSmall, 8);
  const auto batch = random_pairs(rng, 6, 3, 4);
  FusionHead grad = head.zeros_like();
  infonce_loss(batch, head, &grad);
  const auto analytic = flat_params(grad);
  double worst = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const Vec n = oracle::numeric_gradient(
        [&](const Vec& x) {
          FusionHead h = head;
          *h.parameters()[k] = x;
          return infonce_loss(batch, h);
        },
        *FusionHead(head).parameters()[k], 1e-5);
    for (std::size_t i = 0; i < n.size(); ++i) {
      const double a = analytic[k][i];
      const double rel = std::abs(a - n[i]) / std::max({std::abs(a), std::abs(n[i]), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(LearningRate, WarmupThenCosine) {
  TrainConfig cfg;
  EXPECT_NEAR(learning_rate(cfg, 0), cfg.lr / 250.0, 1e-18);
  EXPECT_NEAR(learning_rate(cfg, 249), cfg.lr, 1e-18);
  EXPECT_NEAR(learning_rate(cfg, 250), cfg.lr, 1e-18);
  EXPECT_NEAR(learning_rate(cfg, 500), cfg.lr / 2.0, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 750), 0.0, 1e-18);
  for (std::size_t s = 1; s < 750; ++s) {
    if (s < 250) {
      EXPECT_GT(learning_rate(cfg, s), learning_rate(cfg, s - 1));
    } else if (s > 250) {
      EXPECT_LT(learning_rate(cfg, s), learning_rate(cfg, s - 1));
    }
  }
}

namespace {

std::vector<SamplePatches> correlated_samples(std::size_t n, std::size_t p, std::uint64_t seed) {
  Correlated gen(6, 5, 4, seed);
  std::vector<SamplePatches> s(n);
  for (auto& sp : s)
    for (std::size_t i = 0; i < p; ++i) sp.push_back(gen.draw());
  return s;
}

}  // namespace

TEST(TrainUff, ZeroLearningRateLeavesInitialization) {
  const FusionConfig fc{6, 5, 4, 8, 0.07};
  TrainConfig tc;
  tc.lr = 0.0;
  tc.steps = 20;
  tc.batch = 4;
  tc.seed = 9;
  const FusionHead h = train_uff(correlated_samples(10, 4, 1), fc, tc);
  EXPECT_EQ(flat_params(h), flat_params(FusionHead::init(fc, 9)));
}

TEST(TrainUff, LearnsCrossModalRetrieval) {
  const std::size_t nb = 4, p = 4;
  const FusionConfig fc{6, 5, 4, 8, 0.07};
  TrainConfig tc;
  tc.batch = nb;
  tc.seed = 10;
  TrainReport rep;
  const FusionHead h = train_uff(correlated_samples(40, p, 2), fc, tc, &rep);
  EXPECT_LT(rep.final_heldout_loss, rep.initial_heldout_loss);
  EXPECT_EQ(rep.losses.size(), 750u);

  // fresh pairs from the same generator
  const auto fresh = correlated_samples(40 + nb, p, 2);
  std::vector<PatchPair> batch;
  for (std::size_t s = 40; s < 40 + nb; ++s) batch.insert(batch.end(), fresh[s].begin(), fresh[s].end());
  const double acc = top1_retrieval(batch, h);
  RecordProperty("top1", std::to_string(acc));
  EXPECT_GT(acc, 1.0 / static_cast<double>(nb * p));
}

TEST(TrainUff, DeterministicForSeed) {
  const FusionConfig fc{6, 5, 4, 8, 0.07};
  TrainConfig tc;
  tc.batch = 4;
  tc.steps = 60;
  tc.warmup_steps = 10;
  tc.seed = 11;
  const auto data = correlated_samples(12, 3, 3);
  TrainReport r1, r2;
  const FusionHead a = train_uff(data, fc, tc, &r1), b = train_uff(data, fc, tc, &r2);
  EXPECT_EQ(flat_params(a), flat_params(b));
  EXPECT_EQ(r1.losses, r2.losses);
  tc.seed = 12;
  EXPECT_NE(flat_params(train_uff(data, fc, tc)), flat_params(a));
}

TEST(TrainUff, Errors) {
  const FusionConfig fc{6, 5, 4, 8, 0.07};
  TrainConfig tc;
  tc.batch = 8;
  EXPECT_THROW(train_uff(correlated_samples(15, 2, 4), fc, tc), DataError);
  tc.batch = 0;
  EXPECT_THROW(train_uff(correlated_samples(15, 2, 4), fc, tc), ConfigError);
  FusionConfig bad = fc;
  bad.temperature = 0.0;
  EXPECT_THROW(FusionHead::init(bad, 1), ConfigError);
}

TEST(FusionHeadIo, PackRoundTripAtFloatPrecision) {
  const FusionHead h = FusionHead::init(kSmall, 13);
  const auto path = std::filesystem::temp_directory_path() / "mmnr_test_head.mmnr";
  write_head(h, path);
  const FusionHead r = read_head(path);
  std::filesystem::remove(path);
  auto a = flat_params(h), b = flat_params(r);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    ASSERT_EQ(a[k].size(), b[k].size());
    for (std::size_t i = 0; i < a[k].size(); ++i) EXPECT_EQ(b[k][i], fixture::f32(a[k][i]));
  }
  EXPECT_EQ(r.temperature, fixture::f32(h.temperature));
  EXPECT_EQ(r.rgb_dim(), 3u);
  EXPECT_EQ(r.pc_dim(), 4u);
}
