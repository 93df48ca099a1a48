#include <gtest/gtest.h>

#include <filesystem>

#include "mmnr/decision.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace mmnr;

namespace {

MemoryBank unit_bank(std::vector<Vec> entries) {
  const std::size_t n = entries.size();
  return MemoryBank(std::move(entries), Vec(n, 1.0));
}

// A sample whose patches on a 3 x 4 grid are all members of every bank.
struct Scene {
  PatchSet ps;
  DecisionModel model;
};

Scene scene(Rng& rng) {
  Scene s;
  s.ps.height = 3;
  s.ps.width = 4;
  for (std::size_t c : {0u, 1u, 5u, 6u, 7u, 10u}) {
    s.ps.cells.push_back(c);
    s.ps.rgb.push_back(fixture::random_vec(rng, 3));
    s.ps.pc.push_back(fixture::random_vec(rng, 2));
    s.ps.fused.push_back(fixture::random_vec(rng, 5));
  }
  s.model.banks = Banks{unit_bank(s.ps.rgb), unit_bank(s.ps.pc), unit_bank(s.ps.fused)};
  s.model.image.rho = 0.25;
  s.model.pixel.rho = 0.4;
  return s;
}

}  // namespace

TEST(Phi, BankMemberScoresZero) {
  Rng rng(1);
  const auto pts = fixture::random_points(rng, 10, 4);
  EXPECT_EQ(phi(unit_bank(pts), {pts[3], pts[7]}), 0.0);
}

TEST(Phi, SinglePatchIsWeightTimesDistance) {
  const MemoryBank b({Vec{0, 0}, Vec{10, 0}}, {1.7, 0.2});
  EXPECT_NEAR(phi(b, {Vec{3, 4}}), 1.7 * 5.0, 1e-12);
}

TEST(Phi, ArgmaxOfNearestDistances) {
  const MemoryBank b = unit_bank({Vec{0.0}});
  EXPECT_NEAR(phi(b, {Vec{0.1}, Vec{0.5}, Vec{-0.2}}), 0.5, 1e-15);
}

TEST(Phi, WeightComesFromTheMatchedEntry) {
  const MemoryBank b({Vec{0.0}, Vec{1.0}}, {2.0, 0.5});
  EXPECT_NEAR(phi(b, {Vec{-0.5}, Vec{1.1}}), 2.0 * 0.5, 1e-15);
  EXPECT_NEAR(phi(b, {Vec{1.6}}), 0.5 * 0.6, 1e-12);
}

TEST(Phi, PermutationInvariant) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto entries = fixture::random_points(rng, 8, 3);
    Vec w = fixture::random_vec(rng, 8, 0.5, 2.0);
    auto patches = fixture::random_points(rng, 6, 3);
    patches.push_back(patches[0]);  // a repeated patch makes ties likely
    const double ref = phi(MemoryBank(entries, w), patches);
    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<Vec> e2;
    Vec w2;
    for (auto i : perm) e2.push_back(entries[i]), w2.push_back(w[i]);
    rng.shuffle(std::span<Vec>(patches));
    EXPECT_EQ(phi(MemoryBank(e2, w2), patches), ref);
  }
}

TEST(Phi, Errors) {
  EXPECT_THROW(phi(MemoryBank(), {Vec{1}}), DataError);
  EXPECT_THROW(phi(unit_bank({Vec{1}}), {}), DataError);
  EXPECT_THROW(phi(unit_bank({Vec{1}}), {Vec{1, 2}}), DataError);
}

TEST(Psi, MembersGiveZeroMapAndPerturbationIsLocal) {
  Rng rng(3);
  const auto pts = fixture::random_points(rng, 6, 3);
  const std::vector<std::size_t> cells{0, 2, 3, 4, 7, 8};
  const AnomalyMap zero = psi(unit_bank(pts), pts, cells, 3, 3);
  for (double x : zero.scores()) EXPECT_EQ(x, 0.0);
  auto bumped = pts;
  bumped[2][1] += 0.5;
  const AnomalyMap m = psi(unit_bank(pts), bumped, cells, 3, 3);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(m.at(i) > 0.0, i == 3) << i;
}

TEST(Psi, MatchesBruteForceNearest) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const auto bank = fixture::random_points(rng, 20 + rng.index(30), 4);
    const auto patches = fixture::random_points(rng, 12, 4);
    std::vector<std::size_t> cells(12);
    std::iota(cells.begin(), cells.end(), 4);
    Vec w = fixture::random_vec(rng, bank.size(), 0.1, 3.0);
    const AnomalyMap m = psi(MemoryBank(bank, w), patches, cells, 4, 4);
    for (std::size_t i = 0; i < 16; ++i)
      EXPECT_EQ(m.at(i), i < 4 ? 0.0 : oracle::nearest(bank, patches[i - 4]).second);
  }
}

TEST(Psi, Errors) {
  EXPECT_THROW(psi(MemoryBank(), {}, {}, 2, 2), DataError);
  EXPECT_THROW(psi(unit_bank({Vec{1}}), {Vec{1}}, {}, 2, 2), DataError);
  EXPECT_THROW(psi(unit_bank({Vec{1}}), {Vec{1}}, {4}, 2, 2), DataError);
}

TEST(Ocsvm, ZeroLearningRateKeepsInitialization) {
  Rng rng(5);
  std::vector<Triple> x;
  for (int i = 0; i < 50; ++i) x.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  OcsvmParams p;
  p.lr = 0.0;
  const Ocsvm m = train_ocsvm(x, p);
  const double c = 1.0 / std::sqrt(3.0);
  EXPECT_EQ(m.w, (Triple{c, c, c}));
  EXPECT_EQ(m.rho, 0.0);
  EXPECT_FALSE(m.fallback);
}

TEST(Ocsvm, SubgradientMatchesFiniteDifference) {
  Rng rng(6);
  std::vector<Triple> x;
  for (int i = 0; i < 40; ++i) x.push_back({rng.uniform(), rng.uniform(-1, 1), rng.uniform(0, 2)});
  int checked = 0;
  for (int t = 0; t < 30; ++t) {
    const Triple w{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double rho = rng.uniform(-0.5, 0.5);
    const double nu = rng.uniform(0.1, 1.0);
    const double h = 1e-6;
    bool near_kink = false;
    for (const auto& xi : x) near_kink |= std::abs(rho - tdot(w, xi)) < 1e-3;
    if (near_kink) continue;
    ++checked;
    const OcsvmGradient g = ocsvm_subgradient(w, rho, x, nu);
    const Vec params{w[0], w[1], w[2], rho};
    const Vec n = oracle::numeric_gradient(
        [&](const Vec& v) { return ocsvm_objective({v[0], v[1], v[2]}, v[3], x, nu); }, params, h);
    const Vec a{g.dw[0], g.dw[1], g.dw[2], g.drho};
    for (int k = 0; k < 4; ++k) EXPECT_LT(std::abs(a[k] - n[k]) / std::max({std::abs(a[k]), std::abs(n[k]), 1e-6}), 1e-4);
  }
  EXPECT_GT(checked, 10);
}

TEST(Ocsvm, NearIdenticalInputsPutTheBoundaryThroughThePoint) {
  Rng rng(7);
  const Triple v{0.02, 0.03, 0.01};
  std::vector<Triple> x;
  for (int i = 0; i < 64; ++i) x.push_back({v[0] + 1e-7 * rng.normal(), v[1] + 1e-7 * rng.normal(), v[2] + 1e-7 * rng.normal()});
  const Ocsvm m = train_ocsvm(x, OcsvmParams{});
  EXPECT_FALSE(m.fallback);
  EXPECT_LT(std::abs(tdot(m.w, v) - m.rho), 1e-3);
}

TEST(Ocsvm, IdenticalInputsFallBack) {
  const Triple v{0.5, 2.0, 1.0};
  const Ocsvm m = train_ocsvm(std::vector<Triple>(5, v), OcsvmParams{});
  EXPECT_TRUE(m.fallback);
  const double c = 1.0 / std::sqrt(3.0);
  EXPECT_EQ(m.w, (Triple{c, c, c}));
  EXPECT_NEAR(m.rho, c * 3.5, 1e-15);
  EXPECT_NEAR(m.decision(v), 0.0, 1e-15);
}

TEST(Ocsvm, DeterministicAndSeparatesOutliers) {
  Rng rng(8);
  std::vector<Triple> x;
  for (int i = 0; i < 100; ++i) x.push_back({rng.uniform(0, 0.2), rng.uniform(0, 0.2), rng.uniform(0, 0.2)});
  OcsvmParams p;
  p.seed = 3;
  const Ocsvm a = train_ocsvm(x, p), b = train_ocsvm(x, p);
  EXPECT_EQ(a, b);
  for (double wk : a.w) EXPECT_GT(wk, 0.0);
  EXPECT_GT(a.decision({1.0, 1.0, 1.0}), a.decision({0.1, 0.1, 0.1}));
}

TEST(Ocsvm, StandardizedInputs) {
  Rng rng(9);
  std::vector<Triple> x;
  for (int i = 0; i < 50; ++i) x.push_back({rng.uniform(0, 10), rng.uniform(0, 0.01), 3.0});
  OcsvmParams p;
  p.standardize = true;
  const Ocsvm m = train_ocsvm(x, p);
  EXPECT_NEAR(m.mean[2], 3.0, 1e-12);
  EXPECT_EQ(m.scale[2], 1.0);
  EXPECT_GT(m.scale[0], 1.0);
  EXPECT_LT(m.scale[1], 0.01);
}

TEST(Ocsvm, Errors) {
  EXPECT_THROW(train_ocsvm({{1, 2, 3}}, OcsvmParams{}), DataError);
  EXPECT_THROW(train_ocsvm({{1, 2, 3}, {std::nan(""), 0, 0}}, OcsvmParams{}), NumericError);
  OcsvmParams p;
  p.nu = 0.0;
  EXPECT_THROW(train_ocsvm({{1, 2, 3}, {1, 2, 4}}, p), ConfigError);
}

TEST(Ocsvm, PackRoundTrip) {
  Ocsvm m;
  m.w = {0.25, -0.5, 2.0};
  m.rho = 0.125;
  m.nu = 0.5;
  m.mean = {1, 2, 3};
  m.scale = {0.5, 4, 1};
  m.fallback = true;
  EXPECT_EQ(ocsvm_from_pack(ocsvm_to_pack(m)), m);
}

TEST(Smooth3x3, ConstantPreservedAndCornerAverages) {
  const ScoreMap c(3, 4, Vec(12, 2.5));
  EXPECT_EQ(smooth3x3(c).scores(), c.scores());
  Vec v(9, 0.0);
  v[0] = 9.0;
  const ScoreMap s = smooth3x3(ScoreMap(3, 3, v));
  EXPECT_DOUBLE_EQ(s.at(0, 0), 9.0 / 4.0);
  EXPECT_DOUBLE_EQ(s.at(0, 1), 9.0 / 6.0);
  EXPECT_DOUBLE_EQ(s.at(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.at(2, 2), 0.0);
}

TEST(Decide, MemberSampleGivesConstantMinusRho) {
  Rng rng(10);
  const Scene s = scene(rng);
  const DecisionOutput out = decide(s.ps, s.model, 12, 16);
  EXPECT_EQ(out.s_pixel.height(), 12u);
  EXPECT_EQ(out.s_pixel.width(), 16u);
  for (double x : out.s_pixel.scores()) EXPECT_NEAR(x, -0.4, 1e-15);
  EXPECT_NEAR(out.s_image, -0.25, 1e-15);
}

TEST(Decide, PureFunction) {
  Rng rng(11);
  Scene s = scene(rng);
  for (auto& f : s.ps.fused) f[0] += 0.3;
  s.ps.rgb[2][1] -= 0.2;
  const DecisionOutput a = decide(s.ps, s.model, 7, 9), b = decide(s.ps, s.model, 7, 9);
  EXPECT_EQ(a.s_image, b.s_image);
  EXPECT_EQ(a.s_pixel.scores(), b.s_pixel.scores());
  EXPECT_EQ(a.patch_map.scores(), b.patch_map.scores());
}

TEST(Decide, PerturbedPatchRaisesItsCell) {
  Rng rng(12);
  Scene s = scene(rng);
  s.ps.pc[3][0] += 1.0;  // cell 6
  const DecisionOutput out = decide(s.ps, s.model, 3, 4, false);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out.patch_map.at(i) > -0.4, i == 6) << i;
  EXPECT_GT(out.s_image, -0.25);
}

TEST(Decide, ImageScoreMonotoneInPhi) {
  Rng rng(13);
  Ocsvm m;
  m.w = {0.3, 0.0, 1.2};
  m.rho = 0.7;
  for (int t = 0; t < 100; ++t) {
    Triple a{rng.uniform(), rng.uniform(), rng.uniform()};
    Triple b = a;
    b[rng.index(3)] += rng.uniform();
    EXPECT_GE(m.decision(b), m.decision(a));
  }
}

TEST(Decide, MissingBankIsError) {
  Rng rng(14);
  Scene s = scene(rng);
  s.model.banks.pc = MemoryBank();
  EXPECT_THROW(decide(s.ps, s.model, 3, 4), DataError);
  Scene t = scene(rng);
  t.ps.fused.pop_back();
  EXPECT_THROW(decide(t.ps, t.model, 3, 4), DataError);
}
