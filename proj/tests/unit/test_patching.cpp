#include <gtest/gtest.h>

#include <algorithm>

#include "mmnr/patching.hpp"
#include "support/fixtures.hpp"

using namespace mmnr;

TEST(BuildMasks, FourByFourTilesExactly) {
  const ScaleMaskSet s = build_scale_masks(4, 4, 2, 2);
  ASSERT_EQ(s.windows.size(), 4u);
  for (auto c : s.coverage()) EXPECT_EQ(c, 1u);
  for (const auto& w : s.windows) EXPECT_EQ(w.area(), 4u);
}

TEST(BuildMasks, FiveByFiveOverlap) {
  const ScaleMaskSet s = build_scale_masks(5, 5, 3, 2);
  ASSERT_EQ(s.windows.size(), 9u);
  const auto cov = s.coverage();
  EXPECT_EQ(*std::min_element(cov.begin(), cov.end()), 1u);
  EXPECT_EQ(*std::max_element(cov.begin(), cov.end()), 4u);
}

TEST(BuildMasks, WindowsAreCenteredAndClipped) {
  for (std::size_t h : {5u, 8u, 13u})
    for (std::size_t k : {1u, 2u, 3u, 4u})
      for (std::size_t stride = 1; stride <= k; ++stride) {
        const ScaleMaskSet s = build_scale_masks(h, h + 1, k, stride);
        for (const auto& w : s.windows) {
          const std::ptrdiff_t lo_u = w.anchor_u - static_cast<std::ptrdiff_t>((k - 1) / 2);
          const std::ptrdiff_t lo_v = w.anchor_v - static_cast<std::ptrdiff_t>((k - 1) / 2);
          EXPECT_EQ(w.r0, static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, lo_u)));
          EXPECT_EQ(w.c0, static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, lo_v)));
          EXPECT_EQ(w.r1, std::min<std::size_t>(h, static_cast<std::size_t>(lo_u + static_cast<std::ptrdiff_t>(k))));
          EXPECT_EQ(w.c1, std::min<std::size_t>(h + 1, static_cast<std::size_t>(lo_v + static_cast<std::ptrdiff_t>(k))));
        }
        for (auto c : s.coverage()) EXPECT_GE(c, 1u);
      }
}

TEST(BuildMasks, ThreeScalesAndLargeIsEverything) {
  const MaskSet m = build_masks(8, 8, 4, 2, 2);
  ASSERT_EQ(m.l.windows.size(), 1u);
  EXPECT_EQ(m.l.windows[0].area(), 64u);
  EXPECT_EQ(m.m.kernel, 4u);
  EXPECT_EQ(m.s.kernel, 2u);
  EXPECT_EQ(m.s.windows.size(), 16u);
}

TEST(BuildMasks, PureFunctionOfArguments) {
  EXPECT_EQ(build_scale_masks(9, 7, 3, 2), build_scale_masks(9, 7, 3, 2));
  const auto a = MaskConfig::defaults_for(32, 32);
  EXPECT_EQ(a.k_m, 8u);
  EXPECT_EQ(a.k_s, 4u);
  EXPECT_EQ(a.stride_m, 4u);
  EXPECT_EQ(a.stride_s, 2u);
}

TEST(BuildMasks, Errors) {
  EXPECT_THROW(build_scale_masks(4, 4, 5, 1), ConfigError);
  EXPECT_THROW(build_scale_masks(4, 4, 2, 0), ConfigError);
  EXPECT_THROW(build_scale_masks(4, 4, 2, 3), ConfigError);
  EXPECT_THROW(build_masks(4, 4, 2, 2, 1), ConfigError);
  EXPECT_THROW(build_masks(4, 4, 5, 2, 1), ConfigError);
}

TEST(SegmentImage, FullMaskReturnsEveryCell) {
  Rng rng(1);
  const FeatureGrid g(3, 4, 2, fixture::random_vec(rng, 24), Mask(12, 1));
  const auto segs = segment_image(g, full_mask(3, 4));
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].features.size(), 12u);
}

TEST(SegmentImage, UnitWindowSelectsOneCell) {
  Rng rng(2);
  const FeatureGrid g(4, 5, 3, fixture::random_vec(rng, 60), Mask(20, 1));
  const auto segs = segment_image(g, build_scale_masks(4, 5, 1, 1));
  ASSERT_EQ(segs.size(), 20u);
  const auto& w = segs[2 * 5 + 3];
  EXPECT_EQ(w.window.r0, 2u);
  EXPECT_EQ(w.window.c0, 3u);
  ASSERT_EQ(w.features.size(), 1u);
  const auto c = g.cell(2, 3);
  EXPECT_EQ(w.features[0], Vec(c.begin(), c.end()));
}

TEST(SegmentImage, InvalidCellsExcluded) {
  Mask valid(16, 1);
  valid[0] = valid[5] = 0;
  const FeatureGrid g(4, 4, 1, Vec(16, 1.0), valid);
  const auto segs = segment_image(g, build_scale_masks(4, 4, 2, 2));
  EXPECT_EQ(segs[0].features.size(), 2u);
  EXPECT_EQ(segs[1].features.size(), 4u);
}

TEST(SegmentImage, MissingClassTokenIsError) {
  const FeatureGrid g(4, 4, 1, Vec(16, 1.0), Mask(16, 1));
  EXPECT_THROW(segment_image(g, build_masks(4, 4, 2, 1, 1), true), DataError);
  EXPECT_NO_THROW(segment_image(g, build_masks(4, 4, 2, 1, 1), false));
}

TEST(MeanFeature, NormalizedMeanOrNothing) {
  WindowFeatures wf{Window{}, {{3, 0}, {1, 0}}};
  EXPECT_EQ(*mean_feature(wf), (Vec{1, 0}));
  wf.features = {{1, 0}, {-1, 0}};
  EXPECT_FALSE(mean_feature(wf));
  wf.features.clear();
  EXPECT_FALSE(mean_feature(wf));
}

namespace {

OrganizedPointCloud cloud_with(std::size_t h, std::size_t w, const Mask& valid) {
  std::vector<Point3> pts(h * w);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = Point3{double(i % w), double(i / w), 0.0};
  return OrganizedPointCloud(h, w, pts, valid);
}

}  // namespace

TEST(Ampcfe, AllInvalidWindowDropped) {
  Mask valid(16, 1);
  for (std::size_t i : {0u, 1u, 4u, 5u}) valid[i] = 0;
  const auto patches = segment_cloud_ampcfe(cloud_with(4, 4, valid), build_scale_masks(4, 4, 2, 2), 1);
  ASSERT_EQ(patches.size(), 3u);
  for (const auto& p : patches) EXPECT_NE(p.window.r0 + p.window.c0, 0u);
}

TEST(Ampcfe, ExactlyThetaIsDropped) {
  Mask valid(16, 1);
  valid[0] = 0;
  const auto patches = segment_cloud_ampcfe(cloud_with(4, 4, valid), build_scale_masks(4, 4, 2, 2), 3);
  EXPECT_EQ(patches.size(), 3u);
  EXPECT_EQ(segment_cloud_ampcfe(cloud_with(4, 4, valid), build_scale_masks(4, 4, 2, 2), 2).size(), 4u);
}

TEST(Ampcfe, TwoHundredPointsOneWindow) {
  Mask valid(20 * 20, 0);
  for (std::size_t i = 0; i < 200; ++i) valid[i] = 1;
  const auto patches = segment_cloud_ampcfe(cloud_with(20, 20, valid), full_mask(20, 20), 128);
  ASSERT_EQ(patches.size(), 1u);
  EXPECT_EQ(patches[0].count(), 200u);
}

TEST(Ampcfe, PointsLieInsideTheirWindow) {
  Rng rng(3);
  const auto cloud = cloud_with(12, 12, fixture::random_mask(rng, 144, 0.6));
  const auto set = build_scale_masks(12, 12, 4, 2);
  for (std::size_t theta : {1u, 3u, 6u, 9u}) {
    for (const auto& p : segment_cloud_ampcfe(cloud, set, theta)) {
      EXPECT_GT(p.count(), theta);
      for (const auto& q : p.points) {
        const auto u = static_cast<std::size_t>(q.y), v = static_cast<std::size_t>(q.x);
        EXPECT_TRUE(p.window.contains(u, v));
        EXPECT_TRUE(cloud.valid(u, v));
      }
    }
  }
  EXPECT_THROW(segment_cloud_ampcfe(cloud, set, 0), ConfigError);
}
