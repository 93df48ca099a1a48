#include <gtest/gtest.h>

#include <cmath>

#include "mmnr/tensor.hpp"
#include "support/fixtures.hpp"

using namespace mmnr;

TEST(CosineSim, Examples) {
  EXPECT_DOUBLE_EQ(cosine_sim(Vec{1, 0}, Vec{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Vec{1, 0}, Vec{0, 1}), 0.0);
  EXPECT_NEAR(cosine_sim(Vec{3, 4}, Vec{4, 3}), 0.96, 1e-15);
}

TEST(CosineSim, RejectsZeroNormAndDimMismatch) {
  EXPECT_THROW(cosine_sim(Vec{0, 0}, Vec{1, 0}), DataError);
  EXPECT_THROW(cosine_sim(Vec{1, 0}, Vec{1, 0, 0}), DataError);
}

TEST(CosineSim, SymmetricAndScaleInvariant) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Vec a = fixture::random_vec(rng, 7), b = fixture::random_vec(rng, 7);
    const double c = rng.uniform(0.01, 100.0);
    Vec ca = a;
    for (double& x : ca) x *= c;
    EXPECT_NEAR(cosine_sim(a, b), cosine_sim(b, a), 1e-12);
    EXPECT_NEAR(cosine_sim(ca, b), cosine_sim(a, b), 1e-12);
  }
}

TEST(L2Dist, Examples) {
  EXPECT_DOUBLE_EQ(l2_dist(Vec{0, 0}, Vec{3, 4}), 5.0);
  const Vec a{0.3, -2.0, 7.5};
  EXPECT_DOUBLE_EQ(l2_dist(a, a), 0.0);
  EXPECT_NEAR(l2_dist(Vec{1, 1, 1}, Vec{2, 3, 4}), std::sqrt(14.0), 1e-15);
  EXPECT_NEAR(l2_dist(Vec{1, 1, 1}, Vec{2, 3, 4}), 3.7417, 1e-4);
  EXPECT_THROW(l2_dist(Vec{1}, Vec{1, 2}), DataError);
}

TEST(L2Dist, SymmetricAndTriangle) {
  Rng rng(12);
  for (int t = 0; t < 500; ++t) {
    const Vec a = fixture::random_vec(rng, 5), b = fixture::random_vec(rng, 5), c = fixture::random_vec(rng, 5);
    EXPECT_EQ(l2_dist(a, b), l2_dist(b, a));
    EXPECT_LE(l2_dist(a, c), l2_dist(a, b) + l2_dist(b, c) + 1e-9);
  }
}

TEST(FeatureGrid, InvalidCellsAreZeroed) {
  FeatureGrid g(1, 2, 2, Vec{1, 2, 3, 4}, Mask{1, 0});
  EXPECT_EQ(g.cell(0, 1)[0], 0.0);
  EXPECT_EQ(g.cell(0, 1)[1], 0.0);
  EXPECT_EQ(g.cell(0, 0)[1], 2.0);
  const FeatureGrid m = g.masked(Mask{0, 1});
  EXPECT_FALSE(m.valid(0));
  EXPECT_EQ(m.cell(0)[0], 0.0);
}

TEST(FeatureGrid, RejectsBadShapesAndNonFinite) {
  EXPECT_THROW(FeatureGrid(2, 2, 1, Vec(3), Mask(4, 1)), DataError);
  EXPECT_THROW(FeatureGrid(2, 2, 1, Vec(4), Mask(3, 1)), DataError);
  EXPECT_THROW(FeatureGrid(1, 1, 1, Vec{NAN}, Mask{1}), NumericError);
  EXPECT_THROW(FeatureGrid(1, 1, 2, Vec{1, 2}, Mask{1}, Vec{1}), DataError);
}

TEST(OrganizedPointCloud, InvalidNonFiniteIsClearedValidIsRejected) {
  const double inf = std::numeric_limits<double>::infinity();
  OrganizedPointCloud c(1, 2, {Point3{1, 2, 3}, Point3{inf, 0, 0}}, Mask{1, 0});
  EXPECT_EQ(c.at(1), Point3{});
  EXPECT_EQ(c.valid_count(), 1u);
  EXPECT_THROW(OrganizedPointCloud(1, 1, {Point3{inf, 0, 0}}, Mask{1}), NumericError);
}

TEST(AnomalyMap, NonNegativeAndFinite) {
  EXPECT_THROW(AnomalyMap(1, 2, Vec{0.1, -0.1}), NumericError);
  EXPECT_THROW(ScoreMap(1, 1, Vec{NAN}), NumericError);
  const AnomalyMap m(2, 2, 0.5);
  EXPECT_EQ(m.max(), 0.5);
  EXPECT_EQ(m.min(), 0.5);
}
