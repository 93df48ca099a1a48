#pragma once
// Dense feature containers and the elementary vector operations shared by all
// stages. Grids are row-major: cell (u, v) is row u, column v, origin at the
// top-left.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmnr/core.hpp"

namespace mmnr {

using Vec = std::vector<double>;
using VecView = std::span<const double>;
using Mask = std::vector<std::uint8_t>;

inline double dot(VecView a, VecView b) {
  if (a.size() != b.size()) throw DataError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(VecView a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

/// a.b / (|a||b|). Zero-norm inputs are degenerate features and rejected.
inline double cosine_sim(VecView a, VecView b) {
  if (a.size() != b.size()) throw DataError("cosine_sim: dimension mismatch");
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DataError("cosine_sim: zero-norm feature");
  const double c = dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

inline double squared_l2(VecView a, VecView b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double l2_dist(VecView a, VecView b) {
  if (a.size() != b.size()) throw DataError("l2_dist: dimension mismatch");
  return std::sqrt(squared_l2(a, b));
}

inline Vec normalized(VecView a) {
  const double n = norm(a);
  if (!(n > 0.0)) throw DataError("normalized: zero-norm vector");
  Vec out(a.begin(), a.end());
  for (double& x : out) x /= n;
  return out;
}

inline bool all_finite(VecView a) {
  for (double x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// FeatureGrid
// ---------------------------------------------------------------------------

/// H x W grid of D-dimensional patch features with per-cell validity and an
/// optional class token. Invalid cells always hold the zero vector.
class FeatureGrid {
 public:
  FeatureGrid() = default;

  FeatureGrid(std::size_t height, std::size_t width, std::size_t dim, Vec data, Mask valid,
              std::optional<Vec> class_token = std::nullopt)
      : height_(height), width_(width), dim_(dim), data_(std::move(data)), valid_(std::move(valid)),
        class_token_(std::move(class_token)) {
    if (data_.size() != height_ * width_ * dim_) throw DataError("FeatureGrid: data size mismatch");
    if (valid_.size() != height_ * width_) throw DataError("FeatureGrid: validity size mismatch");
    if (class_token_ && class_token_->size() != dim_) throw DataError("FeatureGrid: class token dim mismatch");
    if (!all_finite(data_) || (class_token_ && !all_finite(*class_token_)))
      throw NumericError("FeatureGrid: non-finite feature");
    for (std::size_t i = 0; i < valid_.size(); ++i) {
      valid_[i] = valid_[i] ? 1 : 0;
      if (!valid_[i]) std::fill_n(data_.begin() + static_cast<std::ptrdiff_t>(i * dim_), dim_, 0.0);
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t cells() const noexcept { return height_ * width_; }

  VecView cell(std::size_t u, std::size_t v) const { return cell(u * width_ + v); }
  VecView cell(std::size_t index) const { return VecView(data_).subspan(index * dim_, dim_); }
  bool valid(std::size_t u, std::size_t v) const { return valid_[u * width_ + v] != 0; }
  bool valid(std::size_t index) const { return valid_[index] != 0; }

  const Vec& data() const noexcept { return data_; }
  const Mask& valid_mask() const noexcept { return valid_; }
  const std::optional<Vec>& class_token() const noexcept { return class_token_; }

  /// Copy with validity ANDed against `keep` (cells dropped become zero).
  FeatureGrid masked(const Mask& keep) const {
    if (keep.size() != valid_.size()) throw DataError("FeatureGrid::masked: shape mismatch");
    Mask v = valid_;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] && keep[i];
    return FeatureGrid(height_, width_, dim_, data_, std::move(v), class_token_);
  }

  FeatureGrid with_class_token(std::optional<Vec> token) const {
    return FeatureGrid(height_, width_, dim_, data_, valid_, std::move(token));
  }

  bool operator==(const FeatureGrid&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t dim_ = 0;
  Vec data_;
  Mask valid_;
  std::optional<Vec> class_token_;
};

// ---------------------------------------------------------------------------
// OrganizedPointCloud
// ---------------------------------------------------------------------------

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;
  bool operator==(const Point3&) const = default;
};

/// H x W position tensor with a validity mask. Invalid pixels keep their
/// stored coordinates but take part in no geometric computation.
class OrganizedPointCloud {
 public:
  OrganizedPointCloud() = default;

  OrganizedPointCloud(std::size_t height, std::size_t width, std::vector<Point3> positions, Mask valid)
      : height_(height), width_(width), positions_(std::move(positions)), valid_(std::move(valid)) {
    if (positions_.size() != height_ * width_) throw DataError("OrganizedPointCloud: position size mismatch");
    if (valid_.size() != height_ * width_) throw DataError("OrganizedPointCloud: validity size mismatch");
    for (std::size_t i = 0; i < valid_.size(); ++i) {
      valid_[i] = valid_[i] ? 1 : 0;
      const Point3& p = positions_[i];
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
        if (valid_[i]) throw NumericError("OrganizedPointCloud: non-finite valid point");
        positions_[i] = Point3{};
      }
    }
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixels() const noexcept { return height_ * width_; }
  const Point3& at(std::size_t u, std::size_t v) const { return positions_[u * width_ + v]; }
  const Point3& at(std::size_t index) const { return positions_[index]; }
  bool valid(std::size_t u, std::size_t v) const { return valid_[u * width_ + v] != 0; }
  bool valid(std::size_t index) const { return valid_[index] != 0; }
  const std::vector<Point3>& positions() const noexcept { return positions_; }
  const Mask& valid_mask() const noexcept { return valid_; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto b : valid_) n += b;
    return n;
  }

  OrganizedPointCloud masked(const Mask& keep) const {
    if (keep.size() != valid_.size()) throw DataError("OrganizedPointCloud::masked: shape mismatch");
    Mask v = valid_;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] && keep[i];
    return OrganizedPointCloud(height_, width_, positions_, std::move(v));
  }

  bool operator==(const OrganizedPointCloud&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Point3> positions_;
  Mask valid_;
};

// ---------------------------------------------------------------------------
// Score maps
// ---------------------------------------------------------------------------

/// H x W grid of finite real scores, any sign.
class ScoreMap {
 public:
  ScoreMap() = default;
  ScoreMap(std::size_t height, std::size_t width, Vec scores)
      : height_(height), width_(width), scores_(std::move(scores)) {
    if (scores_.size() != height_ * width_) throw DataError("ScoreMap: size mismatch");
    if (!all_finite(scores_)) throw NumericError("ScoreMap: non-finite score");
  }
  ScoreMap(std::size_t height, std::size_t width, double fill)
      : ScoreMap(height, width, Vec(height * width, fill)) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return scores_.size(); }
  double at(std::size_t u, std::size_t v) const { return scores_[u * width_ + v]; }
  double at(std::size_t index) const { return scores_[index]; }
  const Vec& scores() const noexcept { return scores_; }

  double max() const { return scores_.empty() ? 0.0 : *std::max_element(scores_.begin(), scores_.end()); }
  double min() const { return scores_.empty() ? 0.0 : *std::min_element(scores_.begin(), scores_.end()); }

  bool operator==(const ScoreMap&) const = default;

 protected:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  Vec scores_;
};

/// Score map restricted to non-negative values (suspect maps, aggregated
/// intra-modal scores, nearest-neighbour distance maps).
class AnomalyMap : public ScoreMap {
 public:
  AnomalyMap() = default;
  AnomalyMap(std::size_t height, std::size_t width, Vec scores) : ScoreMap(height, width, std::move(scores)) {
    for (double s : scores_)
      if (s < 0.0) throw NumericError("AnomalyMap: negative score");
  }
  AnomalyMap(std::size_t height, std::size_t width, double fill)
      : AnomalyMap(height, width, Vec(height * width, fill)) {}
};

}  // namespace mmnr
