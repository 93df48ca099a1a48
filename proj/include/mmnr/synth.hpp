#pragma once
// Synthetic RGB + 3D inspection dataset. Each class is a smooth height-field
// object on a tilted background plane with a striped colour pattern.
// Anomalous samples carry a localized bump or dent and/or a colour blotch
// with a pixel-level ground-truth mask. Features come from the toy encoders
// after RANSAC background removal, exactly as for ingested data.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmnr/dataset.hpp"
#include "mmnr/encoders.hpp"
#include "mmnr/io.hpp"
#include "mmnr/preprocess.hpp"

namespace mmnr {

enum class DefectModality { Rgb, ThreeD, Both, Mixed };

inline std::string to_string(DefectModality m) {
  switch (m) {
    case DefectModality::Rgb: return "rgb";
    case DefectModality::ThreeD: return "3d";
    case DefectModality::Both: return "both";
    case DefectModality::Mixed: return "mixed";
  }
  return "both";
}

inline DefectModality parse_defect_modality(const std::string& s) {
  if (s == "rgb" || s == "rgb-only") return DefectModality::Rgb;
  if (s == "3d" || s == "3d-only") return DefectModality::ThreeD;
  if (s == "both") return DefectModality::Both;
  if (s == "mixed") return DefectModality::Mixed;
  throw ConfigError("unknown defect modality '" + s + "'");
}

struct SynthSpec {
  std::size_t classes = 5;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 40;
  /// Fraction of each test split that is anomalous.
  double defect_rate = 0.5;
  DefectModality modality = DefectModality::Both;
  std::size_t grid = 32;
  std::size_t raster_scale = 4;
  std::size_t rgb_dim = 16;
  std::size_t pc_dim = 16;
  std::size_t point_radius = 2;
  double surface_noise = 0.0005;
  double color_noise = 0.02;
  double length_scale = 0.05;

  void validate() const {
    if (classes == 0) throw ConfigError("synth: need at least one class");
    if (train_per_class == 0) throw ConfigError("synth: empty train split");
    if (!(defect_rate >= 0.0 && defect_rate <= 1.0)) throw ConfigError("synth: defect_rate must lie in [0, 1]");
    if (grid < 8) throw ConfigError("synth: grid must be >= 8");
    if (raster_scale < 2) throw ConfigError("synth: raster_scale must be >= 2");
    if (rgb_dim < 4 || pc_dim < 4) throw ConfigError("synth: feature dims must be >= 4");
    if (!(surface_noise >= 0.0) || !(color_noise >= 0.0)) throw ConfigError("synth: negative noise");
  }

  EncoderConfig rgb_encoder(std::uint64_t seed) const { return EncoderConfig{rgb_dim, seed, EncoderKind::Toy, length_scale}; }
  EncoderConfig pc_encoder(std::uint64_t seed) const { return EncoderConfig{pc_dim, seed, EncoderKind::Toy, length_scale}; }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"classes", s.classes},         {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class}, {"defect_rate", s.defect_rate},
          {"modality", to_string(s.modality)},  {"grid", s.grid},
          {"raster_scale", s.raster_scale},     {"rgb_dim", s.rgb_dim},
          {"pc_dim", s.pc_dim},                 {"point_radius", s.point_radius},
          {"surface_noise", s.surface_noise},   {"color_noise", s.color_noise},
          {"length_scale", s.length_scale}};
}

/// Per-class appearance drawn once from the class seed.
struct ClassStyle {
  std::string name;
  double base[3];
  double defect[3];
  double stripe_amp, stripe_freq, stripe_cos, stripe_sin;
  double radius_x, radius_y, height, wave_amp, wave_fx, wave_fy;
  double bump_amp;
  DefectModality modality;
};

inline ClassStyle make_class_style(std::size_t index, const SynthSpec& spec, std::uint64_t seed) {
  Rng rng(mix_seed(seed ^ (0xC1A55ull + index)));
  ClassStyle s;
  s.name = "class_" + std::to_string(index);
  for (double& c : s.base) c = rng.uniform(0.35, 0.75);
  // Defect colour: shifted well away from the base colour.
  for (int c = 0; c < 3; ++c) s.defect[c] = s.base[c] > 0.55 ? s.base[c] - rng.uniform(0.25, 0.35) : s.base[c] + rng.uniform(0.2, 0.3);
  s.stripe_amp = rng.uniform(0.04, 0.08);
  s.stripe_freq = rng.uniform(3.0, 6.0);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  s.stripe_cos = std::cos(angle);
  s.stripe_sin = std::sin(angle);
  s.radius_x = rng.uniform(0.34, 0.40);
  s.radius_y = rng.uniform(0.34, 0.40);
  s.height = rng.uniform(0.04, 0.06);
  s.wave_amp = rng.uniform(0.003, 0.006);
  s.wave_fx = rng.uniform(1.0, 2.0);
  s.wave_fy = rng.uniform(1.0, 2.0);
  s.bump_amp = rng.uniform(0.015, 0.02);
  static constexpr DefectModality kCycle[3] = {DefectModality::Both, DefectModality::Rgb, DefectModality::ThreeD};
  s.modality = spec.modality == DefectModality::Mixed ? kCycle[index % 3] : spec.modality;
  return s;
}

/// Everything rendered for one sample, before encoding. `height_clean` is the
/// noiseless, defect-free object height; used to verify defect strength.
struct SampleRender {
  Raster raster;
  OrganizedPointCloud cloud;
  std::vector<double> height_clean;
  std::vector<double> height;
  Mask object;
  std::optional<Mask> gt_mask;
};

inline SampleRender render_sample(const ClassStyle& style, const SynthSpec& spec, bool anomalous, std::uint64_t seed) {
  Rng rng(mix_seed(seed));
  const std::size_t n = spec.grid;
  const std::size_t rn = n * spec.raster_scale;
  const double cx = 0.5 + rng.uniform(-0.02, 0.02), cy = 0.5 + rng.uniform(-0.02, 0.02);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double wave_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double brightness = rng.uniform(-0.03, 0.03);
  const double tilt_x = rng.uniform(-0.02, 0.02), tilt_y = rng.uniform(-0.02, 0.02);

  bool rgb_defect = false, geo_defect = false;
  double dx = 0, dy = 0, dr = 0, dsign = 1;
  double dcol[3] = {0, 0, 0};
  if (anomalous) {
    rgb_defect = style.modality != DefectModality::ThreeD;
    geo_defect = style.modality != DefectModality::Rgb;
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double rad = std::sqrt(rng.uniform()) * 0.55;
    dx = cx + rad * style.radius_x * std::cos(ang);
    dy = cy + rad * style.radius_y * std::sin(ang);
    dr = rng.uniform(0.06, 0.09);
    dsign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (int c = 0; c < 3; ++c) dcol[c] = std::clamp(style.defect[c] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
  }

  auto inside = [&](double x, double y) {
    const double ex = (x - cx) / style.radius_x, ey = (y - cy) / style.radius_y;
    return ex * ex + ey * ey <= 1.0;
  };
  auto object_height = [&](double x, double y) {
    return style.height + style.wave_amp * std::sin(2 * std::numbers::pi * style.wave_fx * x + wave_phase) *
                              std::cos(2 * std::numbers::pi * style.wave_fy * y);
  };

  SampleRender out;
  out.raster.height = out.raster.width = rn;
  out.raster.rgb.resize(rn * rn * 3);
  for (std::size_t y = 0; y < rn; ++y)
    for (std::size_t x = 0; x < rn; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(rn);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(rn);
      double col[3];
      if (inside(px, py)) {
        const double t = style.stripe_cos * px + style.stripe_sin * py;
        const double stripe = style.stripe_amp * std::sin(2 * std::numbers::pi * style.stripe_freq * t + phase);
        for (int c = 0; c < 3; ++c) col[c] = style.base[c] + stripe + brightness;
        if (rgb_defect) {
          const double d = std::hypot(px - dx, py - dy);
          if (d <= dr)
            for (int c = 0; c < 3; ++c) col[c] = dcol[c];
        }
      } else {
        for (double& c : col) c = 0.25;
      }
      for (int c = 0; c < 3; ++c)
        out.raster.rgb[(y * rn + x) * 3 + c] = std::clamp(col[c] + spec.color_noise * rng.normal(), 0.0, 1.0);
    }

  std::vector<Point3> pts(n * n);
  out.height_clean.assign(n * n, 0.0);
  out.height.assign(n * n, 0.0);
  out.object.assign(n * n, 0);
  Mask gt(n * n, 0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      const double x = (static_cast<double>(v) + 0.5) / static_cast<double>(n);
      const double y = (static_cast<double>(u) + 0.5) / static_cast<double>(n);
      const std::size_t i = u * n + v;
      const double base = tilt_x * (x - 0.5) + tilt_y * (y - 0.5);
      double h = 0.0;
      if (inside(x, y)) {
        out.object[i] = 1;
        h = object_height(x, y);
      }
      out.height_clean[i] = h;
      if (anomalous) {
        const double d = std::hypot(x - dx, y - dy);
        if (geo_defect && out.object[i]) {
          const double s = dr / 2.0;
          h += dsign * style.bump_amp * std::exp(-d * d / (2 * s * s));
        }
        if (d <= dr && out.object[i]) gt[i] = 1;
      }
      h += spec.surface_noise * rng.normal();
      out.height[i] = h;
      pts[i] = Point3{x, y, base + h};
    }
  out.cloud = OrganizedPointCloud(n, n, std::move(pts), Mask(n * n, 1));
  if (anomalous) out.gt_mask = std::move(gt);
  return out;
}

struct ClassData {
  std::string name;
  std::vector<FeatureBundle> train;
  std::vector<FeatureBundle> test;
};

struct SyntheticDataset {
  SynthSpec spec;
  std::uint64_t seed = 0;
  std::vector<ClassData> classes;
};

/// Encodes a rendered sample into a bundle: background removal, toy
/// encoders, then a float32 round trip so in-memory bundles equal what a
/// reader would load from disk.
inline FeatureBundle encode_sample(const SampleRender& r, const SynthSpec& spec, std::uint64_t encoder_seed,
                                   std::string id, std::uint64_t sample_seed) {
  RansacParams rp;
  rp.seed = sample_seed;
  const Mask keep = background_keep_mask(r.cloud, rp);
  const OrganizedPointCloud cloud = r.cloud.masked(keep);
  const FeatureGrid rgb_full = encode_image(r.raster, spec.grid, spec.grid, spec.rgb_encoder(encoder_seed));
  const FeatureGrid rgb = rgb_full.masked(keep);
  const FeatureGrid pc = encode_point_grid(cloud, spec.point_radius, spec.pc_encoder(encoder_seed));
  FeatureBundle b{rgb.with_class_token(class_token_of(rgb)),
                  pc,
                  cloud,
                  std::move(id),
                  r.gt_mask ? Label::Anomalous : Label::Normal,
                  r.gt_mask};
  return decode_bundle(encode_bundle(b));
}

inline SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticDataset ds{spec, seed, {}};
  ds.classes.resize(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const ClassStyle style = make_class_style(c, spec, seed);
    ClassData& cd = ds.classes[c];
    cd.name = style.name;
    const std::uint64_t class_seed = mix_seed(seed ^ (c * 0x100000001ull));

    const std::size_t n_anom = static_cast<std::size_t>(std::llround(spec.defect_rate * static_cast<double>(spec.test_per_class)));
    std::vector<std::uint8_t> test_anom(spec.test_per_class, 0);
    std::fill_n(test_anom.begin(), std::min(n_anom, test_anom.size()), 1);
    Rng label_rng(class_seed ^ 0x1abe1ull);
    label_rng.shuffle(std::span<std::uint8_t>(test_anom));

    cd.train.resize(spec.train_per_class);
    cd.test.resize(spec.test_per_class);
    auto make = [&](bool is_test, std::size_t i) {
      const std::uint64_t s = class_seed ^ (is_test ? 0x7E57000000ull : 0x7A14000000ull) ^ i;
      const bool anomalous = is_test && test_anom[i];
      const SampleRender r = render_sample(style, spec, anomalous, s);
      char id[64];
      std::snprintf(id, sizeof id, "%s_%s_%03zu", style.name.c_str(), is_test ? "test" : "train", i);
      return encode_sample(r, spec, seed, id, s);
    };
    parallel_for(spec.train_per_class, [&](std::size_t i) { cd.train[i] = make(false, i); });
    parallel_for(spec.test_per_class, [&](std::size_t i) { cd.test[i] = make(true, i); });
  }
  return ds;
}

/// Writes <root>/<class>/{train,test}/<id>.mmnr, per-split manifests and
/// <root>/dataset.json.
inline void write_dataset(const SyntheticDataset& ds, const std::filesystem::path& root) {
  nlohmann::json index;
  index["seed"] = ds.seed;
  index["spec"] = to_json(ds.spec);
  index["classes"] = nlohmann::json::array();
  for (const auto& cd : ds.classes) {
    const auto dir = root / cd.name;
    for (bool is_test : {false, true}) {
      const auto& bundles = is_test ? cd.test : cd.train;
      DatasetManifest m;
      m.class_name = cd.name;
      m.split = is_test ? Split::Test : Split::Train;
      m.seed = ds.seed;
      m.base_dir = dir;
      for (const auto& b : bundles) {
        const std::string rel = std::string(is_test ? "test/" : "train/") + b.sample_id + ".mmnr";
        write_bundle(b, dir / rel);
        m.samples.push_back(rel);
      }
      write_manifest(m, dir / (is_test ? "test.json" : "train.json"));
    }
    index["classes"].push_back(cd.name);
  }
  std::ofstream out(root / "dataset.json", std::ios::trunc);
  out << index.dump(2) << '\n';
}

}  // namespace mmnr
