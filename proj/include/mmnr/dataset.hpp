#pragma once
// Dataset manifests (JSON) and the Overlap / Non-Overlap noise-injection
// protocols.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmnr/core.hpp"
#include "mmnr/hash.hpp"
#include "mmnr/io.hpp"

namespace mmnr {

/// ceil(fraction * n) that ignores floating-point dust (0.07 * 100 -> 7).
inline std::size_t ceil_count(double fraction, std::size_t n) {
  const double x = fraction * static_cast<double>(n);
  return static_cast<std::size_t>(std::max(0.0, std::ceil(x - 1e-9)));
}

enum class Split { Train, Test };

struct NoiseProtocol {
  enum class Kind { Clean, Overlap, NonOverlap };
  Kind kind = Kind::Clean;
  double fraction = 0.0;

  void validate() const {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("noise fraction must lie in [0, 1)");
    if (kind == Kind::Clean && fraction != 0.0) throw ConfigError("clean protocol with nonzero fraction");
  }
  bool operator==(const NoiseProtocol&) const = default;
};

inline std::string to_string(NoiseProtocol::Kind k) {
  switch (k) {
    case NoiseProtocol::Kind::Clean: return "clean";
    case NoiseProtocol::Kind::Overlap: return "overlap";
    case NoiseProtocol::Kind::NonOverlap: return "non_overlap";
  }
  return "clean";
}

inline NoiseProtocol::Kind parse_noise_kind(const std::string& s) {
  if (s == "clean") return NoiseProtocol::Kind::Clean;
  if (s == "overlap") return NoiseProtocol::Kind::Overlap;
  if (s == "non_overlap" || s == "non-overlap") return NoiseProtocol::Kind::NonOverlap;
  throw ConfigError("unknown noise protocol '" + s + "'");
}

struct DatasetManifest {
  std::string class_name;
  Split split = Split::Train;
  std::vector<std::string> samples;  // relative to base_dir unless absolute
  NoiseProtocol noise;
  std::uint64_t seed = 0;
  /// Provenance of injected anomalous samples. Evaluation-only; the pipeline
  /// never consults it when scoring.
  std::vector<std::string> injected;
  std::filesystem::path base_dir;  // not serialized

  std::filesystem::path resolve(const std::string& sample) const {
    std::filesystem::path p(sample);
    return p.is_absolute() ? p : base_dir / p;
  }

  bool operator==(const DatasetManifest&) const = default;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["class_name"] = m.class_name;
  j["split"] = m.split == Split::Train ? "train" : "test";
  j["samples"] = m.samples;
  j["noise_protocol"] = {{"kind", to_string(m.noise.kind)}, {"fraction", m.noise.fraction}};
  j["seed"] = m.seed;
  j["injected"] = m.injected;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  try {
    m.class_name = j.at("class_name").get<std::string>();
    const auto split = j.at("split").get<std::string>();
    if (split == "train")
      m.split = Split::Train;
    else if (split == "test")
      m.split = Split::Test;
    else
      throw DataError("manifest: unknown split '" + split + "'");
    m.samples = j.at("samples").get<std::vector<std::string>>();
    const auto& np = j.at("noise_protocol");
    m.noise.kind = parse_noise_kind(np.at("kind").get<std::string>());
    m.noise.fraction = np.at("fraction").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("injected")) m.injected = j.at("injected").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  try {
    m.noise.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  m.base_dir = base_dir;
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

/// Loads a manifest and checks that every referenced bundle exists.
inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  for (const auto& s : m.samples)
    if (!std::filesystem::exists(m.resolve(s))) throw DataError("manifest references missing bundle " + s);
  return m;
}

inline std::string manifest_hash(const DatasetManifest& m) { return sha256_hex(to_json(m).dump()); }

inline std::vector<FeatureBundle> load_bundles(const DatasetManifest& m) {
  std::vector<FeatureBundle> out(m.samples.size());
  parallel_for(out.size(), [&](std::size_t i) { out[i] = read_bundle(m.resolve(m.samples[i])); });
  return out;
}

// ---------------------------------------------------------------------------
// Noise injection
// ---------------------------------------------------------------------------

/// Picks ceil(fraction * train_size) of the anomalous test indices. The pick
/// depends only on (train_size, anomalous set, fraction, seed), so Overlap and
/// Non-Overlap runs with one seed inject the same samples. Result is sorted.
inline std::vector<std::size_t> select_injection(std::size_t train_size, std::vector<std::size_t> anomalous_test,
                                                 double fraction, std::uint64_t seed) {
  const std::size_t count = ceil_count(fraction, train_size);
  if (count > anomalous_test.size())
    throw DataError("noise injection needs " + std::to_string(count) + " anomalous test samples, have " +
                    std::to_string(anomalous_test.size()));
  std::sort(anomalous_test.begin(), anomalous_test.end());
  Rng rng(mix_seed(seed ^ 0x6e6f697365ull));
  rng.shuffle(std::span<std::size_t>(anomalous_test));
  anomalous_test.resize(count);
  std::sort(anomalous_test.begin(), anomalous_test.end());
  return anomalous_test;
}

struct NoisySplit {
  DatasetManifest train;
  DatasetManifest test;
};

/// Moves anomalous test samples into the training manifest. `test_labels`
/// gives the label of each test sample in manifest order.
inline NoisySplit inject_noise(const DatasetManifest& train, const DatasetManifest& test,
                               const std::vector<Label>& test_labels, const NoiseProtocol& protocol,
                               std::uint64_t seed) {
  protocol.validate();
  if (test_labels.size() != test.samples.size()) throw DataError("inject_noise: label count mismatch");
  std::vector<std::size_t> anomalous;
  for (std::size_t i = 0; i < test_labels.size(); ++i)
    if (test_labels[i] == Label::Anomalous) anomalous.push_back(i);
  const auto picked = select_injection(train.samples.size(), anomalous, protocol.fraction, seed);

  NoisySplit out{train, test};
  out.train.noise = protocol;
  out.test.noise = protocol;
  out.train.seed = seed;
  out.test.seed = seed;
  auto rebase = [&](const std::string& s) {
    const auto abs = test.resolve(s);
    return std::filesystem::relative(abs, train.base_dir).generic_string();
  };
  for (auto i : picked) {
    out.train.samples.push_back(rebase(test.samples[i]));
    out.train.injected.push_back(rebase(test.samples[i]));
  }
  if (protocol.kind == NoiseProtocol::Kind::NonOverlap) {
    out.test.samples.clear();
    std::size_t next = 0;
    for (std::size_t i = 0; i < test.samples.size(); ++i) {
      if (next < picked.size() && picked[next] == i) {
        ++next;
        continue;
      }
      out.test.samples.push_back(test.samples[i]);
    }
  }
  return out;
}

}  // namespace mmnr
