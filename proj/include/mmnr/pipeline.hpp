#pragma once
// End-to-end orchestration: per-class reference selection and denoising, one
// fusion head for the whole run, per-class banks and decision layers, test
// inference and metrics. Artifacts go to runs/<hash>/ when a run directory is
// requested.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmnr/config.hpp"
#include "mmnr/decision.hpp"
#include "mmnr/hash.hpp"
#include "mmnr/heatmap.hpp"
#include "mmnr/metrics.hpp"
#include "mmnr/stage2.hpp"
#include "mmnr/synth.hpp"

namespace mmnr {

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

struct ClassInput {
  std::string name;
  std::vector<FeatureBundle> train;  // clean train followed by injected samples
  std::vector<std::uint8_t> injected;  // provenance, evaluation only
  std::vector<FeatureBundle> test;
  std::optional<DatasetManifest> train_manifest;  // set when read from disk
};

inline std::uint64_t class_noise_seed(std::uint64_t seed, const std::string& cls) { return mix_seed(seed ^ fnv1a(cls)); }

inline bool wanted(const std::vector<std::string>& classes, const std::string& name) {
  return classes.empty() || std::find(classes.begin(), classes.end(), name) != classes.end();
}

/// Noise injection on an in-memory dataset; picks the same samples as the
/// manifest-based path for equal seeds.
inline std::vector<ClassInput> inject_in_memory(const SyntheticDataset& ds, const NoiseProtocol& protocol,
                                                std::uint64_t seed, const std::vector<std::string>& classes = {}) {
  protocol.validate();
  std::vector<ClassInput> out;
  for (const auto& cd : ds.classes) {
    if (!wanted(classes, cd.name)) continue;
    ClassInput ci{cd.name, cd.train, std::vector<std::uint8_t>(cd.train.size(), 0), {}, std::nullopt};
    std::vector<std::size_t> anomalous;
    for (std::size_t i = 0; i < cd.test.size(); ++i)
      if (cd.test[i].label == Label::Anomalous) anomalous.push_back(i);
    const auto picked = select_injection(cd.train.size(), anomalous, protocol.fraction, class_noise_seed(seed, cd.name));
    std::vector<std::uint8_t> moved(cd.test.size(), 0);
    for (auto i : picked) {
      ci.train.push_back(cd.test[i]);
      ci.injected.push_back(1);
      moved[i] = 1;
    }
    for (std::size_t i = 0; i < cd.test.size(); ++i)
      if (!(protocol.kind == NoiseProtocol::Kind::NonOverlap && moved[i])) ci.test.push_back(cd.test[i]);
    out.push_back(std::move(ci));
  }
  return out;
}

/// Reads a dataset written by write_dataset and applies noise injection
/// through the manifests.
inline std::vector<ClassInput> load_dataset(const std::filesystem::path& root, const NoiseProtocol& protocol,
                                            std::uint64_t seed, const std::vector<std::string>& classes = {}) {
  std::ifstream in(root / "dataset.json");
  if (!in) throw DataError("cannot open " + (root / "dataset.json").string());
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset.json: ") + e.what());
  }
  std::vector<ClassInput> out;
  for (const auto& name_j : index.at("classes")) {
    const auto name = name_j.get<std::string>();
    if (!wanted(classes, name)) continue;
    const auto train_m = read_manifest(root / name / "train.json");
    const auto test_m = read_manifest(root / name / "test.json");
    const auto test_b = load_bundles(test_m);
    std::vector<Label> labels;
    for (const auto& b : test_b) labels.push_back(b.label);
    const auto noisy = inject_noise(train_m, test_m, labels, protocol, class_noise_seed(seed, name));
    ClassInput ci{name, load_bundles(noisy.train), {}, load_bundles(noisy.test), noisy.train};
    for (const auto& s : noisy.train.samples)
      ci.injected.push_back(std::find(noisy.train.injected.begin(), noisy.train.injected.end(), s) !=
                            noisy.train.injected.end());
    out.push_back(std::move(ci));
  }
  if (out.empty()) throw DataError("dataset has none of the requested classes");
  return out;
}

inline std::vector<ClassInput> load_inputs(const PipelineConfig& cfg) {
  if (!cfg.dataset_dir.empty()) return load_dataset(cfg.dataset_dir, cfg.noise, cfg.noise_seed, cfg.classes);
  return inject_in_memory(generate_synthetic_dataset(cfg.synth, cfg.data_seed), cfg.noise, cfg.noise_seed, cfg.classes);
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Float32 round trip, so in-memory models equal what a later step reads
/// back from disk.
inline TensorPack quantize(const TensorPack& p) { return decode_pack(encode_pack(p)); }

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct ClassPrototypes {
  TextPrototypes rgb, pc;
};

inline ClassPrototypes class_prototypes(const PipelineConfig& cfg, const std::string& cls, std::size_t rgb_dim) {
  if (!cfg.prototypes_dir.empty())
    return {read_prototypes(std::filesystem::path(cfg.prototypes_dir) / (cls + "_rgb.mmnr"), cls),
            read_prototypes(std::filesystem::path(cfg.prototypes_dir) / (cls + "_pc.mmnr"), cls)};
  EncoderConfig text = cfg.stage12_encoder;
  text.dim = rgb_dim;
  text.seed = mix_seed(cfg.stage12_encoder.seed ^ role::kImage);
  const TextPrototypes rgb = text_prototypes(cfg.prompts, cls, text);
  text.dim = cfg.stage12_encoder.dim;
  text.seed = mix_seed(cfg.stage12_encoder.seed ^ role::kPoint);
  return {rgb, text_prototypes(cfg.prompts, cls, text)};
}

/// Stage I output for one class. Without denoising only `masks` is filled.
struct Stage1State {
  MaskSet masks;
  std::vector<StageFeatures> feats;
  ClassPrototypes protos;
  ReferenceSelection selection;
};

struct Stage12Result {
  std::vector<SuspectScore> suspect;
  std::vector<std::size_t> references;
  std::optional<DenoiseReport> report;
  std::vector<std::size_t> kept;  // indices into the class train set
};

/// Effective point threshold: theta scaled from theta_area pixels to the grid.
inline std::size_t effective_theta(const PipelineConfig& cfg, std::size_t h, std::size_t w) {
  if (cfg.theta_area == 0) return cfg.theta;
  const double scaled = static_cast<double>(cfg.theta) * static_cast<double>(h * w) / static_cast<double>(cfg.theta_area);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(scaled - 1e-9)));
}

inline MaskSet pipeline_masks(const PipelineConfig& cfg, std::size_t h, std::size_t w) {
  MaskConfig mc = MaskConfig::defaults_for(h, w);
  if (cfg.k_m) mc.k_m = cfg.k_m;
  if (cfg.k_s) mc.k_s = cfg.k_s;
  if (cfg.stride_m) mc.stride_m = cfg.stride_m;
  if (cfg.stride_s) mc.stride_s = cfg.stride_s;
  return build_masks(h, w, mc);
}

inline double effective_tau(const PipelineConfig& cfg) { return cfg.tau < 0.0 ? cfg.noise.fraction : cfg.tau; }

/// Features and suspect scores of every training sample. `refs`, when given,
/// replaces the selection (a stage-1 result read back from disk).
inline Stage1State run_stage1(const ClassInput& ci, const PipelineConfig& cfg,
                              const std::optional<std::vector<std::size_t>>& refs = std::nullopt) {
  if (ci.train.empty()) throw DataError("class " + ci.name + ": empty training set");
  const std::size_t h = ci.train.front().height(), w = ci.train.front().width();
  Stage1State st;
  st.masks = pipeline_masks(cfg, h, w);
  const PointEncoder encoder(cfg.stage12_encoder);
  const std::size_t theta = effective_theta(cfg, h, w);
  st.feats.resize(ci.train.size());
  parallel_for(ci.train.size(), [&](std::size_t i) {
    if (ci.train[i].height() != h || ci.train[i].width() != w) throw DataError("class " + ci.name + ": mixed grid sizes");
    st.feats[i] = extract_stage_features(ci.train[i], st.masks, encoder, theta);
  });
  st.protos = class_prototypes(cfg, ci.name, ci.train.front().rgb_grid.dim());
  st.selection = select_references(st.feats, st.protos.rgb, st.protos.pc, std::min(cfg.references, st.feats.size()));
  if (refs) {
    for (auto i : *refs)
      if (i >= ci.train.size()) throw DataError("class " + ci.name + ": reference index out of range");
    st.selection.refs = *refs;
  }
  return st;
}

inline Stage12Result run_stage2(const ClassInput& ci, const PipelineConfig& cfg, const Stage1State& st) {
  Stage12Result r;
  r.suspect = st.selection.scores;
  r.references = st.selection.refs;
  const std::size_t h = ci.train.front().height(), w = ci.train.front().width();
  const ReferenceSet rs = build_reference_set(st.feats, st.selection, st.protos.rgb, h, w);
  r.report = denoise(st.feats, st.selection, rs, st.masks, DenoiseParams{cfg.lambda_image, cfg.lambda_pc, effective_tau(cfg)});
  r.kept = r.report->kept;
  return r;
}

/// Stages I and II; with denoising off every sample is kept.
inline Stage12Result run_stage12(const ClassInput& ci, const PipelineConfig& cfg) {
  if (ci.train.empty()) throw DataError("class " + ci.name + ": empty training set");
  if (!cfg.denoise) {
    Stage12Result r;
    r.kept.resize(ci.train.size());
    std::iota(r.kept.begin(), r.kept.end(), 0);
    return r;
  }
  return run_stage2(ci, cfg, run_stage1(ci, cfg));
}

inline std::vector<PatchSet> extract_all_patches(const std::vector<FeatureBundle>& bundles, const AlignParams& ap) {
  std::vector<PatchSet> out(bundles.size());
  parallel_for(bundles.size(), [&](std::size_t i) { out[i] = extract_patches(bundles[i], ap); });
  return out;
}

inline void fuse_patches(PatchSet& ps, const FusionHead& head) {
  ps.fused.resize(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) ps.fused[i] = uff_fuse(ps.rgb[i], ps.pc[i], head);
}

inline SamplePatches patch_pairs(const PatchSet& ps) {
  SamplePatches out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(PatchPair{ps.rgb[i], ps.pc[i]});
  return out;
}

/// Patches of the kept training samples of every class.
inline std::vector<std::vector<PatchSet>> kept_train_patches(const std::vector<ClassInput>& inputs,
                                                             const std::vector<std::vector<std::size_t>>& kept,
                                                             const AlignParams& ap) {
  std::vector<std::vector<PatchSet>> out(inputs.size());
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    std::vector<FeatureBundle> bundles;
    for (auto i : kept[c]) bundles.push_back(inputs[c].train.at(i));
    out[c] = extract_all_patches(bundles, ap);
  }
  return out;
}

/// One fusion head trained on the patches of every class, rounded to its
/// stored precision.
inline FusionHead train_head(const std::vector<std::vector<PatchSet>>& patches, const ClassInput& first,
                             const PipelineConfig& cfg, TrainReport* report = nullptr) {
  std::vector<SamplePatches> data;
  for (const auto& cls : patches)
    for (const auto& ps : cls) data.push_back(patch_pairs(ps));
  FusionConfig fc = cfg.fusion;
  fc.rgb_dim = first.train.front().rgb_grid.dim();
  fc.pc_dim = first.train.front().pc_grid.dim();
  TrainConfig tc = cfg.uff;
  tc.seed = mix_seed(cfg.seed ^ 0x756666ull);
  return head_from_pack(quantize(head_to_pack(train_uff(data, fc, tc, report))));
}

inline std::uint64_t class_model_seed(const PipelineConfig& cfg, const std::string& cls) {
  return mix_seed(cfg.seed ^ fnv1a(cls));
}

/// Banks and decision layers of one class from its fused training patches.
inline DecisionModel build_decision_model(const std::vector<PatchSet>& train, const PipelineConfig& cfg,
                                          std::uint64_t seed) {
  std::vector<Vec> rgb, pc, fused;
  for (const auto& ps : train) {
    rgb.insert(rgb.end(), ps.rgb.begin(), ps.rgb.end());
    pc.insert(pc.end(), ps.pc.begin(), ps.pc.end());
    fused.insert(fused.end(), ps.fused.begin(), ps.fused.end());
  }
  DecisionModel m;
  m.banks.rgb = bank_from_pack(quantize(bank_to_pack(build_bank(rgb, cfg.bank).bank)));
  m.banks.pc = bank_from_pack(quantize(bank_to_pack(build_bank(pc, cfg.bank).bank)));
  m.banks.fused = bank_from_pack(quantize(bank_to_pack(build_bank(fused, cfg.bank).bank)));

  std::vector<Triple> img(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    img[i] = train[i].size() ? phi_triple(m.banks, train[i]) : Triple{0.0, 0.0, 0.0};
  });
  std::vector<std::vector<Triple>> per(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    if (train[i].size()) per[i] = psi_triples(m.banks, train[i]);
  });
  std::vector<Triple> pix;
  for (auto& p : per) pix.insert(pix.end(), p.begin(), p.end());
  OcsvmParams op = cfg.ocsvm;
  op.seed = mix_seed(seed ^ 0x696d67ull);
  m.image = ocsvm_from_pack(quantize(ocsvm_to_pack(train_ocsvm(img, op))));
  op.seed = mix_seed(seed ^ 0x706978ull);
  m.pixel = ocsvm_from_pack(quantize(ocsvm_to_pack(train_ocsvm(pix, op))));
  return m;
}

/// Test-set scores of one class. Pixel maps are rounded to their stored
/// precision so evaluation matches a read-back from disk.
struct ClassScores {
  std::vector<std::string> sample_ids;
  std::vector<double> s_image;
  std::vector<ScoreMap> maps;
};

inline ClassScores infer_class(const ClassInput& ci, const FusionHead& head, const DecisionModel& model,
                               const PipelineConfig& cfg) {
  std::vector<PatchSet> patches = extract_all_patches(ci.test, cfg.align);
  std::vector<DecisionOutput> outs(ci.test.size());
  parallel_for(ci.test.size(), [&](std::size_t i) {
    fuse_patches(patches[i], head);
    outs[i] = decide(patches[i], model, ci.test[i].height(), ci.test[i].width(), cfg.smooth);
  });
  ClassScores cs;
  for (std::size_t i = 0; i < ci.test.size(); ++i) {
    cs.sample_ids.push_back(ci.test[i].sample_id);
    cs.s_image.push_back(outs[i].s_image);
    const Tensor t = require(quantize(TensorPack{{"map", map_tensor(outs[i].s_pixel)}}), "map");
    cs.maps.emplace_back(outs[i].s_pixel.height(), outs[i].s_pixel.width(), t.values);
  }
  return cs;
}

inline EvalResult evaluate_class(const ClassInput& ci, const ClassScores& cs, double fpr_limit) {
  if (cs.s_image.size() != ci.test.size()) throw DataError("class " + ci.name + ": score count does not match test set");
  std::vector<int> labels;
  std::vector<Mask> gts;
  for (std::size_t i = 0; i < ci.test.size(); ++i) {
    const auto& b = ci.test[i];
    if (cs.sample_ids[i] != b.sample_id) throw DataError("class " + ci.name + ": score order does not match test set");
    labels.push_back(b.label == Label::Anomalous ? 1 : 0);
    gts.push_back(b.gt_mask ? *b.gt_mask : Mask(b.height() * b.width(), 0));
  }
  EvalResult e;
  e.fpr_limit = fpr_limit;
  e.i_auroc = auroc(cs.s_image, labels);
  e.p_auroc = pixel_auroc(cs.maps, gts);
  e.aupro = aupro(cs.maps, gts, fpr_limit);
  return e;
}

// ---------------------------------------------------------------------------
// Reports and artifact documents
// ---------------------------------------------------------------------------

struct ClassReport {
  std::string name;
  EvalResult eval;
  std::size_t train_size = 0, injected = 0;
  std::size_t kept_size = 0, kept_injected = 0;

  double noise_before() const { return train_size ? static_cast<double>(injected) / static_cast<double>(train_size) : 0.0; }
  double noise_after() const {
    return kept_size ? static_cast<double>(kept_injected) / static_cast<double>(kept_size) : 0.0;
  }
};

struct RunResult {
  std::vector<ClassReport> classes;
  EvalResult mean;
  double noise_before = 0.0, noise_after = 0.0;
  std::string run_hash;
  std::filesystem::path run_dir;
  std::map<std::string, std::string> artifacts;
  TrainReport uff;
};

inline ClassReport class_report(const ClassInput& ci, const std::vector<std::size_t>& kept, const EvalResult& e) {
  ClassReport rep;
  rep.name = ci.name;
  rep.eval = e;
  rep.train_size = ci.train.size();
  for (auto f : ci.injected) rep.injected += f;
  rep.kept_size = kept.size();
  for (auto i : kept) rep.kept_injected += ci.injected.at(i);
  return rep;
}

/// Class means and the pooled noise levels (injected over train size, summed
/// over classes).
inline void summarize(RunResult& res, double fpr_limit) {
  res.mean = EvalResult{};
  res.mean.fpr_limit = fpr_limit;
  std::size_t total = 0, injected = 0, kept_total = 0, kept_injected = 0;
  const auto n = static_cast<double>(res.classes.size());
  for (const auto& c : res.classes) {
    res.mean.i_auroc += c.eval.i_auroc / n;
    res.mean.p_auroc += c.eval.p_auroc / n;
    res.mean.aupro += c.eval.aupro / n;
    total += c.train_size;
    injected += c.injected;
    kept_total += c.kept_size;
    kept_injected += c.kept_injected;
  }
  res.noise_before = total ? static_cast<double>(injected) / static_cast<double>(total) : 0.0;
  res.noise_after = kept_total ? static_cast<double>(kept_injected) / static_cast<double>(kept_total) : 0.0;
}

inline nlohmann::json to_json(const EvalResult& e) {
  return {{"i_auroc", e.i_auroc}, {"p_auroc", e.p_auroc}, {"aupro", e.aupro}, {"fpr_limit", e.fpr_limit}};
}

inline nlohmann::json eval_json(const RunResult& r) {
  nlohmann::json j;
  j["run_hash"] = r.run_hash;
  j["mean"] = to_json(r.mean);
  j["noise_level"] = {{"before", r.noise_before}, {"after", r.noise_after}};
  j["classes"] = nlohmann::json::array();
  for (const auto& c : r.classes) {
    nlohmann::json cj = to_json(c.eval);
    cj["class"] = c.name;
    cj["train_size"] = c.train_size;
    cj["injected"] = c.injected;
    cj["kept"] = c.kept_size;
    cj["kept_injected"] = c.kept_injected;
    cj["noise_level_before"] = c.noise_before();
    cj["noise_level_after"] = c.noise_after();
    j["classes"].push_back(cj);
  }
  return j;
}

inline std::string eval_csv(const RunResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "class,i_auroc,p_auroc,aupro,train_size,injected,kept,kept_injected\n";
  for (const auto& c : r.classes)
    out << c.name << ',' << c.eval.i_auroc << ',' << c.eval.p_auroc << ',' << c.eval.aupro << ',' << c.train_size << ','
        << c.injected << ',' << c.kept_size << ',' << c.kept_injected << '\n';
  out << "mean," << r.mean.i_auroc << ',' << r.mean.p_auroc << ',' << r.mean.aupro << ",,,,\n";
  return out.str();
}

inline std::string run_hash(const PipelineConfig& cfg) { return sha256_hex(to_json(cfg).dump()).substr(0, 16); }

inline nlohmann::json stage1_json(const ClassInput& ci, const Stage12Result& r) {
  nlohmann::json j;
  j["references"] = nlohmann::json::array();
  for (auto i : r.references) j["references"].push_back(ci.train[i].sample_id);
  j["scores"] = nlohmann::json::array();
  for (const auto& s : r.suspect)
    j["scores"].push_back({{"sample_id", s.sample_id}, {"s_image", s.s_image}, {"s_pc", s.s_pc}, {"s_ref", s.s_ref}});
  return j;
}

inline nlohmann::json stage2_json(const ClassInput& ci, const Stage12Result& r) {
  nlohmann::json j;
  j["denoise"] = r.report.has_value();
  if (r.report) {
    const auto& rep = *r.report;
    j["tau"] = rep.params.tau;
    j["lambda_image"] = rep.params.lambda_image;
    j["lambda_pc"] = rep.params.lambda_pc;
    j["removed"] = rep.removed_ids;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : rep.samples)
      j["samples"].push_back({{"sample_id", s.sample_id},
                              {"s_image_final", s.s_image_final},
                              {"s_pc_final", s.s_pc_final},
                              {"s_final", s.s_final}});
  }
  j["kept"] = nlohmann::json::array();
  for (auto i : r.kept) j["kept"].push_back(ci.train[i].sample_id);
  return j;
}

/// The training manifest restricted to the kept samples, with absolute paths.
inline DatasetManifest filtered_manifest(const DatasetManifest& m, const std::vector<std::size_t>& kept) {
  DatasetManifest out = m;
  out.samples.clear();
  out.injected.clear();
  for (auto i : kept) {
    const std::string& s = m.samples.at(i);
    out.samples.push_back(std::filesystem::absolute(m.resolve(s)).lexically_normal().generic_string());
    if (std::find(m.injected.begin(), m.injected.end(), s) != m.injected.end()) out.injected.push_back(out.samples.back());
  }
  return out;
}

/// Maps sample ids listed under `key` back to train indices.
inline std::vector<std::size_t> train_indices(const ClassInput& ci, const nlohmann::json& doc, const std::string& key) {
  if (!doc.is_object() || !doc.contains(ci.name) || !doc.at(ci.name).contains(key))
    throw DataError("run directory has no " + key + " list for class " + ci.name);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ci.train.size(); ++i) index[ci.train[i].sample_id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : doc.at(ci.name).at(key)) {
    const auto it = index.find(id.get<std::string>());
    if (it == index.end()) throw DataError("class " + ci.name + ": unknown sample '" + id.get<std::string>() + "'");
    out.push_back(it->second);
  }
  return out;
}

inline nlohmann::json scores_json(const ClassScores& cs) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t i = 0; i < cs.s_image.size(); ++i) j.push_back({{"sample_id", cs.sample_ids[i]}, {"s_image", cs.s_image[i]}});
  return j;
}

// ---------------------------------------------------------------------------
// Artifact store
// ---------------------------------------------------------------------------

/// Writes run artifacts and records the SHA-256 of every file in
/// artifacts.json. A store without a root only hashes.
class ArtifactStore {
 public:
  ArtifactStore() = default;
  explicit ArtifactStore(std::filesystem::path root) : root_(std::move(root)) {
    const auto index = root_ / "artifacts.json";
    if (std::filesystem::exists(index)) {
      try {
        hashes_ = read_json_at(index).get<std::map<std::string, std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw DataError("artifacts.json: " + std::string(e.what()));
      }
    }
  }

  bool enabled() const { return !root_.empty(); }
  const std::filesystem::path& root() const { return root_; }
  const std::map<std::string, std::string>& hashes() const { return hashes_; }

  void bytes(const std::string& rel, const std::vector<std::uint8_t>& data) {
    hashes_[rel] = sha256_hex(data);
    if (enabled()) detail::write_file(root_ / rel, data);
  }
  void json(const std::string& rel, const nlohmann::json& j) {
    const std::string s = j.dump(2) + "\n";
    bytes(rel, std::vector<std::uint8_t>(s.begin(), s.end()));
  }
  void pack(const std::string& rel, const TensorPack& p) { bytes(rel, encode_pack(p)); }

  /// Rewrites artifacts.json; the index itself is not hashed.
  void flush() const {
    if (!enabled()) return;
    const std::string s = nlohmann::json(hashes_).dump(2) + "\n";
    detail::write_file(root_ / "artifacts.json", std::vector<std::uint8_t>(s.begin(), s.end()));
  }

  nlohmann::json read_json_at(const std::filesystem::path& p) const {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(p.string() + ": " + e.what());
    }
  }
  nlohmann::json read_json(const std::string& rel) const { return read_json_at(root_ / rel); }
  TensorPack read(const std::string& rel) const { return read_pack(root_ / rel); }

 private:
  std::filesystem::path root_;
  std::map<std::string, std::string> hashes_;
};

inline std::string bank_path(const std::string& cls, const std::string& which) { return "banks/" + cls + "_" + which + ".mmnr"; }
inline std::string ocsvm_path(const std::string& cls, const std::string& which) {
  return "head/" + cls + "_ocsvm_" + which + ".mmnr";
}
inline std::string map_path(const std::string& cls, const std::string& id) { return "maps/" + cls + "/" + id + ".mmnr"; }

inline void store_model(ArtifactStore& store, const std::string& cls, const DecisionModel& m) {
  store.pack(bank_path(cls, "rgb"), bank_to_pack(m.banks.rgb));
  store.pack(bank_path(cls, "pc"), bank_to_pack(m.banks.pc));
  store.pack(bank_path(cls, "fused"), bank_to_pack(m.banks.fused));
  store.pack(ocsvm_path(cls, "image"), ocsvm_to_pack(m.image));
  store.pack(ocsvm_path(cls, "pixel"), ocsvm_to_pack(m.pixel));
}

inline DecisionModel load_model(const ArtifactStore& store, const std::string& cls) {
  DecisionModel m;
  m.banks.rgb = bank_from_pack(store.read(bank_path(cls, "rgb")));
  m.banks.pc = bank_from_pack(store.read(bank_path(cls, "pc")));
  m.banks.fused = bank_from_pack(store.read(bank_path(cls, "fused")));
  m.image = ocsvm_from_pack(store.read(ocsvm_path(cls, "image")));
  m.pixel = ocsvm_from_pack(store.read(ocsvm_path(cls, "pixel")));
  return m;
}

inline void store_scores(ArtifactStore& store, const std::string& cls, const ClassScores& cs) {
  for (std::size_t i = 0; i < cs.maps.size(); ++i)
    store.pack(map_path(cls, cs.sample_ids[i]), TensorPack{{"map", map_tensor(cs.maps[i])}});
  store.json("scores/" + cls + ".json", scores_json(cs));
}

inline ClassScores load_scores(const ArtifactStore& store, const std::string& cls) {
  ClassScores cs;
  for (const auto& e : store.read_json("scores/" + cls + ".json")) {
    cs.sample_ids.push_back(e.at("sample_id").get<std::string>());
    cs.s_image.push_back(e.at("s_image").get<double>());
    const TensorPack pack = store.read(map_path(cls, cs.sample_ids.back()));
    const Tensor& t = require(pack, "map");
    if (t.shape.size() != 2) throw ParseError(ParseErrc::ShapeMismatch, "score map must be 2-D");
    cs.maps.emplace_back(t.shape[0], t.shape[1], t.values);
  }
  return cs;
}

// ---------------------------------------------------------------------------
// Stage steps over a run directory. Each step reads what earlier steps wrote,
// so the CLI subcommands chain; `run` performs them all in one process.
// ---------------------------------------------------------------------------

inline std::vector<ClassInput> load_inputs_tagged(const PipelineConfig& cfg) {
  try {
    return load_inputs(cfg);
  } catch (const Error& e) {
    throw_tagged(e, "ingest");
  }
}

inline void write_config(ArtifactStore& store, const PipelineConfig& cfg) {
  if (!store.enabled()) return;
  const std::string s = to_json(cfg).dump(2) + "\n";
  detail::write_file(store.root() / "config.json", std::vector<std::uint8_t>(s.begin(), s.end()));
}

/// Stage I for every class; writes stage1.json. Without denoising nothing
/// is computed and the reference lists are empty.
inline std::vector<std::optional<Stage1State>> step_stage1(const std::vector<ClassInput>& inputs, const PipelineConfig& cfg,
                                                           ArtifactStore& store) {
  nlohmann::json doc = nlohmann::json::object();
  std::vector<std::optional<Stage1State>> out;
  for (const auto& ci : inputs) {
    Stage12Result r;
    try {
      if (cfg.denoise) {
        out.push_back(run_stage1(ci, cfg));
        const Stage1State& st = *out.back();
        r.suspect = st.selection.scores;
        r.references = st.selection.refs;
        const ReferenceSet rs =
            build_reference_set(st.feats, st.selection, st.protos.rgb, ci.train.front().height(), ci.train.front().width());
        for (std::size_t n = 0; n < rs.suspect_maps.size(); ++n)
          store.pack("suspect/" + ci.name + "/" + ci.train[r.references[n]].sample_id + ".mmnr",
                     TensorPack{{"map", map_tensor(rs.suspect_maps[n])}});
      } else {
        out.emplace_back();
      }
    } catch (const Error& e) {
      throw_tagged(e, "stage1 [" + ci.name + "]");
    }
    doc[ci.name] = stage1_json(ci, r);
  }
  store.json("stage1.json", doc);
  return out;
}

/// Stage I states rebuilt with the references recorded in stage1.json.
inline std::vector<std::optional<Stage1State>> load_stage1(const std::vector<ClassInput>& inputs, const PipelineConfig& cfg,
                                                           const nlohmann::json& stage1) {
  std::vector<std::optional<Stage1State>> out;
  for (const auto& ci : inputs) {
    if (!cfg.denoise) {
      out.emplace_back();
      continue;
    }
    try {
      out.push_back(run_stage1(ci, cfg, train_indices(ci, stage1, "references")));
    } catch (const Error& e) {
      throw_tagged(e, "stage1 [" + ci.name + "]");
    }
  }
  return out;
}

/// Stage II for every class; writes stage2.json.
inline std::vector<Stage12Result> step_stage2(const std::vector<ClassInput>& inputs, const PipelineConfig& cfg,
                                              ArtifactStore& store, const std::vector<std::optional<Stage1State>>& states) {
  nlohmann::json doc = nlohmann::json::object();
  std::vector<Stage12Result> out;
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    const ClassInput& ci = inputs[c];
    try {
      out.push_back(states.at(c) ? run_stage2(ci, cfg, *states[c]) : run_stage12(ci, cfg));
    } catch (const Error& e) {
      throw_tagged(e, "stage2 [" + ci.name + "]");
    }
    doc[ci.name] = stage2_json(ci, out.back());
    if (ci.train_manifest) store.json("stage2/" + ci.name + "_train.json", to_json(filtered_manifest(*ci.train_manifest, out.back().kept)));
  }
  store.json("stage2.json", doc);
  return out;
}

inline std::vector<std::vector<std::size_t>> kept_from(const std::vector<ClassInput>& inputs, const nlohmann::json& stage2) {
  std::vector<std::vector<std::size_t>> kept;
  for (const auto& ci : inputs) kept.push_back(train_indices(ci, stage2, "kept"));
  return kept;
}

inline FusionHead step_train_uff(const std::vector<ClassInput>& inputs, const std::vector<std::vector<PatchSet>>& patches,
                                 const PipelineConfig& cfg, ArtifactStore& store, TrainReport* report = nullptr) {
  FusionHead head;
  try {
    head = train_head(patches, inputs.front(), cfg, report);
  } catch (const Error& e) {
    throw_tagged(e, "train-uff");
  }
  store.pack("head/uff.mmnr", head_to_pack(head));
  return head;
}

inline std::vector<DecisionModel> step_build_banks(const std::vector<ClassInput>& inputs,
                                                   std::vector<std::vector<PatchSet>>& patches, const FusionHead& head,
                                                   const PipelineConfig& cfg, ArtifactStore& store) {
  std::vector<DecisionModel> models;
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    try {
      for (auto& ps : patches[c]) fuse_patches(ps, head);
      models.push_back(build_decision_model(patches[c], cfg, class_model_seed(cfg, inputs[c].name)));
    } catch (const Error& e) {
      throw_tagged(e, "build-banks [" + inputs[c].name + "]");
    }
    store_model(store, inputs[c].name, models.back());
  }
  return models;
}

inline std::vector<ClassScores> step_infer(const std::vector<ClassInput>& inputs, const FusionHead& head,
                                           const std::vector<DecisionModel>& models, const PipelineConfig& cfg,
                                           ArtifactStore& store) {
  std::vector<ClassScores> out;
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    try {
      out.push_back(infer_class(inputs[c], head, models[c], cfg));
    } catch (const Error& e) {
      throw_tagged(e, "infer [" + inputs[c].name + "]");
    }
    store_scores(store, inputs[c].name, out.back());
  }
  return out;
}

inline RunResult step_eval(const std::vector<ClassInput>& inputs, const std::vector<std::vector<std::size_t>>& kept,
                           const std::vector<ClassScores>& scores, const PipelineConfig& cfg, ArtifactStore& store) {
  RunResult res;
  res.run_hash = run_hash(cfg);
  res.run_dir = store.root();
  for (std::size_t c = 0; c < inputs.size(); ++c) {
    EvalResult e;
    try {
      e = evaluate_class(inputs[c], scores[c], cfg.fpr_limit);
    } catch (const Error& err) {
      throw_tagged(err, "eval [" + inputs[c].name + "]");
    }
    res.classes.push_back(class_report(inputs[c], kept[c], e));
  }
  summarize(res, cfg.fpr_limit);
  store.json("eval.json", eval_json(res));
  const std::string csv = eval_csv(res);
  store.bytes("eval.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));
  res.artifacts = store.hashes();
  return res;
}

/// Runs every stage on the given inputs.
inline RunResult run_on_inputs(const std::vector<ClassInput>& inputs, const PipelineConfig& cfg, ArtifactStore& store) {
  cfg.validate();
  if (inputs.empty()) throw DataError("run: no classes");
  write_config(store, cfg);
  const auto s12 = step_stage2(inputs, cfg, store, step_stage1(inputs, cfg, store));
  std::vector<std::vector<std::size_t>> kept;
  for (const auto& r : s12) kept.push_back(r.kept);
  auto patches = kept_train_patches(inputs, kept, cfg.align);
  TrainReport report;
  const FusionHead head = step_train_uff(inputs, patches, cfg, store, &report);
  const auto models = step_build_banks(inputs, patches, head, cfg, store);
  const auto scores = step_infer(inputs, head, models, cfg, store);
  RunResult res = step_eval(inputs, kept, scores, cfg, store);
  res.uff = report;
  store.flush();
  return res;
}

inline std::filesystem::path run_directory(const PipelineConfig& cfg) {
  return std::filesystem::path(cfg.runs_dir) / run_hash(cfg);
}

/// Loads the configured inputs and runs; artifacts go to
/// <runs_dir>/<config hash>/ unless `in_memory` is set.
inline RunResult run_pipeline(const PipelineConfig& cfg, bool in_memory = false) {
  cfg.validate();
  if (cfg.threads) set_thread_count(cfg.threads);
  const auto inputs = load_inputs_tagged(cfg);
  ArtifactStore store = in_memory ? ArtifactStore() : ArtifactStore(run_directory(cfg));
  return run_on_inputs(inputs, cfg, store);
}

}  // namespace mmnr
