#pragma once
// Pipeline configuration and its TOML-style file format: [table] headers,
// key = value lines, '#' comments. Values are strings, integers, floats,
// booleans or single-line arrays of those. Every default is the value the
// method description gives where it gives one.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmnr/coreset.hpp"
#include "mmnr/dataset.hpp"
#include "mmnr/decision.hpp"
#include "mmnr/encoders.hpp"
#include "mmnr/fusion.hpp"
#include "mmnr/metrics.hpp"
#include "mmnr/stage1.hpp"
#include "mmnr/synth.hpp"

namespace mmnr {

struct PipelineConfig {
  // [data]
  std::string dataset_dir;  // empty: generate the synthetic set in memory
  std::vector<std::string> classes;
  std::uint64_t data_seed = 7;
  SynthSpec synth;
  // [noise]
  NoiseProtocol noise;
  std::uint64_t noise_seed = 0;
  // [stage1]
  EncoderConfig stage12_encoder;
  PromptEnsemble prompts = PromptEnsemble::defaults();
  std::string prototypes_dir;
  std::size_t references = kDefaultReferences;
  std::size_t theta = kDefaultMinPoints;
  std::size_t theta_area = 224 * 224;  // pixel count theta refers to; 0 disables scaling
  std::size_t k_m = 0, k_s = 0, stride_m = 0, stride_s = 0;  // 0: derived from the grid
  // [stage2]
  bool denoise = true;
  double lambda_image = 1.0;
  double lambda_pc = 1.5;
  double tau = -1.0;  // negative: the injected noise fraction
  // [stage3]
  AlignParams align;
  FusionConfig fusion;
  TrainConfig uff;
  BankParams bank;
  OcsvmParams ocsvm;
  bool smooth = true;
  // [eval]
  double fpr_limit = kDefaultFprLimit;
  // [run]
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string runs_dir = "runs";

  void validate() const {
    synth.validate();
    noise.validate();
    stage12_encoder.validate();
    prompts.validate();
    if (references == 0) throw ConfigError("stage1.references must be >= 1");
    if (theta == 0) throw ConfigError("stage1.theta must be >= 1");
    if (!(lambda_image >= 0.0 && lambda_pc >= 0.0)) throw ConfigError("stage2 lambdas must be >= 0");
    if (!(tau < 1.0)) throw ConfigError("stage2.tau must be < 1");
    align.validate();
    fusion.validate();
    uff.validate();
    bank.validate();
    ocsvm.validate();
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("eval.fpr_limit must lie in (0, 1]");
  }
};

/// Rethrows `e` as the same error kind with a stage tag prepended.
[[noreturn]] inline void throw_tagged(const Error& e, const std::string& stage) {
  const std::string msg = stage + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::Config: throw ConfigError(msg);
    case ErrorKind::Numeric: throw NumericError(msg);
    case ErrorKind::Data: break;
  }
  throw DataError(msg);
}

// ---------------------------------------------------------------------------
// JSON view (also the canonical form hashed into run ids)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PipelineConfig& c) {
  using nlohmann::json;
  json j;
  j["data"] = {{"dataset_dir", c.dataset_dir}, {"classes", c.classes}, {"seed", c.data_seed}};
  j["synth"] = to_json(c.synth);
  j["noise"] = {{"protocol", to_string(c.noise.kind)}, {"fraction", c.noise.fraction}, {"seed", c.noise_seed}};
  j["stage1"] = {{"encoder_dim", c.stage12_encoder.dim},
                 {"encoder_seed", c.stage12_encoder.seed},
                 {"length_scale", c.stage12_encoder.length_scale},
                 {"templates", c.prompts.templates},
                 {"normal_states", c.prompts.normal_states},
                 {"anomalous_states", c.prompts.anomalous_states},
                 {"prototypes_dir", c.prototypes_dir},
                 {"references", c.references},
                 {"theta", c.theta},
                 {"theta_area", c.theta_area},
                 {"k_m", c.k_m},
                 {"k_s", c.k_s},
                 {"stride_m", c.stride_m},
                 {"stride_s", c.stride_s}};
  j["stage2"] = {{"denoise", c.denoise}, {"lambda_image", c.lambda_image}, {"lambda_pc", c.lambda_pc}, {"tau", c.tau}};
  j["align"] = {{"centers", c.align.centers}, {"pool", c.align.pool}, {"eps", c.align.eps}, {"neighbors", c.align.neighbors}};
  j["uff"] = {{"lr", c.uff.lr},
              {"warmup_steps", c.uff.warmup_steps},
              {"batch", c.uff.batch},
              {"steps", c.uff.steps},
              {"patches_per_sample", c.uff.patches_per_sample},
              {"weight_decay", c.uff.weight_decay},
              {"hidden_factor", c.fusion.hidden_factor},
              {"proj_dim", c.fusion.proj_dim},
              {"temperature", c.fusion.temperature}};
  j["bank"] = {{"lof_k", c.bank.lof_k}, {"tau", c.bank.tau}, {"fraction", c.bank.fraction}};
  j["ocsvm"] = {{"nu", c.ocsvm.nu},
                {"lr", c.ocsvm.lr},
                {"steps", c.ocsvm.steps},
                {"batch", c.ocsvm.batch},
                {"standardize", c.ocsvm.standardize},
                {"smooth", c.smooth}};
  j["eval"] = {{"fpr_limit", c.fpr_limit}};
  j["run"] = {{"seed", c.seed}, {"runs_dir", c.runs_dir}};
  return j;
}

namespace detail {

class TableReader {
 public:
  TableReader(const nlohmann::json& root, const std::string& name) : name_(name) {
    if (root.contains(name)) {
      if (!root.at(name).is_object()) throw ConfigError("[" + name + "] must be a table");
      table_ = root.at(name);
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!table_.contains(key)) return;
    seen_.insert(key);
    const auto& v = table_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected a boolean");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())
          throw ConfigError("expected a non-negative integer");
        out = v.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
        out = v.get<std::string>();
      } else {
        if (!v.is_array()) throw ConfigError("expected an array");
        out = v.get<T>();
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(name_ + "." + key + ": wrong value type");
    } catch (const ConfigError& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  /// Unknown keys are errors, so typos do not silently fall back to defaults.
  void finish() const {
    for (const auto& [k, v] : table_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + name_ + "." + k);
  }

 private:
  std::string name_;
  nlohmann::json table_ = nlohmann::json::object();
  std::set<std::string> seen_;
};

}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> tables{"data", "synth", "noise", "stage1", "stage2", "align",
                                            "uff",  "bank",  "ocsvm", "eval",   "run"};
  if (!j.is_object()) throw ConfigError("config must be a table");
  for (const auto& [k, v] : j.items())
    if (!tables.count(k)) throw ConfigError("unknown table [" + k + "]");
  PipelineConfig c;
  {
    detail::TableReader t(j, "data");
    t.get("dataset_dir", c.dataset_dir);
    t.get("classes", c.classes);
    t.get("seed", c.data_seed);
    t.finish();
  }
  {
    detail::TableReader t(j, "synth");
    std::string modality = to_string(c.synth.modality);
    t.get("classes", c.synth.classes);
    t.get("train_per_class", c.synth.train_per_class);
    t.get("test_per_class", c.synth.test_per_class);
    t.get("defect_rate", c.synth.defect_rate);
    t.get("modality", modality);
    t.get("grid", c.synth.grid);
    t.get("raster_scale", c.synth.raster_scale);
    t.get("rgb_dim", c.synth.rgb_dim);
    t.get("pc_dim", c.synth.pc_dim);
    t.get("point_radius", c.synth.point_radius);
    t.get("surface_noise", c.synth.surface_noise);
    t.get("color_noise", c.synth.color_noise);
    t.get("length_scale", c.synth.length_scale);
    c.synth.modality = parse_defect_modality(modality);
    t.finish();
  }
  {
    detail::TableReader t(j, "noise");
    std::string kind = to_string(c.noise.kind);
    t.get("protocol", kind);
    t.get("fraction", c.noise.fraction);
    t.get("seed", c.noise_seed);
    c.noise.kind = parse_noise_kind(kind);
    t.finish();
  }
  {
    detail::TableReader t(j, "stage1");
    t.get("encoder_dim", c.stage12_encoder.dim);
    t.get("encoder_seed", c.stage12_encoder.seed);
    t.get("length_scale", c.stage12_encoder.length_scale);
    t.get("templates", c.prompts.templates);
    t.get("normal_states", c.prompts.normal_states);
    t.get("anomalous_states", c.prompts.anomalous_states);
    t.get("prototypes_dir", c.prototypes_dir);
    t.get("references", c.references);
    t.get("theta", c.theta);
    t.get("theta_area", c.theta_area);
    t.get("k_m", c.k_m);
    t.get("k_s", c.k_s);
    t.get("stride_m", c.stride_m);
    t.get("stride_s", c.stride_s);
    t.finish();
  }
  {
    detail::TableReader t(j, "stage2");
    t.get("denoise", c.denoise);
    t.get("lambda_image", c.lambda_image);
    t.get("lambda_pc", c.lambda_pc);
    t.get("tau", c.tau);
    t.finish();
  }
  {
    detail::TableReader t(j, "align");
    t.get("centers", c.align.centers);
    t.get("pool", c.align.pool);
    t.get("eps", c.align.eps);
    t.get("neighbors", c.align.neighbors);
    t.finish();
  }
  {
    detail::TableReader t(j, "uff");
    t.get("lr", c.uff.lr);
    t.get("warmup_steps", c.uff.warmup_steps);
    t.get("batch", c.uff.batch);
    t.get("steps", c.uff.steps);
    t.get("patches_per_sample", c.uff.patches_per_sample);
    t.get("weight_decay", c.uff.weight_decay);
    t.get("hidden_factor", c.fusion.hidden_factor);
    t.get("proj_dim", c.fusion.proj_dim);
    t.get("temperature", c.fusion.temperature);
    t.finish();
  }
  {
    detail::TableReader t(j, "bank");
    t.get("lof_k", c.bank.lof_k);
    t.get("tau", c.bank.tau);
    t.get("fraction", c.bank.fraction);
    t.finish();
  }
  {
    detail::TableReader t(j, "ocsvm");
    t.get("nu", c.ocsvm.nu);
    t.get("lr", c.ocsvm.lr);
    t.get("steps", c.ocsvm.steps);
    t.get("batch", c.ocsvm.batch);
    t.get("standardize", c.ocsvm.standardize);
    t.get("smooth", c.smooth);
    t.finish();
  }
  {
    detail::TableReader t(j, "eval");
    t.get("fpr_limit", c.fpr_limit);
    t.finish();
  }
  {
    detail::TableReader t(j, "run");
    t.get("seed", c.seed);
    t.get("threads", c.threads);
    t.get("runs_dir", c.runs_dir);
    t.finish();
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// TOML-style reader
// ---------------------------------------------------------------------------

namespace detail {

class TomlLexer {
 public:
  TomlLexer(std::string_view s, std::size_t line) : s_(s), line_(line) {}

  nlohmann::json value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return string();
    if (c == '[') return array();
    if (s_.compare(pos_, 4, "true") == 0) {
      pos_ += 4;
      return true;
    }
    if (s_.compare(pos_, 5, "false") == 0) {
      pos_ += 5;
      return false;
    }
    return number();
  }

  void expect_end() {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected trailing text");
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) fail("unterminated escape");
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out.push_back(c);
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    nlohmann::json arr = nlohmann::json::array();
    for (;;) {
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(value());
      skip_ws();
      if (pos_ < s_.size() && s_[pos_] == ',') ++pos_;
      else if (pos_ < s_.size() && s_[pos_] != ']') fail("expected ',' or ']'");
    }
  }

  nlohmann::json number() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
                                s_[pos_] == '-' || s_[pos_] == '+' || s_[pos_] == '_'))
      ++pos_;
    std::string tok(s_.substr(start, pos_ - start));
    tok.erase(std::remove(tok.begin(), tok.end(), '_'), tok.end());
    if (tok.empty()) fail("missing value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    std::size_t used = 0;
    try {
      if (is_float) {
        const double d = std::stod(tok, &used);
        if (used == tok.size()) return d;
      } else if (tok[0] == '-') {
        const long long v = std::stoll(tok, &used);
        if (used == tok.size()) return v;
      } else {
        const unsigned long long v = std::stoull(tok, &used);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("bad value '" + tok + "'");
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

}  // namespace detail

/// Parses the TOML-style document into a JSON object of tables.
inline nlohmann::json parse_toml(const std::string& text) {
  nlohmann::json root = nlohmann::json::object();
  std::string table;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (close == std::string::npos) throw ConfigError(where + "unterminated table header");
      const std::string rest = detail::trim(std::string_view(line).substr(close + 1));
      if (!rest.empty() && rest[0] != '#') throw ConfigError(where + "text after table header");
      table = detail::trim(std::string_view(line).substr(1, close - 1));
      if (table.empty()) throw ConfigError(where + "empty table name");
      if (root.contains(table)) throw ConfigError(where + "duplicate table [" + table + "]");
      root[table] = nlohmann::json::object();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (table.empty()) throw ConfigError(where + "key outside of any table");
    detail::TomlLexer lex(std::string_view(line).substr(eq + 1), line_no);
    nlohmann::json v = lex.value();
    lex.expect_end();
    if (root[table].contains(key)) throw ConfigError(where + "duplicate key " + key);
    root[table][key] = std::move(v);
  }
  return root;
}

inline PipelineConfig parse_config(const std::string& text) { return config_from_json(parse_toml(text)); }

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace mmnr
