// mmnr: command-line front end of the pipeline. Every stage subcommand reads
// the artifacts of earlier stages from the run directory.

#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mmnr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mmnr;

namespace {

struct Common {
  std::string config;
  std::string run_dir;
  unsigned threads = 0;
};

PipelineConfig load(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
  if (c.threads) cfg.threads = c.threads;
  cfg.validate();
  if (cfg.threads) set_thread_count(cfg.threads);
  return cfg;
}

ArtifactStore open_store(const Common& c, const PipelineConfig& cfg) {
  return ArtifactStore(c.run_dir.empty() ? run_directory(cfg) : fs::path(c.run_dir));
}

void print_eval(const RunResult& r) {
  for (const auto& c : r.classes)
    std::cout << c.name << "  I-AUROC " << c.eval.i_auroc << "  P-AUROC " << c.eval.p_auroc << "  AUPRO "
              << c.eval.aupro << "  noise " << c.noise_before() << " -> " << c.noise_after() << '\n';
  std::cout << "mean  I-AUROC " << r.mean.i_auroc << "  P-AUROC " << r.mean.p_auroc << "  AUPRO " << r.mean.aupro
            << "  noise " << r.noise_before << " -> " << r.noise_after << '\n';
  std::cout << "run " << r.run_dir.string() << '\n';
}

void add_common(CLI::App* sub, Common& c, bool run_dir = true) {
  sub->add_option("-c,--config", c.config, "TOML-style config file (defaults when omitted)")->check(CLI::ExistingFile);
  if (run_dir) sub->add_option("--run-dir", c.run_dir, "run directory (default <runs_dir>/<config hash>)");
  sub->add_option("--threads", c.threads, "worker thread cap (0 = hardware)");
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Noise-resistant multimodal anomaly detection on feature bundles"};
  app.require_subcommand(1);
  Common c;

  std::string out_dir;
  auto* gen = app.add_subcommand("gen-data", "write the configured synthetic dataset");
  add_common(gen, c, false);
  gen->add_option("-o,--out", out_dir, "dataset directory")->required();

  auto* s1 = app.add_subcommand("stage1", "select references and write stage1.json");
  add_common(s1, c);
  auto* s2 = app.add_subcommand("stage2", "denoise the training sets and write stage2.json");
  add_common(s2, c);
  auto* uff = app.add_subcommand("train-uff", "train the fusion head on the kept samples");
  add_common(uff, c);
  auto* banks = app.add_subcommand("build-banks", "build memory banks and decision layers");
  add_common(banks, c);
  auto* infer = app.add_subcommand("infer", "score the test sets");
  add_common(infer, c);
  auto* eval = app.add_subcommand("eval", "compute metrics and write eval.json");
  add_common(eval, c);
  auto* run = app.add_subcommand("run", "all stages in one go");
  add_common(run, c);

  std::string map_file, png_file;
  auto* render = app.add_subcommand("render", "render a stored score map as a PNG heatmap");
  render->add_option("--map", map_file, "score map (.mmnr)")->required()->check(CLI::ExistingFile);
  render->add_option("-o,--out", png_file, "PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*render) {
    const TensorPack pack = read_pack(map_file);
    const Tensor& t = require(pack, "map");
    if (t.shape.size() != 2) throw ParseError(ParseErrc::ShapeMismatch, "score map must be 2-D");
    render_heatmap(ScoreMap(t.shape[0], t.shape[1], t.values), png_file);
    return 0;
  }

  const PipelineConfig cfg = load(c);
  if (*gen) {
    write_dataset(generate_synthetic_dataset(cfg.synth, cfg.data_seed), out_dir);
    std::cout << "dataset " << out_dir << '\n';
    return 0;
  }
  if (*run) {
    const auto inputs = load_inputs_tagged(cfg);
    ArtifactStore store = open_store(c, cfg);
    print_eval(run_on_inputs(inputs, cfg, store));
    return 0;
  }

  const auto inputs = load_inputs_tagged(cfg);
  ArtifactStore store = open_store(c, cfg);
  if (*s1) {
    write_config(store, cfg);
    step_stage1(inputs, cfg, store);
  } else if (*s2) {
    step_stage2(inputs, cfg, store, load_stage1(inputs, cfg, store.read_json("stage1.json")));
  } else {
    const auto kept = kept_from(inputs, store.read_json("stage2.json"));
    if (*uff) {
      auto patches = kept_train_patches(inputs, kept, cfg.align);
      TrainReport rep;
      step_train_uff(inputs, patches, cfg, store, &rep);
      std::cout << "held-out InfoNCE " << rep.initial_heldout_loss << " -> " << rep.final_heldout_loss << '\n';
    } else if (*banks) {
      auto patches = kept_train_patches(inputs, kept, cfg.align);
      step_build_banks(inputs, patches, head_from_pack(store.read("head/uff.mmnr")), cfg, store);
    } else if (*infer) {
      std::vector<DecisionModel> models;
      for (const auto& ci : inputs) models.push_back(load_model(store, ci.name));
      step_infer(inputs, head_from_pack(store.read("head/uff.mmnr")), models, cfg, store);
    } else if (*eval) {
      std::vector<ClassScores> scores;
      for (const auto& ci : inputs) scores.push_back(load_scores(store, ci.name));
      print_eval(step_eval(inputs, kept, scores, cfg, store));
    }
  }
  store.flush();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed document: " << e.what() << '\n';
    return exit_code(ErrorKind::Data);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(ErrorKind::Data);
  }
}
