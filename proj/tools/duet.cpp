// duet: train, ablate, evaluate and export corpora.
//
// Exit codes: 0 success, 2 config/schema or checkpoint mismatch, 3 numeric
// divergence, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "duet/ablate.hpp"
#include "duet/checkpoint.hpp"
#include "duet/errors.hpp"
#include "duet/parallel.hpp"
#include "duet/trainer.hpp"

using namespace duet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

void log_line(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

json recall_json(const RetrievalResult& r) {
  auto r2 = [](double x) { return std::round(x * 100.0) / 100.0; };
  return {{"R@1", r2(r.r1)}, {"R@5", r2(r.r5)}, {"R@10", r2(r.r10)}};
}

json eval_json(const EvalResult& r) {
  return {{"mode", r.mode.str()},
          {"TR", recall_json(r.tr)},
          {"IR", recall_json(r.ir)},
          {"cross_pairs", r.cross_pairs},
          {"cross_pairs_scored", r.cross_pairs_scored},
          {"timing_ms",
           {{"embed", r.timing.embed_ms}, {"score", r.timing.score_ms}, {"rerank", r.timing.rerank_ms}}}};
}

// A corpus file, or "<split>[:<seed>]" for a generated desk split.
PairedCorpus corpus_arg(const std::string& arg) {
  if (fs::exists(arg)) return import_corpus(arg);
  const auto colon = arg.find(':');
  const Split split = split_from_string(arg.substr(0, colon));
  std::uint64_t seed = 0;
  if (colon != std::string::npos) {
    try {
      seed = std::stoull(arg.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("corpus", "bad seed in '" + arg + "'");
    }
  }
  return generate_corpus(desk_corpus_config(split, seed), split);
}

Model<float> model_for(const std::string& checkpoint, const PairedCorpus& corpus) {
  Model<float> model = load_model(checkpoint);
  if (!(fit_model_config(model.config, corpus.config) == model.config)) {
    throw CheckpointError(checkpoint + ": model does not fit the corpus vocabularies or lengths");
  }
  return model;
}

int cmd_train(const std::string& config, const std::optional<std::uint64_t>& seed,
              const std::string& init, const std::string& out) {
  TrainConfig cfg = load_train_config(config);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  TrainOptions opt;
  opt.init_checkpoint = init;
  opt.out_dir = out;
  opt.threads = thread_cap();
  opt.log = log_line;
  TrainResult r = train(cfg, training_corpus(cfg), evaluation_corpus(cfg), opt);
  std::cout << report_json(r.report);
  if (r.diverged) {
    log_line("error: " + r.error);
    return kExitDivergence;
  }
  return 0;
}

int cmd_ablate(const std::string& grid_path, const std::string& out, bool fresh) {
  const AblationGrid grid = load_grid(grid_path);
  AblationOptions opt;
  opt.threads = thread_cap();
  opt.reuse = !fresh;
  opt.log = log_line;
  const auto rows = run_ablation(grid, out, opt);
  const std::string csv = ablation_csv(rows);
  const fs::path path = fs::path(out) / (grid.axis + ".csv");
  std::ofstream f(path, std::ios::binary);
  f << csv;
  if (!f) throw std::runtime_error("cannot write " + path.string());
  std::cout << csv;
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.error.empty();
  if (failed) log_line(std::to_string(failed) + " arm run(s) failed; see NA rows");
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_name,
             const std::vector<std::string>& modes, bool bench) {
  const PairedCorpus corpus = corpus_arg(corpus_name);
  Model<float> model = model_for(checkpoint, corpus);
  std::vector<EvalMode> parsed;
  for (const auto& m : modes) parsed.push_back(EvalMode::parse(m));
  json out = json::array();
  if (bench) {
    for (const auto& r : timing_benchmark(model, corpus, parsed, thread_cap())) {
      out.push_back(eval_json(r));
    }
  } else {
    for (const auto& m : parsed) out.push_back(eval_json(evaluate(model, corpus, m, thread_cap())));
  }
  std::cout << (out.size() == 1 ? out[0] : out).dump(2) << "\n";
  return 0;
}

int cmd_export(const std::string& split_name, std::uint64_t seed, std::size_t ppc,
               const std::string& out) {
  const Split split = split_from_string(split_name);
  CorpusConfig cfg = desk_corpus_config(split, seed);
  if (ppc > 0) cfg.pairs_per_class = ppc;
  export_corpus(generate_corpus(cfg, split), out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"duet: joint dual/cross encoder retrieval training"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train one run from a JSON config");
  std::string config, init, out = "out";
  std::optional<std::uint64_t> seed;
  train->add_option("config", config, "TrainConfig JSON file")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_option("--init-checkpoint", init, "checkpoint to start from (finetune)");
  train->add_option("--out", out, "output directory")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid and write <axis>.csv");
  std::string grid;
  bool fresh = false;
  ablate->add_option("grid", grid, "grid JSON file")->required();
  ablate->add_option("--out", out, "output directory")->capture_default_str();
  ablate->add_flag("--fresh", fresh, "retrain runs already present under <out>/runs");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string checkpoint, corpus = "test";
  std::vector<std::string> modes{"dual"};
  bool bench = false;
  eval->add_option("checkpoint", checkpoint, "DUET checkpoint")->required();
  eval->add_option("corpus", corpus, "corpus file or <split>[:<seed>]")->capture_default_str();
  eval->add_option("--mode", modes, "dual | rerank:K | cross (repeatable)")->capture_default_str();
  eval->add_flag("--bench", bench, "warm pass first, then timed pass per mode");

  auto* corpus_cmd = app.add_subcommand("corpus", "corpus utilities");
  corpus_cmd->require_subcommand(1);
  auto* exp = corpus_cmd->add_subcommand("export", "write a generated split as TSV");
  std::string split = "train", file;
  std::uint64_t corpus_seed = 0;
  std::size_t ppc = 0;
  exp->add_option("--split", split, "pretrain | train | val | test")->capture_default_str();
  exp->add_option("--seed", corpus_seed, "corpus seed")->capture_default_str();
  exp->add_option("--pairs-per-class", ppc, "0 keeps the split default");
  exp->add_option("--out", file, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(config, seed, init, out);
    if (*ablate) return cmd_ablate(grid, out, fresh);
    if (*eval) return cmd_eval(checkpoint, corpus, modes, bench);
    if (*exp) return cmd_export(split, corpus_seed, ppc, file);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
