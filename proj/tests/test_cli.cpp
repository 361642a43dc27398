#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "json.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "duet_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::string& args) {
  const fs::path out = kDir / "stdout.txt", err = kDir / "stderr.txt";
  const std::string cmd = std::string(DUET_CLI) + " " + args + " >" + out.string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string write_config(const std::string& name, json j) {
  const fs::path p = kDir / name;
  std::ofstream(p) << j.dump(2);
  return p.string();
}

json tiny() {
  return json::parse(R"({
    "epochs": 1, "batch_size": 8, "warmup_iters": 1, "base_lr": 1e-3, "min_lr": 1e-4,
    "distillation": {"m": 2},
    "model": {"width": 16, "embed_dim": 8, "heads": 2, "image_depth": 1, "text_depth": 1,
              "cross_depth": 1, "mlp_ratio": 2},
    "corpus": {"num_classes": 4, "image_vocab": 12, "text_vocab": 12, "image_tokens": 6,
               "text_tokens": 4, "train_pairs_per_class": 8, "eval_pairs_per_class": 4},
    "eval": {"cross_mode": "rerank:4"}
  })");
}

struct Setup {
  Setup() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
  }
};
const Setup setup;

}  // namespace

TEST_CASE("train: success, schema errors and determinism") {
  const auto cfg = write_config("tiny.json", tiny());
  auto a = cli("train " + cfg + " --out " + (kDir / "a").string());
  REQUIRE(a.code == 0);
  CHECK(fs::exists(kDir / "a" / "report.json"));
  CHECK(fs::exists(kDir / "a" / "checkpoint.duet"));
  auto report = json::parse(slurp(kDir / "a" / "report.json"));
  CHECK(report["checkpoint"] == "checkpoint.duet");
  CHECK(report["metrics"].contains("cross"));
  CHECK(report["config_digest"].get<std::string>().size() == 16);

  auto b = cli("train " + cfg + " --out " + (kDir / "b").string());
  REQUIRE(b.code == 0);
  auto other = json::parse(slurp(kDir / "b" / "report.json"));
  CHECK(other["metrics"] == report["metrics"]);
  CHECK(other["epoch_losses"] == report["epoch_losses"]);
  CHECK(slurp(kDir / "a" / "checkpoint.duet") == slurp(kDir / "b" / "checkpoint.duet"));

  auto c = cli("train " + cfg + " --seed 9 --out " + (kDir / "c").string());
  CHECK(c.code == 0);
  CHECK(json::parse(slurp(kDir / "c" / "report.json"))["seed"] == 9);

  auto bad = tiny();
  bad["min_lr"] = 1e-2;
  auto r = cli("train " + write_config("bad.json", bad) + " --out " + (kDir / "bad").string());
  CHECK(r.code == 2);
  CHECK(r.err.find("min_lr") != std::string::npos);

  bad = tiny();
  bad["model"]["depth"] = 3;
  r = cli("train " + write_config("bad2.json", bad));
  CHECK(r.code == 2);
  CHECK(r.err.find("model.depth") != std::string::npos);

  r = cli("train " + (kDir / "missing.json").string());
  CHECK(r.code == 2);

  auto ft = tiny();
  ft["stage"] = "finetune";
  const auto ftcfg = write_config("ft.json", ft);
  r = cli("train " + ftcfg);
  CHECK(r.code == 2);
  CHECK(r.err.find("init_checkpoint") != std::string::npos);
  r = cli("train " + ftcfg + " --init-checkpoint " + (kDir / "a" / "checkpoint.duet").string() +
          " --out " + (kDir / "ft").string());
  CHECK(r.code == 0);

  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("train").code == 2);
}

TEST_CASE("train: divergence exits with 3 and keeps a partial report") {
  auto j = tiny();
  j["base_lr"] = 1e30;
  j["min_lr"] = 1e30;
  j["warmup_iters"] = 0;
  j["epochs"] = 3;
  j["grad_clip"] = 0;
  auto r = cli("train " + write_config("div.json", j) + " --out " + (kDir / "div").string());
  CHECK(r.code == 3);
  auto report = json::parse(slurp(kDir / "div" / "report.json"));
  CHECK(report["checkpoint"] == "");
  CHECK(report["metrics"].empty());
  CHECK_FALSE(fs::exists(kDir / "div" / "checkpoint.duet"));
}

TEST_CASE("eval: a checkpoint that does not fit the corpus exits with 2") {
  const auto cfg = write_config("tiny_eval.json", tiny());
  REQUIRE(cli("train " + cfg + " --out " + (kDir / "e").string()).code == 0);
  const std::string ckpt = (kDir / "e" / "checkpoint.duet").string();
  REQUIRE(cli("corpus export --split test --seed 0 --out " + (kDir / "desk_test.tsv").string()).code == 0);
  // the desk corpus vocabulary and lengths differ from the tiny model's
  CHECK(cli("eval " + ckpt + " " + (kDir / "desk_test.tsv").string()).code == 2);
  CHECK(cli("eval " + ckpt + " test --mode dual").code == 2);
  CHECK(cli("eval " + (kDir / "nothing.duet").string() + " test").code == 2);
}

TEST_CASE("eval: rerank identities on a desk-sized checkpoint") {
  auto j = tiny();
  j["corpus"] = json::object();  // desk corpus geometry
  j["corpus"]["train_pairs_per_class"] = 2;
  j["batch_size"] = 32;
  j["epochs"] = 1;
  REQUIRE(cli("train " + write_config("desk.json", j) + " --out " + (kDir / "d").string()).code == 0);
  const std::string ckpt = (kDir / "d" / "checkpoint.duet").string();
  auto run = [&](const std::string& mode) {
    auto r = cli("eval " + ckpt + " test --mode " + mode);
    REQUIRE(r.code == 0);
    auto out = json::parse(r.out);
    return out;
  };
  auto dual = run("dual");
  auto r1 = run("rerank:1");
  auto cross = run("cross");
  auto rn = run("rerank:256");
  CHECK(dual["TR"] == r1["TR"]);
  CHECK(dual["IR"] == r1["IR"]);
  CHECK(cross["TR"] == rn["TR"]);
  CHECK(cross["IR"] == rn["IR"]);
  CHECK(dual["cross_pairs"] == 0);
  CHECK(cross["cross_pairs"] == 256 * 256);
  CHECK(run("rerank:16")["cross_pairs"] == 256 * 16);

  auto both = cli("eval " + ckpt + " test --bench --mode dual --mode rerank:16 --mode cross");
  REQUIRE(both.code == 0);
  auto arr = json::parse(both.out);
  REQUIRE(arr.size() == 3);
  CHECK(arr[2]["mode"] == "cross");

  REQUIRE(cli("corpus export --split test --seed 0 --out " + (kDir / "t.tsv").string()).code == 0);
  auto from_file = json::parse(cli("eval " + ckpt + " " + (kDir / "t.tsv").string()).out);
  CHECK(from_file["TR"] == dual["TR"]);

  CHECK(cli("eval " + ckpt + " test --mode rerank:0").code == 2);
  CHECK(cli("eval " + ckpt + " nosuchsplit").code == 2);
}

TEST_CASE("ablate writes the axis CSV") {
  json g;
  g["axis"] = "stopgrad";
  g["fields"] = {"distillation.stop_grad"};
  g["seeds"] = {0, 1};
  g["base"] = tiny();
  g["arms"] = json::array({{{"name", "none"}, {"set", {{"distillation", {{"enabled", false}}}}}},
                           {{"name", "off"}, {"set", {{"distillation", {{"stop_grad", false}}}}}}});
  const auto path = write_config("grid.json", g);
  auto r = cli("ablate " + path + " --out " + (kDir / "abl").string());
  REQUIRE(r.code == 0);
  const auto csv = slurp(kDir / "abl" / "stopgrad.csv");
  CHECK(csv == r.out);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  g["arms"][1]["set"]["distillation"]["m"] = 3;
  auto bad = cli("ablate " + write_config("grid_bad.json", g) + " --out " + (kDir / "abl").string());
  CHECK(bad.code == 2);
  CHECK(bad.err.find("arms[1].set.distillation.m") != std::string::npos);
}
