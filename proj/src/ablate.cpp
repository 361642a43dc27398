#include "duet/ablate.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "duet/errors.hpp"

namespace duet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json parse_object(const std::string& text, const std::string& path) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  return j;
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }
}

void leaf_paths(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string p = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object() && !it->empty()) {
      leaf_paths(*it, p, out);
    } else {
      out.push_back(p);
    }
  }
}

bool covered(const std::string& leaf, const std::vector<std::string>& fields) {
  if (leaf == "distillation.enabled") return true;  // every axis needs its baseline
  for (const auto& f : fields) {
    if (leaf == f || leaf.rfind(f + ".", 0) == 0) return true;
  }
  return false;
}

// Re-roots a config error under `prefix`.
ConfigError rebase(const ConfigError& e, const std::string& prefix) {
  const std::string what = e.what();
  const std::size_t skip = e.field().size() + 2;
  return ConfigError(prefix + "." + e.field(), what.size() > skip ? what.substr(skip) : what);
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

TrainConfig parse_stage(json j, const char* stage, std::uint64_t seed, const std::string& where) {
  if (j.contains("stage") && j["stage"] != stage) {
    throw ConfigError(where + ".stage", std::string("must be ") + stage + " here");
  }
  j["stage"] = stage;
  j["seed"] = seed;
  try {
    return parse_train_config(j.dump());
  } catch (const ConfigError& e) {
    throw rebase(e, where);
  }
}

std::string csv_number(const std::optional<double>& v, const char* fmt) {
  if (!v) return "NA";
  char buf[32];
  // same half-away-from-zero rounding as the report
  const double x = std::string(fmt) == "%.2f" ? std::round(*v * 100.0) / 100.0 : *v;
  std::snprintf(buf, sizeof buf, fmt, x);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, p);
}

json metrics_to_json(const std::optional<EncoderMetrics>& m) {
  if (!m) return nullptr;
  return {{"TR", m->tr.r1}, {"IR", m->ir.r1}};
}

std::optional<EncoderMetrics> metrics_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  EncoderMetrics m;
  m.tr.r1 = j.at("TR").get<double>();
  m.ir.r1 = j.at("IR").get<double>();
  return m;
}

struct RunRecord {
  std::string key;
  std::optional<EncoderMetrics> dual, cross;
  double extra_fwd_pairs = 0;
  double wall_clock = 0;
  bool diverged = false;
  std::string error;
};

class RunCache {
 public:
  RunCache(fs::path out, const AblationOptions& options) : out_(std::move(out)), options_(options) {
    fs::create_directories(out_ / "runs");
  }

  static std::string key_of(const TrainConfig& cfg, const std::string& init_key) {
    return hex16(fnv1a64(train_config_json(cfg) + "\ninit:" + init_key));
  }
  static std::string rel_dir(const std::string& key) { return "runs/" + key; }
  fs::path checkpoint(const std::string& key) const {
    return out_ / rel_dir(key) / "checkpoint.duet";
  }

  // `keyed` names the run; `cfg` is what actually trains (absolute paths).
  RunRecord run(const TrainConfig& keyed, const TrainConfig& cfg, const std::string& init_key,
                const std::string& label) {
    RunRecord rec;
    rec.key = key_of(keyed, init_key);
    const fs::path dir = out_ / rel_dir(rec.key);
    const fs::path done = dir / "result.json";
    if (options_.reuse && fs::exists(done)) {
      const json j = json::parse(slurp(done));
      rec.dual = metrics_from_json(j.at("dual"));
      rec.cross = metrics_from_json(j.at("cross"));
      rec.extra_fwd_pairs = j.at("extra_fwd_pairs").get<double>();
      rec.wall_clock = j.at("wall_clock").get<double>();
      rec.diverged = j.at("diverged").get<bool>();
      rec.error = j.at("error").get<std::string>();
      log(label + ": reusing " + rel_dir(rec.key));
      return rec;
    }
    log(label + ": training into " + rel_dir(rec.key));
    fs::create_directories(dir);
    write_file(dir / "config.json", train_config_json(keyed));
    TrainOptions topt;
    topt.init_checkpoint = init_key.empty() ? "" : checkpoint(init_key).string();
    topt.out_dir = dir.string();
    topt.threads = options_.threads;
    topt.log = [&](const std::string& line) { log("  " + line); };
    TrainResult r = train(cfg, training_corpus(cfg), evaluation_corpus(cfg), topt);
    rec.dual = r.report.dual;
    rec.cross = r.report.cross;
    rec.extra_fwd_pairs = r.extra_fwd_pairs(cfg.batch_size);
    rec.wall_clock = r.report.wall_clock;
    rec.diverged = r.diverged;
    rec.error = r.error;
    const json j = {{"dual", metrics_to_json(rec.dual)},
                    {"cross", metrics_to_json(rec.cross)},
                    {"extra_fwd_pairs", rec.extra_fwd_pairs},
                    {"wall_clock", rec.wall_clock},
                    {"diverged", rec.diverged},
                    {"error", rec.error},
                    {"steps", r.steps}};
    write_file(done, j.dump(2) + "\n");
    return rec;
  }

 private:
  void log(const std::string& s) const {
    if (options_.log) options_.log(s);
  }

  fs::path out_;
  const AblationOptions& options_;
};

}  // namespace

ArmPlan plan_arm(const AblationGrid& grid, std::size_t a, std::uint64_t seed,
                 const std::string& teacher_checkpoint) {
  if (a >= grid.arms.size()) throw std::out_of_range("plan_arm: no arm " + std::to_string(a));
  const GridArm& arm = grid.arms[a];
  const std::string where = "arms[" + std::to_string(a) + "]";
  ArmPlan plan;
  json base = parse_object(grid.base, "base");
  if (!arm.set.empty()) base.merge_patch(parse_object(arm.set, where + ".set"));
  if (!arm.teacher_from.empty()) base["distillation"]["teacher_checkpoint"] = teacher_checkpoint;
  if (grid.staged()) {
    json pre = parse_object(grid.pretrain, "pretrain");
    if (!arm.pretrain_set.empty()) {
      pre.merge_patch(parse_object(arm.pretrain_set, where + ".pretrain_set"));
    }
    plan.pretrain = parse_stage(pre, "pretrain", seed, where);
    plan.finetune = parse_stage(base, "finetune", seed, where);
  } else {
    json j = base;
    j["seed"] = seed;
    try {
      plan.finetune = parse_train_config(j.dump());
    } catch (const ConfigError& e) {
      throw rebase(e, where);
    }
  }
  return plan;
}

AblationGrid parse_grid(const std::string& text) {
  const json j = parse_object(text, "<root>");
  check_keys(j, "", {"axis", "description", "fields", "seeds", "base", "pretrain", "arms"});
  AblationGrid g;

  if (!j.contains("axis") || !j["axis"].is_string() || j["axis"].get<std::string>().empty()) {
    throw ConfigError("axis", "expected a non-empty string");
  }
  g.axis = j["axis"].get<std::string>();
  if (!j.contains("fields") || !j["fields"].is_array() || j["fields"].empty()) {
    throw ConfigError("fields", "expected a non-empty array of dotted field paths");
  }
  for (const auto& f : j["fields"]) {
    if (!f.is_string()) throw ConfigError("fields", "expected strings");
    g.fields.push_back(f.get<std::string>());
  }
  if (!j.contains("seeds") || !j["seeds"].is_array() || j["seeds"].empty()) {
    throw ConfigError("seeds", "expected a non-empty array");
  }
  std::set<std::uint64_t> seen_seeds;
  for (const auto& s : j["seeds"]) {
    if (!s.is_number_integer() || s.get<long long>() < 0) {
      throw ConfigError("seeds", "expected non-negative integers");
    }
    if (!seen_seeds.insert(s.get<std::uint64_t>()).second) {
      throw ConfigError("seeds", "duplicate seed " + s.dump());
    }
    g.seeds.push_back(s.get<std::uint64_t>());
  }
  if (!j.contains("base") || !j["base"].is_object()) throw ConfigError("base", "expected an object");
  g.base = j["base"].dump();
  if (j.contains("pretrain")) {
    if (!j["pretrain"].is_object()) throw ConfigError("pretrain", "expected an object");
    g.pretrain = j["pretrain"].dump();
  }

  if (!j.contains("arms") || !j["arms"].is_array() || j["arms"].empty()) {
    throw ConfigError("arms", "expected a non-empty array");
  }
  std::map<std::string, std::size_t> names;
  for (std::size_t a = 0; a < j["arms"].size(); ++a) {
    const json& aj = j["arms"][a];
    const std::string where = "arms[" + std::to_string(a) + "]";
    if (!aj.is_object()) throw ConfigError(where, "expected an object");
    check_keys(aj, where, {"name", "description", "set", "pretrain_set", "teacher_from"});
    GridArm arm;
    if (!aj.contains("name") || !aj["name"].is_string() || aj["name"].get<std::string>().empty()) {
      throw ConfigError(where + ".name", "expected a non-empty string");
    }
    arm.name = aj["name"].get<std::string>();
    if (arm.name.find_first_of(",\"\n\r") != std::string::npos) {
      throw ConfigError(where + ".name", "must not contain commas, quotes or newlines");
    }
    if (!names.emplace(arm.name, a).second) {
      throw ConfigError(where + ".name", "duplicate arm '" + arm.name + "'");
    }
    for (const char* key : {"set", "pretrain_set"}) {
      if (!aj.contains(key)) continue;
      const json& patch = aj[key];
      if (!patch.is_object()) throw ConfigError(where + "." + key, "expected an object");
      if (std::string(key) == "pretrain_set" && !g.staged()) {
        throw ConfigError(where + ".pretrain_set", "the grid has no pretrain stage");
      }
      std::vector<std::string> leaves;
      leaf_paths(patch, "", leaves);
      for (const auto& leaf : leaves) {
        if (!covered(leaf, g.fields)) {
          throw ConfigError(where + "." + key + "." + leaf, "outside the grid axis '" + g.axis + "'");
        }
      }
      (std::string(key) == "set" ? arm.set : arm.pretrain_set) = patch.dump();
    }
    if (aj.contains("teacher_from")) {
      if (!aj["teacher_from"].is_string()) {
        throw ConfigError(where + ".teacher_from", "expected an arm name");
      }
      arm.teacher_from = aj["teacher_from"].get<std::string>();
      if (!names.count(arm.teacher_from) || names[arm.teacher_from] == a) {
        throw ConfigError(where + ".teacher_from", "must name an earlier arm");
      }
    }
    g.arms.push_back(std::move(arm));
  }

  bool baseline = false;
  for (std::size_t a = 0; a < g.arms.size(); ++a) {
    const ArmPlan plan = plan_arm(g, a, g.seeds.front());
    if (!g.arms[a].teacher_from.empty() &&
        plan.finetune.distillation.teacher != TeacherMode::kOffline) {
      throw ConfigError("arms[" + std::to_string(a) + "].teacher_from",
                        "needs distillation.teacher = offline");
    }
    if (!plan.finetune.distillation.enabled &&
        (!plan.pretrain || !plan.pretrain->distillation.enabled)) {
      baseline = true;
    }
  }
  if (!baseline) throw ConfigError("arms", "needs a no-distillation baseline arm");
  return g;
}

AblationGrid load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot read grid " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_grid(ss.str());
}

std::vector<AblationRow> run_ablation(const AblationGrid& grid, const std::string& out_dir,
                                      const AblationOptions& options) {
  RunCache cache(out_dir, options);
  const std::size_t arms = grid.arms.size(), seeds = grid.seeds.size();
  std::vector<AblationRow> rows(arms * seeds);
  std::map<std::string, std::size_t> index;
  for (std::size_t a = 0; a < arms; ++a) index[grid.arms[a].name] = a;

  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = grid.seeds[s];
    std::vector<std::string> finetune_key(arms);
    for (std::size_t a = 0; a < arms; ++a) {
      AblationRow& row = rows[a * seeds + s];
      row.axis = grid.axis;
      row.arm = grid.arms[a].name;
      row.seed = seed;
      const std::string label =
          grid.axis + "/" + row.arm + " seed " + std::to_string(seed);
      try {
        std::string rel_teacher = "<arm>", abs_teacher = "<arm>";
        if (!grid.arms[a].teacher_from.empty()) {
          const std::string& tk = finetune_key[index.at(grid.arms[a].teacher_from)];
          if (tk.empty()) throw std::runtime_error("teacher arm '" + grid.arms[a].teacher_from + "' failed");
          rel_teacher = RunCache::rel_dir(tk) + "/checkpoint.duet";
          abs_teacher = cache.checkpoint(tk).string();
        }
        const ArmPlan keyed = plan_arm(grid, a, seed, rel_teacher);
        const ArmPlan plan = plan_arm(grid, a, seed, abs_teacher);
        std::string init_key;
        if (plan.pretrain) {
          RunRecord pre = cache.run(*keyed.pretrain, *plan.pretrain, "", label + " pretrain");
          if (pre.diverged) throw std::runtime_error("pretrain diverged: " + pre.error);
          init_key = pre.key;
        }
        RunRecord rec = cache.run(keyed.finetune, plan.finetune, init_key, label);
        row.run_dir = RunCache::rel_dir(rec.key);
        row.dual = rec.dual;
        row.cross = rec.cross;
        row.extra_fwd_pairs = rec.extra_fwd_pairs;
        row.wall_clock = rec.wall_clock;
        row.diverged = rec.diverged;
        row.error = rec.error;
        if (!rec.diverged) finetune_key[a] = rec.key;
      } catch (const std::exception& e) {
        row.error = e.what();
        if (options.log) options.log(label + ": failed: " + row.error);
      }
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out =
      "axis,arm,seed,dual_TR@1,dual_IR@1,cross_TR@1,cross_IR@1,extra_fwd_pairs,wall_clock\n";
  for (const auto& r : rows) {
    auto r1 = [](const std::optional<EncoderMetrics>& m, bool tr) -> std::optional<double> {
      if (!m) return std::nullopt;
      return tr ? m->tr.r1 : m->ir.r1;
    };
    const bool ok = r.error.empty() && !r.diverged;
    out += r.axis + "," + r.arm + "," + std::to_string(r.seed) + ",";
    out += csv_number(r1(r.dual, true), "%.2f") + "," + csv_number(r1(r.dual, false), "%.2f") + ",";
    out += csv_number(r1(r.cross, true), "%.2f") + "," + csv_number(r1(r.cross, false), "%.2f") + ",";
    out += csv_number(ok ? std::optional<double>(r.extra_fwd_pairs) : std::nullopt, "%.4g") + ",";
    out += csv_number(r.error.empty() || r.diverged ? std::optional<double>(r.wall_clock)
                                                    : std::nullopt,
                      "%.2f");
    out += "\n";
  }
  return out;
}

}  // namespace duet
