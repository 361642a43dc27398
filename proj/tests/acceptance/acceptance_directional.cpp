// Directional checks of the ablation orderings on the desk corpus. Grids come
// from fixtures/grids; runs are cached in the output directory, so a second
// invocation only re-reads reports.
//
//   acceptance_directional [grids_dir] [out_dir]
//
// An ordering holds when it holds on the seed mean and on at least 4 of the
// 5 seeds. Exit status is the number of failed criteria.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "duet/ablate.hpp"
#include "duet/parallel.hpp"

using namespace duet;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kMinSeedWins = 4;

struct ArmScores {
  std::vector<double> dual, cross;  // per seed, (TR@1 + IR@1) / 2; NaN when missing
  double max_wall = 0;
};

using AxisScores = std::map<std::string, ArmScores>;

double mean_r1(const std::optional<EncoderMetrics>& m) {
  return m ? (m->tr.r1 + m->ir.r1) / 2.0 : std::nan("");
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / double(v.size());
}

AxisScores run_axis(const fs::path& grids, const fs::path& out, const std::string& axis) {
  const AblationGrid grid = load_grid((grids / (axis + ".json")).string());
  AblationOptions opt;
  opt.threads = thread_cap();
  opt.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
  AxisScores scores;
  for (const auto& row : run_ablation(grid, out.string(), opt)) {
    auto& a = scores[row.arm];
    a.dual.push_back(mean_r1(row.dual));
    a.cross.push_back(mean_r1(row.cross));
    a.max_wall = std::max(a.max_wall, row.wall_clock);
    if (!row.error.empty()) {
      std::fprintf(stderr, "%s/%s seed %llu failed: %s\n", axis.c_str(), row.arm.c_str(),
                   static_cast<unsigned long long>(row.seed), row.error.c_str());
    }
  }
  return scores;
}

struct Ordering {
  std::string label;
  double hi_mean = 0, lo_mean = 0;
  std::size_t wins = 0, seeds = 0;
  bool holds = false;
};

// hi > lo (strict) or hi >= lo (weak), per seed and on the mean.
Ordering compare(const std::string& label, const std::vector<double>& hi,
                 const std::vector<double>& lo, bool weak) {
  Ordering o{label, mean(hi), mean(lo), 0, std::min(hi.size(), lo.size()), false};
  auto beats = [&](double a, double b) { return weak ? a >= b : a > b; };
  for (std::size_t s = 0; s < o.seeds; ++s) o.wins += beats(hi[s], lo[s]);
  o.holds = o.seeds > 0 && beats(o.hi_mean, o.lo_mean) && o.wins >= kMinSeedWins;
  return o;
}

int failures = 0;

void report(int id, const std::string& name, const std::vector<Ordering>& parts) {
  bool ok = !parts.empty();
  std::string detail;
  for (const auto& p : parts) {
    ok = ok && p.holds;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s%s %.2f vs %.2f (%zu/%zu seeds)", detail.empty() ? "" : "; ",
                  p.label.c_str(), p.hi_mean, p.lo_mean, p.wins, p.seeds);
    detail += buf;
  }
  std::printf("%s  %2d  %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path grids = argc > 1 ? argv[1] : DUET_GRIDS;
  const fs::path out = argc > 2 ? argv[2] : "acceptance_runs";

  try {
    const auto m = run_axis(grids, out, "m");
    report(10, "distillation helps the dual encoder (dual R@1)",
           {compare("m=4 hard > none", m.at("4").dual, m.at("none").dual, false)});

    const auto sampling = run_axis(grids, out, "sampling");
    report(11, "hard > random distillation negatives (dual R@1)",
           {compare("hard > random", sampling.at("hard").dual, sampling.at("random").dual, false)});

    const auto stages = run_axis(grids, out, "stages");
    const auto& both = stages.at("both").dual;
    const auto& pre = stages.at("pretrain").dual;
    const auto& fine = stages.at("finetune").dual;
    const auto& none = stages.at("none").dual;
    report(12, "both stages >= single stage >= none (dual R@1)",
           {compare("both >= pretrain-only", both, pre, true),
            compare("both >= finetune-only", both, fine, true),
            compare("pretrain-only >= none", pre, none, true),
            compare("finetune-only >= none", fine, none, true)});

    const auto comp = run_axis(grids, out, "components");
    report(13, "joint training beats solo training",
           {compare("dual R@1 joint > no cross", comp.at("joint").dual, comp.at("no_cross").dual,
                    false),
            compare("cross R@1 joint > no ITC", comp.at("joint").cross, comp.at("no_dual").cross,
                    false)});
    report(14, "hard ITM negatives > random (cross R@1)",
           {compare("hard > random", comp.at("joint").cross, comp.at("itm_random").cross, false)});

    const auto stop = run_axis(grids, out, "stopgrad");
    report(15, "stop-grad protects the cross encoder (cross R@1)",
           {compare("with >= without", stop.at("with").cross, stop.at("without").cross, true)});

    double wall = 0;
    for (const auto* axis : {&m, &sampling, &stages, &comp, &stop}) {
      for (const auto& [arm, s] : *axis) wall = std::max(wall, s.max_wall);
    }
    std::printf("info    slowest arm stage %.1f s\n", wall);
  } catch (const std::exception& e) {
    std::printf("FAIL  --  directional suite aborted: %s\n", e.what());
    return 1 + failures;
  }
  std::printf("%d criteria failed\n", failures);
  return failures;
}
