#pragma once

// Ablation grids: one axis, a shared base config, arms that override fields of
// that axis, and a seed list. With a "pretrain" section every arm fine-tunes
// from a pretrain run; identical pretrain configs are trained once and shared.
//
// Runs are cached under <out>/runs/<key>, where the key hashes the canonical
// config and the key of the initial checkpoint, so grids written to the same
// output directory share work.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "duet/trainer.hpp"

namespace duet {

struct GridArm {
  std::string name;
  std::string set;           // JSON merge patch over the base config
  std::string pretrain_set;  // JSON merge patch over the pretrain config
  std::string teacher_from;  // earlier arm whose checkpoint is the offline teacher
};

struct AblationGrid {
  std::string axis;
  std::vector<std::string> fields;  // dotted paths arms may change
  std::vector<std::uint64_t> seeds;
  std::string base;      // JSON object
  std::string pretrain;  // JSON object; empty for single-stage grids
  std::vector<GridArm> arms;

  bool staged() const { return !pretrain.empty(); }
};

// Validates structure, field coverage, arm configs and the presence of a
// no-distillation baseline. Errors are ConfigError with paths such as
// "arms[2].set.distillation.m".
AblationGrid parse_grid(const std::string& json_text);
AblationGrid load_grid(const std::string& path);

struct ArmPlan {
  std::optional<TrainConfig> pretrain;
  TrainConfig finetune;  // the only stage of unstaged grids
};

// Effective configs for one arm and seed. An offline teacher taken from
// another arm gets `teacher_checkpoint` as a placeholder.
ArmPlan plan_arm(const AblationGrid& grid, std::size_t arm, std::uint64_t seed,
                 const std::string& teacher_checkpoint = "<arm>");

struct AblationRow {
  std::string axis, arm;
  std::uint64_t seed = 0;
  std::optional<EncoderMetrics> dual, cross;
  double extra_fwd_pairs = 0;
  double wall_clock = 0;  // seconds for the arm's own stage
  bool diverged = false;
  std::string error;      // empty on success
  std::string run_dir;    // relative to the output directory
};

struct AblationOptions {
  std::size_t threads = 1;
  bool reuse = true;  // pick up finished runs from <out>/runs
  std::function<void(const std::string&)> log;
};

// Runs every arm x seed. Failing arms are recorded and the grid continues.
// Rows come back ordered by (arm, seed) as listed in the grid.
std::vector<AblationRow> run_ablation(const AblationGrid& grid, const std::string& out_dir,
                                      const AblationOptions& options);

// Columns: axis, arm, seed, dual_TR@1, dual_IR@1, cross_TR@1, cross_IR@1,
// extra_fwd_pairs, wall_clock. Missing values are written as NA.
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace duet
