#pragma once

// Two-stage training loop: configuration schema, schedules, AdamW, the
// per-step graph builder and the epoch loop with checkpoint and report output.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/corpus.hpp"
#include "duet/eval.hpp"
#include "duet/model.hpp"
#include "duet/negatives.hpp"
#include "duet/objectives.hpp"
#include "duet/teacher.hpp"

namespace duet {

enum class Stage { kPretrain, kFinetune };
enum class NegativeType { kImage, kText, kBoth };

const char* to_string(Stage s);
const char* to_string(NegativeType t);

struct DistillConfig {
  bool enabled = true;
  std::size_t m = 4;
  NegativeType negative_type = NegativeType::kBoth;
  SamplingMethod sampling = SamplingMethod::kHard;
  bool stop_grad = true;
  TeacherMode teacher = TeacherMode::kOnline;
  double momentum = 0.995;
  std::size_t copy_period = 10;
  std::string teacher_checkpoint;
  bool reuse_m1 = true;  // reuse ITM-pass scores for teacher pairs already scored

  bool uses(Direction d) const {
    if (!enabled) return false;
    if (negative_type == NegativeType::kBoth) return true;
    return (d == Direction::kText) == (negative_type == NegativeType::kText);
  }
  TeacherConfig teacher_config() const {
    return {teacher, momentum, copy_period, teacher_checkpoint};
  }
};

struct ComponentSwitches {
  bool use_cross = true;  // ITM
  bool use_dual = true;   // ITC
  bool use_mlm = true;
  SamplingMethod itm_negative_method = SamplingMethod::kHard;
};

// Corpus geometry shared by the training and evaluation splits. A non-empty
// `file` replaces the generated training split.
struct CorpusSpec {
  std::size_t num_classes = 32;
  std::size_t image_vocab = 64;
  std::size_t text_vocab = 64;
  std::size_t image_tokens = 16;
  std::size_t text_tokens = 8;
  double noise = 0.15;
  std::uint64_t seed = 0;
  std::size_t train_pairs_per_class = 0;  // 0: 64 for pretrain, 16 for finetune
  std::size_t eval_pairs_per_class = 8;
  std::string file;

  CorpusConfig corpus_config(std::size_t pairs_per_class) const;
};

struct EvalSpec {
  Split split = Split::kTest;
  EvalMode cross_mode{EvalMode::kRerank, 16};
};

// Architecture knobs; vocabularies and lengths follow the corpus.
struct ModelSpec {
  std::size_t width = 64;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t image_depth = 2;
  std::size_t text_depth = 2;
  std::size_t cross_depth = 2;
  std::size_t mlp_ratio = 4;
};

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double min_lr = 1e-5;
  std::size_t warmup_iters = 100;
  double weight_decay = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;
  double mlm_mask_rate = 0.15;
  DistillConfig distillation;
  ComponentSwitches components;
  std::uint64_t seed = 0;
  ModelSpec model;
  CorpusSpec corpus;
  EvalSpec eval;

  // Throws ConfigError with the dotted path of the first bad field.
  void validate() const;
  ModelConfig model_config() const;
};

// Missing fields take stage defaults (finetune: 10 epochs, no MLM); unknown
// fields and wrong types are rejected with ConfigError.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
// Canonical form: every field, sorted keys.
std::string train_config_json(const TrainConfig& cfg);
std::uint64_t fnv1a64(std::string_view bytes);
std::string config_digest(const TrainConfig& cfg);  // 16 hex digits

// ---- schedules and optimizer ---------------------------------------------

// Linear 0 -> base over `warmup` steps, then cosine to min at the final step.
// Throws std::out_of_range unless 0 <= step < total.
double lr_schedule(long step, long total, double base, double min, long warmup);
inline double lr_schedule(long step, long total, const TrainConfig& cfg) {
  return lr_schedule(step, total, cfg.base_lr, cfg.min_lr, static_cast<long>(cfg.warmup_iters));
}

// min(1, epoch fraction).
double distill_weight(double epoch_fraction);

template <class T>
struct NamedParam {
  std::string name;
  ad::Tensor<T>* tensor = nullptr;
  bool decay = true;
};

// Every parameter; matrices decay, vectors and the temperature do not.
template <class T>
std::vector<NamedParam<T>> trainable_parameters(Model<T>& model);

// Global L2 norm of all present gradients, rescaled to at most `max_norm`
// (<= 0 disables). Throws DivergenceError naming the first non-finite grad.
template <class T>
double clip_grad_norm(std::span<NamedParam<T>> params, double max_norm, long step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

// Decoupled decay p -= lr * wd * p, then the bias-corrected Adam update.
// Tensors without a gradient this step are skipped (moments untouched).
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  void step(std::span<NamedParam<T>> params, double lr);
  long steps() const { return t_; }

 private:
  AdamWConfig config_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// ---- one training step ----------------------------------------------------

struct StepCounts {
  std::size_t itm_pairs = 0;            // cross forwards for L_itm
  std::size_t distill_extra_pairs = 0;  // live cross forwards added by distillation
  std::size_t shadow_pairs = 0;         // cross forwards on a shadow teacher
  std::size_t mlm_pairs = 0;            // cross forwards on masked text
  std::size_t distill_directions = 0;

  StepCounts& operator+=(const StepCounts& o);
};

template <class T>
struct StepGraph {
  std::unique_ptr<ad::Graph<T>> graph;
  LossTerms<T> terms;
  ad::Var<T> sim, tau;
  ad::Var<T> itm_logits;  // [3n, 2]: positives, text negatives, image negatives
  ItmNegatives negatives;
  std::vector<DistillPair<T>> distill;
  std::vector<ad::Var<T>> teacher_hpos;  // per distill entry, [n * (m + 1)]
  StepCounts counts;
};

// Builds the full loss graph for one batch. Randomness (masking, random
// negatives) is keyed by (cfg.seed, step).
template <class T>
StepGraph<T> build_step(Model<T>& model, TeacherState<T>& teacher, const TrainConfig& cfg,
                        const PairedCorpus& corpus, std::span<const std::size_t> batch,
                        long step);

// ---- full run --------------------------------------------------------------

struct EpochLosses {
  std::size_t epoch = 0;
  double itc = 0, itm = 0, mlm = 0, distill_txt = 0, distill_img = 0, total = 0;
};

struct RecallTriple {
  double r1 = 0, r5 = 0, r10 = 0;
};

struct EncoderMetrics {
  RecallTriple tr, ir;
};

struct RunReport {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<EpochLosses> epoch_losses;
  std::optional<EncoderMetrics> dual, cross;
  double wall_clock = 0;   // seconds
  std::string checkpoint;  // relative to the output directory; empty if none
};

// Metrics rounded to 2 decimals. wall_clock is optional so determinism
// comparisons can drop it.
std::string report_json(const RunReport& report, bool include_wall_clock = true);

struct TrainOptions {
  std::string init_checkpoint;
  std::string out_dir;  // empty: write nothing
  std::size_t threads = 1;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  RunReport report;
  Model<float> model;
  StepCounts counts;
  long steps = 0;
  bool diverged = false;
  std::string error;

  // Mean live teacher forwards per distillation direction per positive.
  double extra_fwd_pairs(std::size_t batch_size) const;
};

// Trains on `train_corpus` and evaluates on `eval_corpus`. Writes
// checkpoint.duet and report.json into out_dir when set. A non-finite loss
// or gradient stops training; the partial report is kept and diverged set.
TrainResult train(const TrainConfig& cfg, const PairedCorpus& train_corpus,
                  const PairedCorpus& eval_corpus, const TrainOptions& options);

// Corpora named by cfg.corpus for the configured stage and eval split.
PairedCorpus training_corpus(const TrainConfig& cfg);
PairedCorpus evaluation_corpus(const TrainConfig& cfg);

EncoderMetrics to_metrics(const EvalResult& r);

}  // namespace duet
