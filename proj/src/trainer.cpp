#include "duet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "duet/checkpoint.hpp"
#include "duet/errors.hpp"

namespace duet {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

constexpr std::uint64_t kStepStream = 0x57E9;

// Step graphs allocate and free the same large buffers every iteration. Keep
// them on the heap instead of fresh mmap pages each time.
void keep_buffers_on_heap() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
  }();
  (void)once;
#endif
}

std::size_t row_of(Direction dir, std::size_t n, std::size_t anchor) {
  return (dir == Direction::kText ? n : 2 * n) + anchor;
}

}  // namespace

// ---- schedules -------------------------------------------------------------

double lr_schedule(long step, long total, double base, double min, long warmup) {
  if (step < 0 || step >= total) {
    throw std::out_of_range("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total) + ")");
  }
  if (step < warmup) return base * double(step) / double(warmup);
  const long span = total - 1 - warmup;
  const double t = span <= 0 ? 1.0 : double(step - warmup) / double(span);
  return min + (base - min) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

double distill_weight(double epoch_fraction) {
  if (!(epoch_fraction >= 0)) throw std::out_of_range("distill_weight: negative fraction");
  return std::min(1.0, epoch_fraction);
}

// ---- optimizer -------------------------------------------------------------

template <class T>
std::vector<NamedParam<T>> trainable_parameters(Model<T>& model) {
  std::vector<NamedParam<T>> out;
  for_each_parameter(model, std::function<void(const std::string&, Tensor<T>&)>(
                                [&](const std::string& name, Tensor<T>& t) {
                                  const bool decay = t.shape.size() >= 2 && name != "temperature";
                                  out.push_back({name, &t, decay});
                                }));
  return out;
}

template <class T>
double clip_grad_norm(std::span<NamedParam<T>> params, double max_norm, long step) {
  double sq = 0;
  for (auto& p : params) {
    for (T g : p.tensor->grad) {
      if (!std::isfinite(double(g))) throw DivergenceError("gradient of " + p.name, step);
      sq += double(g) * double(g);
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (T& g : p.tensor->grad) g *= factor;
    }
  }
  return norm;
}

template <class T>
void AdamW<T>::step(std::span<NamedParam<T>> params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  if (m_.size() != params.size()) throw std::logic_error("AdamW: parameter list changed");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].tensor;
    if (!p.has_grad()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(p.size(), T(0));
      v.assign(p.size(), T(0));
    }
    const double decay = params[i].decay ? lr * config_.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = double(p.grad[k]);
      double w = double(p.values[k]);
      w -= decay * w;
      const double mk = b1 * double(m[k]) + (1.0 - b1) * g;
      const double vk = b2 * double(v[k]) + (1.0 - b2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      w -= lr * (mk / c1) / (std::sqrt(vk / c2) + config_.eps);
      p.values[k] = static_cast<T>(w);
    }
  }
}

// ---- step ------------------------------------------------------------------

StepCounts& StepCounts::operator+=(const StepCounts& o) {
  itm_pairs += o.itm_pairs;
  distill_extra_pairs += o.distill_extra_pairs;
  shadow_pairs += o.shadow_pairs;
  mlm_pairs += o.mlm_pairs;
  distill_directions += o.distill_directions;
  return *this;
}

template <class T>
StepGraph<T> build_step(Model<T>& model, TeacherState<T>& teacher, const TrainConfig& cfg,
                        const PairedCorpus& corpus, std::span<const std::size_t> batch,
                        long step) {
  const ModelConfig& mc = model.config;
  const auto& sw = cfg.components;
  const auto& dc = cfg.distillation;
  const std::size_t n = batch.size();
  StepGraph<T> s;
  s.graph = std::make_unique<Graph<T>>();
  Graph<T>& g = *s.graph;
  Rng rng = make_rng(cfg.seed, kStepStream, static_cast<std::uint64_t>(step));

  const TokenBatch images = image_batch(corpus, batch, mc);
  const TokenBatch texts = text_batch(corpus, batch, mc);

  TokenBatch masked;
  std::vector<int> targets;
  if (sw.use_mlm) {
    masked = texts;
    targets.assign(n * mc.text_len, -1);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 1; j < mc.text_len; ++j) {
        if (uniform01(rng) < cfg.mlm_mask_rate) {
          const std::size_t at = r * mc.text_len + j;
          targets[at] = masked.ids[at];
          masked.ids[at] = mc.text_mask();
        }
      }
    }
  }

  Var<T> fi = encode_image(g, model, images);
  Var<T> ft = encode_text(g, model, texts);
  s.tau = g.parameter(model.temperature);
  Var<T> zi = pool_project(fi, model.dual.image_proj);
  Var<T> zt = pool_project(ft, model.dual.text_proj);
  s.sim = ad::matmul_nt(zi, zt);
  const std::vector<T> sim(s.sim.values().begin(), s.sim.values().end());
  if (sw.use_dual) s.terms.itc = itc_loss(s.sim, s.tau);

  if (sw.use_cross) {
    s.negatives = itm_negatives(std::span<const T>(sim), n, sw.itm_negative_method, rng);
    std::vector<PairIndex> pairs(3 * n);
    for (std::size_t i = 0; i < n; ++i) {
      pairs[i] = {i, i};
      pairs[n + i] = {i, s.negatives.text[i]};
      pairs[2 * n + i] = {s.negatives.image[i], i};
    }
    s.itm_logits = cross_encode_pairs(g, model, fi, ft, pairs).itm_logits;
    s.terms.itm = itm_loss(ad::slice_rows(s.itm_logits, 0, n),
                           ad::slice_rows(s.itm_logits, n, 2 * n),
                           ad::slice_rows(s.itm_logits, 2 * n, 3 * n));
    s.counts.itm_pairs = 3 * n;
  }

  if (sw.use_mlm) {
    Var<T> ftm = encode_text(g, model, masked);
    Var<T> seq = ftm;
    if (sw.use_cross) {
      seq = cross_encode(g, model, fi, ftm).sequence;
      s.counts.mlm_pairs = n;
    }
    s.terms.mlm = mlm_loss(mlm_logits(g, model, seq), targets);
  }

  for (Direction dir : {Direction::kText, Direction::kImage}) {
    if (!dc.uses(dir)) continue;
    auto sets = build_distill_sets(std::span<const T>(sim), n, dc.m, dir, dc.sampling, rng);
    const std::size_t slots = dc.m + 1;
    Var<T> hpos;
    if (teacher.has_shadow()) {
      std::vector<PairIndex> pairs;
      pairs.reserve(n * slots);
      for (const auto& set : sets) {
        for (std::size_t k = 0; k < slots; ++k) pairs.push_back(set.pair(k));
      }
      auto h = shadow_scores(teacher, images, texts, pairs);
      const ad::Shape shape{h.size()};
      hpos = g.constant(shape, std::move(h));
      s.counts.shadow_pairs += pairs.size();
    } else {
      // Rows of [itm_logits; extra logits] holding each slot's h_pos.
      std::vector<std::size_t> rows;
      std::vector<PairIndex> extra;
      rows.reserve(n * slots);
      for (const auto& set : sets) {
        const std::size_t i = set.anchor;
        const std::size_t itm_neg =
            dir == Direction::kText ? s.negatives.text[i] : s.negatives.image[i];
        for (std::size_t k = 0; k < slots; ++k) {
          if (k == 0) {
            rows.push_back(i);
          } else if (dc.reuse_m1 && set.members[k] == itm_neg) {
            rows.push_back(row_of(dir, n, i));
          } else {
            rows.push_back(3 * n + extra.size());
            extra.push_back(set.pair(k));
          }
        }
      }
      Var<T> all = s.itm_logits;
      if (!extra.empty()) {
        Var<T> more = cross_encode_pairs(g, model, fi, ft, extra).itm_logits;
        const Var<T> parts[] = {s.itm_logits, more};
        all = ad::concat_rows(std::span<const Var<T>>(parts));
        s.counts.distill_extra_pairs += extra.size();
      }
      for (auto& r : rows) r *= 2;
      hpos = ad::pick(all, std::span<const std::size_t>(rows));
    }
    auto pair = make_distill_pair(s.sim, s.tau, std::move(sets), hpos, dc.stop_grad);
    (dir == Direction::kText ? s.terms.distill_txt : s.terms.distill_img) = distill_loss(pair);
    s.distill.push_back(std::move(pair));
    s.teacher_hpos.push_back(hpos);
    ++s.counts.distill_directions;
  }
  return s;
}

// ---- run -------------------------------------------------------------------

double TrainResult::extra_fwd_pairs(std::size_t batch_size) const {
  if (counts.distill_directions == 0 || batch_size == 0) return 0.0;
  return double(counts.distill_extra_pairs) /
         (double(counts.distill_directions) * double(batch_size));
}

EncoderMetrics to_metrics(const EvalResult& r) {
  return {{r.tr.r1, r.tr.r5, r.tr.r10}, {r.ir.r1, r.ir.r5, r.ir.r10}};
}

namespace {

double round2(double x) { return std::round(x * 100.0) / 100.0; }

nlohmann::json metrics_json(const EncoderMetrics& m) {
  auto triple = [](const RecallTriple& t) {
    return nlohmann::json{{"R@1", round2(t.r1)}, {"R@5", round2(t.r5)}, {"R@10", round2(t.r10)}};
  };
  return {{"TR", triple(m.tr)}, {"IR", triple(m.ir)}};
}

}  // namespace

std::string report_json(const RunReport& r, bool include_wall_clock) {
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& e : r.epoch_losses) {
    losses.push_back({{"epoch", e.epoch},
                      {"itc", e.itc},
                      {"itm", e.itm},
                      {"mlm", e.mlm},
                      {"distill_txt", e.distill_txt},
                      {"distill_img", e.distill_img},
                      {"total", e.total}});
  }
  nlohmann::json metrics = nlohmann::json::object();
  if (r.dual) metrics["dual"] = metrics_json(*r.dual);
  if (r.cross) metrics["cross"] = metrics_json(*r.cross);
  nlohmann::json j = {{"config_digest", r.config_digest},
                      {"seed", r.seed},
                      {"epoch_losses", losses},
                      {"metrics", metrics},
                      {"checkpoint", r.checkpoint}};
  if (include_wall_clock) j["wall_clock"] = r.wall_clock;
  return j.dump(2) + "\n";
}

PairedCorpus training_corpus(const TrainConfig& cfg) {
  if (!cfg.corpus.file.empty()) return import_corpus(cfg.corpus.file);
  std::size_t ppc = cfg.corpus.train_pairs_per_class;
  const Split split = cfg.stage == Stage::kPretrain ? Split::kPretrain : Split::kTrain;
  if (ppc == 0) ppc = desk_corpus_config(split, cfg.corpus.seed).pairs_per_class;
  return generate_corpus(cfg.corpus.corpus_config(ppc), split);
}

PairedCorpus evaluation_corpus(const TrainConfig& cfg) {
  return generate_corpus(cfg.corpus.corpus_config(cfg.corpus.eval_pairs_per_class),
                         cfg.eval.split);
}

TrainResult train(const TrainConfig& cfg, const PairedCorpus& corpus,
                  const PairedCorpus& eval_corpus, const TrainOptions& options) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  cfg.validate();
  keep_buffers_on_heap();
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };

  ModelConfig base = cfg.model_config();
  const ModelConfig mc = fit_model_config(base, corpus.config);
  if (!(fit_model_config(base, eval_corpus.config) == mc)) {
    throw ConfigError("eval", "evaluation corpus does not fit the training model");
  }
  if (cfg.stage == Stage::kFinetune && options.init_checkpoint.empty()) {
    throw ConfigError("init_checkpoint", "the finetune stage needs an initial checkpoint");
  }
  const std::size_t per_epoch = corpus.size() / cfg.batch_size;
  if (per_epoch == 0) throw ConfigError("batch_size", "exceeds the training corpus");

  TrainResult result{RunReport{}, Model<float>{}, StepCounts{}, 0, false, ""};
  RunReport& report = result.report;
  report.config_digest = config_digest(cfg);
  report.seed = cfg.seed;

  Model<float>& model = result.model;
  if (options.init_checkpoint.empty()) {
    model = Model<float>::init(mc, cfg.seed);
  } else {
    model = load_model(options.init_checkpoint);
    if (!(model.config == mc)) {
      throw CheckpointError(options.init_checkpoint + ": architecture differs from the config");
    }
  }
  TeacherState<float> teacher =
      make_teacher(cfg.distillation.enabled ? cfg.distillation.teacher_config() : TeacherConfig{},
                   model);
  auto params = trainable_parameters(model);
  AdamW<float> opt({cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay});

  const long total = static_cast<long>(per_epoch * cfg.epochs);
  long step = 0;
  try {
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      const auto batches = make_batches(corpus.size(), cfg.batch_size, cfg.seed, epoch);
      EpochLosses acc;
      acc.epoch = epoch;
      std::size_t done = 0;
      try {
        for (const auto& batch : batches) {
          const double lambda = distill_weight(double(step) / double(per_epoch));
          model.zero_grad();
          std::optional<StepGraph<float>> built;
          std::optional<LossBundle<float>> losses;
          try {
            built.emplace(build_step(model, teacher, cfg, corpus, batch, step));
            losses.emplace(total_loss(*built->graph, built->terms, lambda, step));
          } catch (const NumericDomainError& e) {
            // parameters already blown up; the forward pass cannot proceed
            throw DivergenceError(std::string("forward (") + e.what() + ")", step);
          }
          auto& sg = *built;
          auto& bundle = *losses;
          sg.graph->backward(bundle.total);
          clip_grad_norm(std::span<NamedParam<float>>(params), cfg.grad_clip, step);
          opt.step(params, lr_schedule(step, total, cfg));
          float& tau = model.temperature.values[0];
          tau = std::clamp(tau, float(kMinTemperature), float(kMaxTemperature));
          result.counts += sg.counts;
          ++step;
          update_teacher(teacher, model, step);
          acc.itc += bundle.itc;
          acc.itm += bundle.itm;
          acc.mlm += bundle.mlm;
          acc.distill_txt += bundle.distill_txt;
          acc.distill_img += bundle.distill_img;
          acc.total += bundle.total_value;
          ++done;
        }
      } catch (const DivergenceError&) {
        if (done > 0) {
          for (double* v : {&acc.itc, &acc.itm, &acc.mlm, &acc.distill_txt, &acc.distill_img,
                            &acc.total}) {
            *v /= double(done);
          }
          report.epoch_losses.push_back(acc);
        }
        throw;
      }
      for (double* v :
           {&acc.itc, &acc.itm, &acc.mlm, &acc.distill_txt, &acc.distill_img, &acc.total}) {
        *v /= double(done);
      }
      report.epoch_losses.push_back(acc);
      char line[160];
      std::snprintf(line, sizeof line, "epoch %zu/%zu  total %.4f  itc %.4f  itm %.4f  tau %.4f",
                    epoch + 1, cfg.epochs, acc.total, acc.itc, acc.itm,
                    double(model.temperature.values[0]));
      log(line);
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.error = e.what();
    log(std::string("diverged: ") + e.what());
  }
  result.steps = step;
  model.zero_grad();

  if (!result.diverged) {
    const std::size_t threads = std::max<std::size_t>(1, options.threads);
    report.dual = to_metrics(evaluate(model, eval_corpus, EvalMode{}, threads));
    if (cfg.components.use_cross) {
      report.cross = to_metrics(evaluate(model, eval_corpus, cfg.eval.cross_mode, threads));
    }
  }
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    if (!result.diverged) {
      report.checkpoint = "checkpoint.duet";
      save_model((std::filesystem::path(options.out_dir) / report.checkpoint).string(), model);
    }
  }
  report.wall_clock = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!options.out_dir.empty()) {
    std::ofstream out(std::filesystem::path(options.out_dir) / "report.json", std::ios::binary);
    out << report_json(report);
    if (!out) throw std::runtime_error("cannot write report.json in " + options.out_dir);
  }
  return result;
}

#define DUET_INSTANTIATE(T)                                                                 \
  template std::vector<NamedParam<T>> trainable_parameters(Model<T>&);                         \
  template double clip_grad_norm(std::span<NamedParam<T>>, double, long);                      \
  template class AdamW<T>;                                                                     \
  template StepGraph<T> build_step(Model<T>&, TeacherState<T>&, const TrainConfig&,            \
                                   const PairedCorpus&, std::span<const std::size_t>, long);

DUET_INSTANTIATE(float)
DUET_INSTANTIATE(double)
#undef DUET_INSTANTIATE

}  // namespace duet
