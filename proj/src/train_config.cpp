#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "duet/errors.hpp"
#include "duet/trainer.hpp"

namespace duet {

using nlohmann::json;

namespace {

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Reads fields out of one JSON object and rejects leftovers.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) bad(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) bad(key, "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::uint64_t& out, int) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) bad(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) bad(key, "expected a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) bad(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  template <class Parse>
  void read_enum(const char* key, Parse&& parse) {
    if (const json* v = take(key)) {
      if (!v->is_string()) bad(key, "expected a string");
      try {
        parse(v->get<std::string>());
      } catch (const ConfigError& e) {
        bad(key, e.what());
      } catch (const std::exception& e) {
        bad(key, e.what());
      }
    }
  }
  const json* object(const char* key) { return take(key); }
  bool has(const char* key) const { return j_.contains(key); }
  std::string path(const char* key) const { return join(path_, key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(join(path_, it.key()), "unknown field");
    }
  }

 private:
  const json* take(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void bad(const char* key, const std::string& what) const {
    throw ConfigError(join(path_, key), what);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "finetune") return Stage::kFinetune;
  throw ConfigError("stage", "expected pretrain or finetune, got '" + s + "'");
}

NegativeType negative_type_from_string(const std::string& s) {
  if (s == "image") return NegativeType::kImage;
  if (s == "text") return NegativeType::kText;
  if (s == "both") return NegativeType::kBoth;
  throw ConfigError("negative_type", "expected image, text or both, got '" + s + "'");
}

SamplingMethod sampling_from_string(const std::string& s) {
  if (s == "hard") return SamplingMethod::kHard;
  if (s == "random") return SamplingMethod::kRandom;
  throw ConfigError("sampling", "expected hard or random, got '" + s + "'");
}

void read_distill(const json& j, const std::string& path, DistillConfig& d) {
  ObjectReader r(j, path);
  r.read("enabled", d.enabled);
  r.read("m", d.m);
  r.read_enum("negative_type", [&](const std::string& s) { d.negative_type = negative_type_from_string(s); });
  r.read_enum("sampling", [&](const std::string& s) { d.sampling = sampling_from_string(s); });
  r.read("stop_grad", d.stop_grad);
  r.read_enum("teacher", [&](const std::string& s) { d.teacher = teacher_mode_from_string(s); });
  r.read("momentum", d.momentum);
  r.read("copy_period", d.copy_period);
  r.read("teacher_checkpoint", d.teacher_checkpoint);
  r.read("reuse_m1", d.reuse_m1);
  r.finish();
}

void read_components(const json& j, const std::string& path, ComponentSwitches& c) {
  ObjectReader r(j, path);
  r.read("use_cross", c.use_cross);
  r.read("use_dual", c.use_dual);
  r.read("use_mlm", c.use_mlm);
  r.read_enum("itm_negative_method",
              [&](const std::string& s) { c.itm_negative_method = sampling_from_string(s); });
  r.finish();
}

void read_model(const json& j, const std::string& path, ModelSpec& m) {
  ObjectReader r(j, path);
  r.read("width", m.width);
  r.read("embed_dim", m.embed_dim);
  r.read("heads", m.heads);
  r.read("image_depth", m.image_depth);
  r.read("text_depth", m.text_depth);
  r.read("cross_depth", m.cross_depth);
  r.read("mlp_ratio", m.mlp_ratio);
  r.finish();
}

void read_corpus(const json& j, const std::string& path, CorpusSpec& c) {
  ObjectReader r(j, path);
  r.read("num_classes", c.num_classes);
  r.read("image_vocab", c.image_vocab);
  r.read("text_vocab", c.text_vocab);
  r.read("image_tokens", c.image_tokens);
  r.read("text_tokens", c.text_tokens);
  r.read("noise", c.noise);
  r.read("seed", c.seed, 0);
  r.read("train_pairs_per_class", c.train_pairs_per_class);
  r.read("eval_pairs_per_class", c.eval_pairs_per_class);
  r.read("file", c.file);
  r.finish();
}

void read_eval(const json& j, const std::string& path, EvalSpec& e) {
  ObjectReader r(j, path);
  r.read_enum("split", [&](const std::string& s) { e.split = split_from_string(s); });
  r.read_enum("cross_mode", [&](const std::string& s) {
    e.cross_mode = EvalMode::parse(s);
    if (e.cross_mode.kind == EvalMode::kDual) {
      throw ConfigError("cross_mode", "must be rerank:K or cross");
    }
  });
  r.finish();
}

}  // namespace

const char* to_string(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }

const char* to_string(NegativeType t) {
  switch (t) {
    case NegativeType::kImage:
      return "image";
    case NegativeType::kText:
      return "text";
    case NegativeType::kBoth:
      return "both";
  }
  return "?";
}

CorpusConfig CorpusSpec::corpus_config(std::size_t pairs_per_class) const {
  CorpusConfig c;
  c.num_classes = num_classes;
  c.pairs_per_class = pairs_per_class;
  c.image_vocab = image_vocab;
  c.text_vocab = text_vocab;
  c.image_tokens = image_tokens;
  c.text_tokens = text_tokens;
  c.noise = noise;
  c.seed = seed;
  return c;
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.width = model.width;
  m.embed_dim = model.embed_dim;
  m.heads = model.heads;
  m.image_depth = model.image_depth;
  m.text_depth = model.text_depth;
  m.cross_depth = model.cross_depth;
  m.mlp_ratio = model.mlp_ratio;
  return fit_model_config(m, corpus.corpus_config(1));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs", "must be at least 1");
  if (batch_size < 2) throw ConfigError("batch_size", "must be at least 2");
  if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("base_lr", "must be positive");
  if (!(min_lr >= 0) || !std::isfinite(min_lr)) throw ConfigError("min_lr", "must be non-negative");
  if (min_lr > base_lr) throw ConfigError("min_lr", "exceeds base_lr");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps", "must be positive");
  if (!(grad_clip >= 0)) throw ConfigError("grad_clip", "must be non-negative (0 disables)");
  if (!(mlm_mask_rate >= 0 && mlm_mask_rate <= 1)) {
    throw ConfigError("mlm_mask_rate", "must lie in [0, 1]");
  }
  if (!components.use_cross && !components.use_dual) {
    throw ConfigError("components", "at least one of use_cross and use_dual must be true");
  }
  const auto& d = distillation;
  if (d.enabled) {
    if (d.m < 1) throw ConfigError("distillation.m", "must be at least 1");
    if (d.m >= batch_size) throw ConfigError("distillation.m", "must be below batch_size");
    if (!components.use_cross) {
      throw ConfigError("distillation.enabled", "the teacher needs components.use_cross");
    }
    if (!components.use_dual) {
      throw ConfigError("distillation.enabled", "the student needs components.use_dual");
    }
    d.teacher_config().validate();
  }
  model_config().validate();
  corpus.corpus_config(2).validate();
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  TrainConfig c;
  ObjectReader r(j, "");
  r.read_enum("stage", [&](const std::string& s) { c.stage = stage_from_string(s); });
  if (c.stage == Stage::kFinetune) {
    c.epochs = 10;
    c.components.use_mlm = false;
  }
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("base_lr", c.base_lr);
  r.read("min_lr", c.min_lr);
  r.read("warmup_iters", c.warmup_iters);
  r.read("weight_decay", c.weight_decay);
  r.read("adam_beta1", c.adam_beta1);
  r.read("adam_beta2", c.adam_beta2);
  r.read("adam_eps", c.adam_eps);
  r.read("grad_clip", c.grad_clip);
  r.read("mlm_mask_rate", c.mlm_mask_rate);
  r.read("seed", c.seed, 0);
  if (const json* v = r.object("distillation")) read_distill(*v, "distillation", c.distillation);
  if (const json* v = r.object("components")) read_components(*v, "components", c.components);
  if (const json* v = r.object("model")) read_model(*v, "model", c.model);
  if (const json* v = r.object("corpus")) read_corpus(*v, "corpus", c.corpus);
  if (const json* v = r.object("eval")) read_eval(*v, "eval", c.eval);
  r.finish();
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string train_config_json(const TrainConfig& c) {
  const auto& d = c.distillation;
  const auto& k = c.components;
  json j = {
      {"stage", to_string(c.stage)},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"base_lr", c.base_lr},
      {"min_lr", c.min_lr},
      {"warmup_iters", c.warmup_iters},
      {"weight_decay", c.weight_decay},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_eps", c.adam_eps},
      {"grad_clip", c.grad_clip},
      {"mlm_mask_rate", c.mlm_mask_rate},
      {"seed", c.seed},
      {"distillation",
       {{"enabled", d.enabled},
        {"m", d.m},
        {"negative_type", to_string(d.negative_type)},
        {"sampling", to_string(d.sampling)},
        {"stop_grad", d.stop_grad},
        {"teacher", to_string(d.teacher)},
        {"momentum", d.momentum},
        {"copy_period", d.copy_period},
        {"teacher_checkpoint", d.teacher_checkpoint},
        {"reuse_m1", d.reuse_m1}}},
      {"components",
       {{"use_cross", k.use_cross},
        {"use_dual", k.use_dual},
        {"use_mlm", k.use_mlm},
        {"itm_negative_method", to_string(k.itm_negative_method)}}},
      {"model",
       {{"width", c.model.width},
        {"embed_dim", c.model.embed_dim},
        {"heads", c.model.heads},
        {"image_depth", c.model.image_depth},
        {"text_depth", c.model.text_depth},
        {"cross_depth", c.model.cross_depth},
        {"mlp_ratio", c.model.mlp_ratio}}},
      {"corpus",
       {{"num_classes", c.corpus.num_classes},
        {"image_vocab", c.corpus.image_vocab},
        {"text_vocab", c.corpus.text_vocab},
        {"image_tokens", c.corpus.image_tokens},
        {"text_tokens", c.corpus.text_tokens},
        {"noise", c.corpus.noise},
        {"seed", c.corpus.seed},
        {"train_pairs_per_class", c.corpus.train_pairs_per_class},
        {"eval_pairs_per_class", c.corpus.eval_pairs_per_class},
        {"file", c.corpus.file}}},
      {"eval", {{"split", to_string(c.eval.split)}, {"cross_mode", c.eval.cross_mode.str()}}},
  };
  return j.dump();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string config_digest(const TrainConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(train_config_json(cfg))));
  return buf;
}

}  // namespace duet
