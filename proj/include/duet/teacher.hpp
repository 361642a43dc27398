#pragma once

// Where distillation targets come from. The online teacher is the live model
// itself; momentum and periodic teachers keep a full shadow copy (both towers
// and the cross encoder) that follows the live weights; the offline teacher is
// a frozen model loaded from a checkpoint. Shadow weights never take part in
// backward: their scores enter the training graph as constants.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/checkpoint.hpp"
#include "duet/errors.hpp"
#include "duet/model.hpp"

namespace duet {

enum class TeacherMode { kOnline, kMomentum, kPeriodic, kOffline };

const char* to_string(TeacherMode m);
TeacherMode teacher_mode_from_string(const std::string& s);  // throws ConfigError

struct TeacherConfig {
  TeacherMode mode = TeacherMode::kOnline;
  double momentum = 0.995;
  std::size_t copy_period = 10;
  std::string checkpoint;  // offline only

  void validate() const;
  bool operator==(const TeacherConfig&) const = default;
};

template <class T>
struct TeacherState {
  TeacherConfig config;
  std::optional<Model<T>> shadow;  // empty in online mode

  bool has_shadow() const { return shadow.has_value(); }
  std::size_t shadow_parameter_count() const { return shadow ? shadow->parameter_count() : 0; }
};

namespace detail {

template <class T>
void freeze(Model<T>& m) {
  for_each_parameter(m, std::function<void(const std::string&, ad::Tensor<T>&)>(
                            [](const std::string&, ad::Tensor<T>& t) {
                              t.requires_grad = false;
                              t.zero_grad();
                            }));
}

template <class T>
std::vector<ad::Tensor<T>*> tensors(Model<T>& m) {
  std::vector<ad::Tensor<T>*> out;
  for_each_parameter(m, std::function<void(const std::string&, ad::Tensor<T>&)>(
                            [&](const std::string&, ad::Tensor<T>& t) { out.push_back(&t); }));
  return out;
}

template <class T>
std::vector<const ad::Tensor<T>*> tensors(const Model<T>& m) {
  std::vector<const ad::Tensor<T>*> out;
  for_each_parameter(m, std::function<void(const std::string&, const ad::Tensor<T>&)>(
                            [&](const std::string&, const ad::Tensor<T>& t) {
                              out.push_back(&t);
                            }));
  return out;
}

}  // namespace detail

// Momentum and periodic shadows start as a copy of `live`. Offline mode loads
// config.checkpoint, which must describe the same architecture.
template <class T>
TeacherState<T> make_teacher(const TeacherConfig& config, const Model<T>& live) {
  config.validate();
  TeacherState<T> state{config, std::nullopt};
  switch (config.mode) {
    case TeacherMode::kOnline:
      break;
    case TeacherMode::kMomentum:
    case TeacherMode::kPeriodic:
      state.shadow = cast_model<T>(live);
      break;
    case TeacherMode::kOffline: {
      Model<float> loaded = load_model(config.checkpoint);
      if (!(loaded.config == live.config)) {
        throw CheckpointError(config.checkpoint +
                              ": teacher architecture differs from the student");
      }
      state.shadow = cast_model<T>(loaded);
      break;
    }
  }
  if (state.shadow) detail::freeze(*state.shadow);
  return state;
}

// Call once after each optimizer step; `step` counts completed steps.
template <class T>
void update_teacher(TeacherState<T>& state, const Model<T>& live, long step) {
  if (!state.shadow) return;
  const auto& cfg = state.config;
  if (cfg.mode == TeacherMode::kOffline) return;
  auto dst = detail::tensors(*state.shadow);
  auto src = detail::tensors(live);
  if (cfg.mode == TeacherMode::kPeriodic) {
    if (step % static_cast<long>(cfg.copy_period) != 0) return;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->values = src[i]->values;
    return;
  }
  const T mu = static_cast<T>(cfg.momentum);
  const T keep = static_cast<T>(1.0 - cfg.momentum);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto& d = dst[i]->values;
    const auto& s = src[i]->values;
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = mu * d[k] + keep * s[k];
  }
}

// h_pos for each pair under the shadow model, as plain values. `images` and
// `texts` are the batch's token sequences.
template <class T>
std::vector<T> shadow_scores(TeacherState<T>& state, const TokenBatch& images,
                             const TokenBatch& texts, std::span<const PairIndex> pairs) {
  if (!state.shadow) throw std::logic_error("online teacher has no shadow model");
  ad::Graph<T> g(false);
  auto& m = *state.shadow;
  auto fi = encode_image(g, m, images);
  auto ft = encode_text(g, m, texts);
  auto logits = cross_encode_pairs(g, m, fi, ft, pairs).itm_logits.values();
  std::vector<T> h(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) h[p] = logits[2 * p];
  return h;
}

}  // namespace duet
