#pragma once

// Dual encoder (image tower, text tower, CLS projections) and the cross
// encoder stacked on top of it. The text stream is the cross encoder's query;
// image sequences enter every cross-attention layer as key and value.
//
// All layers are pre-LN transformer blocks. A zero-depth tower is the bare
// token + position embedding.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/rng.hpp"

namespace duet {

struct ModelConfig {
  std::size_t image_vocab = 64;  // content tokens; [CLS] is appended
  std::size_t text_vocab = 64;   // content tokens; [CLS], [MASK] are appended
  std::size_t width = 64;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t image_depth = 2;
  std::size_t text_depth = 2;
  std::size_t cross_depth = 2;
  std::size_t image_len = 17;  // including [CLS]
  std::size_t text_len = 9;    // including [CLS]
  std::size_t mlp_ratio = 4;

  std::int32_t image_cls() const { return static_cast<std::int32_t>(image_vocab); }
  std::int32_t text_cls() const { return static_cast<std::int32_t>(text_vocab); }
  std::int32_t text_mask() const { return static_cast<std::int32_t>(text_vocab + 1); }
  std::size_t image_table_size() const { return image_vocab + 1; }
  std::size_t text_table_size() const { return text_vocab + 2; }

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct Linear {
  ad::Tensor<T> weight;  // [in, out]
  ad::Tensor<T> bias;    // [out]
};

template <class T>
struct LayerNormParams {
  ad::Tensor<T> gamma;
  ad::Tensor<T> beta;
};

template <class T>
struct AttentionParams {
  Linear<T> query, key, value, out;
};

template <class T>
struct EncoderLayerParams {
  LayerNormParams<T> ln_attn;
  AttentionParams<T> attn;
  LayerNormParams<T> ln_ffn;
  Linear<T> fc1, fc2;
};

template <class T>
struct CrossLayerParams {
  LayerNormParams<T> ln_self;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln_cross;   // on the text query stream
  LayerNormParams<T> ln_memory;  // on the image key/value sequence
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln_ffn;
  Linear<T> fc1, fc2;
};

template <class T>
struct TowerParams {
  ad::Tensor<T> token_embed;  // [table, width]
  ad::Tensor<T> pos_embed;    // [len, width]
  std::vector<EncoderLayerParams<T>> layers;
};

template <class T>
struct DualEncoderParams {
  TowerParams<T> image;
  TowerParams<T> text;
  Linear<T> image_proj;  // width -> embed_dim
  Linear<T> text_proj;
};

template <class T>
struct CrossEncoderParams {
  std::vector<CrossLayerParams<T>> layers;
  Linear<T> itm_head;  // width -> 2, logits [h_pos, h_neg]
  Linear<T> mlm_head;  // width -> text_vocab
};

inline constexpr double kInitTemperature = 0.07;
inline constexpr double kMinTemperature = 0.005;
inline constexpr double kMaxTemperature = 0.5;

template <class T>
struct Model {
  ModelConfig config;
  DualEncoderParams<T> dual;
  CrossEncoderParams<T> cross;
  ad::Tensor<T> temperature;  // [1], shared by contrastive and distillation softmaxes

  // Truncated normal (sigma 0.02) weights, zero biases, unit LayerNorm gains.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  std::size_t parameter_count() const;
  std::size_t cross_parameter_count() const;
  void zero_grad();
};

// Fixed-order enumeration of every parameter with a stable dotted name.
template <class T>
void for_each_parameter(Model<T>& model,
                        const std::function<void(const std::string&, ad::Tensor<T>&)>& fn);
template <class T>
void for_each_parameter(const Model<T>& model,
                        const std::function<void(const std::string&, const ad::Tensor<T>&)>& fn);
template <class T>
void for_each_cross_parameter(Model<T>& model,
                              const std::function<void(const std::string&, ad::Tensor<T>&)>& fn);

template <class To, class From>
Model<To> cast_model(const Model<From>& src);

// Analytic parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

// ---- forward passes -------------------------------------------------------

// Row-major token ids, [rows, len].
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;
};

struct PairIndex {
  std::size_t image = 0;
  std::size_t text = 0;
  bool operator==(const PairIndex&) const = default;
};

// [n, image_len, width]. Rejects ids outside the image table.
template <class T>
ad::Var<T> encode_image(ad::Graph<T>& g, Model<T>& model, const TokenBatch& tokens);
// [n, text_len, width]. Rejects ids outside the text table.
template <class T>
ad::Var<T> encode_text(ad::Graph<T>& g, Model<T>& model, const TokenBatch& tokens);

// L2-normalized projection of the sequence's position-0 ([CLS]) vector.
template <class T>
ad::Var<T> pool_project(ad::Var<T> seq, Linear<T>& head);

template <class T>
struct CrossOutput {
  ad::Var<T> itm_logits;  // [pairs, 2]
  ad::Var<T> sequence;    // [pairs, text_len, width]
};

// Scores pairs (image_seq[p.image], text_seq[p.text]).
template <class T>
CrossOutput<T> cross_encode_pairs(ad::Graph<T>& g, Model<T>& model, ad::Var<T> image_seq,
                                  ad::Var<T> text_seq, std::span<const PairIndex> pairs);
// Scores aligned rows; the two batches must have the same size.
template <class T>
CrossOutput<T> cross_encode(ad::Graph<T>& g, Model<T>& model, ad::Var<T> image_seq,
                            ad::Var<T> text_seq);

// MLM logits [pairs * text_len, text_vocab] from a cross-encoder sequence.
template <class T>
ad::Var<T> mlm_logits(ad::Graph<T>& g, Model<T>& model, ad::Var<T> cross_sequence);

}  // namespace duet
