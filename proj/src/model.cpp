#include "duet/model.hpp"

#include <cmath>
#include <stdexcept>

#include "duet/errors.hpp"

namespace duet {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* field, const char* what) {
    if (!ok) throw ConfigError(std::string("model.") + field, what);
  };
  need(image_vocab >= 2, "image_vocab", "must be >= 2");
  need(text_vocab >= 2, "text_vocab", "must be >= 2");
  need(width >= 1, "width", "must be >= 1");
  need(embed_dim >= 1, "embed_dim", "must be >= 1");
  need(heads >= 1 && width % heads == 0, "heads", "must divide width");
  need(image_len >= 1, "image_len", "must include [CLS]");
  need(text_len >= 1, "text_len", "must include [CLS]");
  need(mlp_ratio >= 1, "mlp_ratio", "must be >= 1");
}

namespace {

template <class T>
Linear<T> make_linear(std::size_t in, std::size_t out) {
  return {Tensor<T>::zeros({in, out}, true), Tensor<T>::zeros({out}, true)};
}

template <class T>
LayerNormParams<T> make_ln(std::size_t w) {
  return {Tensor<T>::zeros({w}, true), Tensor<T>::zeros({w}, true)};
}

template <class T>
AttentionParams<T> make_attention(std::size_t w) {
  return {make_linear<T>(w, w), make_linear<T>(w, w), make_linear<T>(w, w), make_linear<T>(w, w)};
}

template <class T>
TowerParams<T> make_tower(std::size_t table, std::size_t len, std::size_t depth,
                          const ModelConfig& c) {
  TowerParams<T> t;
  t.token_embed = Tensor<T>::zeros({table, c.width}, true);
  t.pos_embed = Tensor<T>::zeros({len, c.width}, true);
  for (std::size_t i = 0; i < depth; ++i) {
    t.layers.push_back({make_ln<T>(c.width), make_attention<T>(c.width), make_ln<T>(c.width),
                        make_linear<T>(c.width, c.width * c.mlp_ratio),
                        make_linear<T>(c.width * c.mlp_ratio, c.width)});
  }
  return t;
}

template <class T>
Model<T> allocate(const ModelConfig& c) {
  c.validate();
  Model<T> m;
  m.config = c;
  m.dual.image = make_tower<T>(c.image_table_size(), c.image_len, c.image_depth, c);
  m.dual.text = make_tower<T>(c.text_table_size(), c.text_len, c.text_depth, c);
  m.dual.image_proj = make_linear<T>(c.width, c.embed_dim);
  m.dual.text_proj = make_linear<T>(c.width, c.embed_dim);
  for (std::size_t i = 0; i < c.cross_depth; ++i) {
    m.cross.layers.push_back({make_ln<T>(c.width), make_attention<T>(c.width),
                              make_ln<T>(c.width), make_ln<T>(c.width),
                              make_attention<T>(c.width), make_ln<T>(c.width),
                              make_linear<T>(c.width, c.width * c.mlp_ratio),
                              make_linear<T>(c.width * c.mlp_ratio, c.width)});
  }
  m.cross.itm_head = make_linear<T>(c.width, 2);
  m.cross.mlm_head = make_linear<T>(c.width, c.text_vocab);
  m.temperature = Tensor<T>::scalar(static_cast<T>(kInitTemperature), true);
  return m;
}

template <class L, class F>
void visit_linear(const std::string& p, L& l, F& fn) {
  fn(p + ".weight", l.weight);
  fn(p + ".bias", l.bias);
}

template <class N, class F>
void visit_ln(const std::string& p, N& n, F& fn) {
  fn(p + ".gamma", n.gamma);
  fn(p + ".beta", n.beta);
}

template <class A, class F>
void visit_attention(const std::string& p, A& a, F& fn) {
  visit_linear(p + ".query", a.query, fn);
  visit_linear(p + ".key", a.key, fn);
  visit_linear(p + ".value", a.value, fn);
  visit_linear(p + ".out", a.out, fn);
}

template <class Tw, class F>
void visit_tower(const std::string& p, Tw& t, F& fn) {
  fn(p + ".token_embed", t.token_embed);
  fn(p + ".pos_embed", t.pos_embed);
  for (std::size_t i = 0; i < t.layers.size(); ++i) {
    auto& l = t.layers[i];
    const std::string q = p + ".layers." + std::to_string(i);
    visit_ln(q + ".ln_attn", l.ln_attn, fn);
    visit_attention(q + ".attn", l.attn, fn);
    visit_ln(q + ".ln_ffn", l.ln_ffn, fn);
    visit_linear(q + ".fc1", l.fc1, fn);
    visit_linear(q + ".fc2", l.fc2, fn);
  }
}

template <class C, class F>
void visit_cross(C& c, F& fn) {
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    auto& l = c.layers[i];
    const std::string q = "cross.layers." + std::to_string(i);
    visit_ln(q + ".ln_self", l.ln_self, fn);
    visit_attention(q + ".self_attn", l.self_attn, fn);
    visit_ln(q + ".ln_cross", l.ln_cross, fn);
    visit_ln(q + ".ln_memory", l.ln_memory, fn);
    visit_attention(q + ".cross_attn", l.cross_attn, fn);
    visit_ln(q + ".ln_ffn", l.ln_ffn, fn);
    visit_linear(q + ".fc1", l.fc1, fn);
    visit_linear(q + ".fc2", l.fc2, fn);
  }
  visit_linear("cross.itm_head", c.itm_head, fn);
  visit_linear("cross.mlm_head", c.mlm_head, fn);
}

template <class M, class F>
void visit_model(M& m, F& fn) {
  visit_tower("image", m.dual.image, fn);
  visit_tower("text", m.dual.text, fn);
  visit_linear("image_proj", m.dual.image_proj, fn);
  visit_linear("text_proj", m.dual.text_proj, fn);
  visit_cross(m.cross, fn);
  fn(std::string("temperature"), m.temperature);
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::string x(suffix);
  return s.size() >= x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0;
}

}  // namespace

template <class T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
  Model<T> m = allocate<T>(config);
  Rng rng = make_rng(seed, 0x1417);
  auto fill = [&](const std::string& name, Tensor<T>& t) {
    if (name == "temperature") {
      t.values[0] = static_cast<T>(kInitTemperature);
    } else if (ends_with(name, ".gamma")) {
      std::fill(t.values.begin(), t.values.end(), T(1));
    } else if (ends_with(name, ".beta") || ends_with(name, ".bias")) {
      std::fill(t.values.begin(), t.values.end(), T(0));
    } else {
      for (auto& v : t.values) v = static_cast<T>(truncated_normal(rng, 0.02));
    }
  };
  visit_model(m, fill);
  return m;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  auto count = [&](const std::string&, const Tensor<T>& t) { n += t.size(); };
  visit_model(*this, count);
  return n;
}

template <class T>
std::size_t Model<T>::cross_parameter_count() const {
  std::size_t n = 0;
  auto count = [&](const std::string&, const Tensor<T>& t) { n += t.size(); };
  visit_cross(cross, count);
  return n;
}

template <class T>
void Model<T>::zero_grad() {
  auto z = [](const std::string&, Tensor<T>& t) { t.zero_grad(); };
  visit_model(*this, z);
}

template <class T>
void for_each_parameter(Model<T>& model,
                        const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  visit_model(model, fn);
}

template <class T>
void for_each_parameter(const Model<T>& model,
                        const std::function<void(const std::string&, const Tensor<T>&)>& fn) {
  visit_model(model, fn);
}

template <class T>
void for_each_cross_parameter(Model<T>& model,
                              const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  visit_cross(model.cross, fn);
}

template <class To, class From>
Model<To> cast_model(const Model<From>& src) {
  Model<To> dst = allocate<To>(src.config);
  std::vector<const Tensor<From>*> from;
  auto collect = [&](const std::string&, const Tensor<From>& t) { from.push_back(&t); };
  visit_model(src, collect);
  std::size_t i = 0;
  auto copy = [&](const std::string&, Tensor<To>& t) {
    const auto& s = *from[i++];
    for (std::size_t k = 0; k < t.size(); ++k) t.values[k] = static_cast<To>(s.values[k]);
    t.requires_grad = s.requires_grad;
  };
  visit_model(dst, copy);
  return dst;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t w = c.width, hidden = c.width * c.mlp_ratio;
  const std::size_t ln = 2 * w;
  const std::size_t attn = 4 * (w * w + w);
  const std::size_t ffn = (w * hidden + hidden) + (hidden * w + w);
  const std::size_t enc_layer = 2 * ln + attn + ffn;
  const std::size_t cross_layer = 4 * ln + 2 * attn + ffn;
  const std::size_t image = c.image_table_size() * w + c.image_len * w + c.image_depth * enc_layer;
  const std::size_t text = c.text_table_size() * w + c.text_len * w + c.text_depth * enc_layer;
  const std::size_t proj = 2 * (w * c.embed_dim + c.embed_dim);
  const std::size_t cross =
      c.cross_depth * cross_layer + (w * 2 + 2) + (w * c.text_vocab + c.text_vocab);
  return image + text + proj + cross + 1;
}

// ---- forward --------------------------------------------------------------

namespace {

template <class T>
Var<T> linear(Graph<T>& g, Var<T> x, Linear<T>& l) {
  return ad::add_bias(ad::matmul(x, g.parameter(l.weight)), g.parameter(l.bias));
}

template <class T>
Var<T> norm(Graph<T>& g, Var<T> x, LayerNormParams<T>& p) {
  return ad::layer_norm(x, g.parameter(p.gamma), g.parameter(p.beta));
}

// Multi-head scaled dot-product attention. `memory_rows`, when non-empty,
// maps each query batch entry to a row of the key/value source.
template <class T>
Var<T> attention(Graph<T>& g, AttentionParams<T>& p, std::size_t heads, Var<T> query_in,
                 Var<T> memory_in, std::span<const std::size_t> memory_rows) {
  Var<T> q = linear(g, query_in, p.query);
  Var<T> k = linear(g, memory_in, p.key);
  Var<T> v = linear(g, memory_in, p.value);
  if (!memory_rows.empty()) {
    k = ad::gather_rows(k, memory_rows);
    v = ad::gather_rows(v, memory_rows);
  }
  const std::size_t head_dim = query_in.shape().back() / heads;
  Var<T> qh = ad::split_heads(q, heads);
  Var<T> kh = ad::split_heads(k, heads);
  Var<T> vh = ad::split_heads(v, heads);
  Var<T> scores = ad::scale(ad::bmm(qh, kh, true), static_cast<T>(1.0 / std::sqrt(double(head_dim))));
  Var<T> ctx = ad::bmm(ad::softmax_rows(scores), vh, false);
  return linear(g, ad::merge_heads(ctx, heads), p.out);
}

template <class T>
Var<T> feed_forward(Graph<T>& g, Var<T> x, Linear<T>& fc1, Linear<T>& fc2) {
  return linear(g, ad::gelu(linear(g, x, fc1)), fc2);
}

template <class T>
Var<T> encode_tower(Graph<T>& g, TowerParams<T>& tower, const TokenBatch& tokens,
                    std::size_t heads, const char* modality) {
  const std::size_t table = tower.token_embed.shape[0];
  const std::size_t len = tower.pos_embed.shape[0];
  const std::size_t width = tower.pos_embed.shape[1];
  if (tokens.len != len || tokens.ids.size() != tokens.rows * tokens.len) {
    throw ShapeError(std::string(modality) + " batch must be [n, " + std::to_string(len) + "]");
  }
  std::vector<std::size_t> rows(tokens.ids.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= table) {
      throw std::out_of_range(std::string(modality) + " token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(table));
    }
    rows[i] = static_cast<std::size_t>(id);
  }
  Var<T> x = ad::gather_rows(g.parameter(tower.token_embed), rows);
  x = ad::reshape(x, {tokens.rows, len, width});
  x = ad::add_bias(x, g.parameter(tower.pos_embed));
  for (auto& layer : tower.layers) {
    Var<T> h = norm(g, x, layer.ln_attn);
    x = ad::add(x, attention(g, layer.attn, heads, h, h, {}));
    x = ad::add(x, feed_forward(g, norm(g, x, layer.ln_ffn), layer.fc1, layer.fc2));
  }
  return x;
}

}  // namespace

template <class T>
Var<T> encode_image(Graph<T>& g, Model<T>& model, const TokenBatch& tokens) {
  return encode_tower(g, model.dual.image, tokens, model.config.heads, "image");
}

template <class T>
Var<T> encode_text(Graph<T>& g, Model<T>& model, const TokenBatch& tokens) {
  return encode_tower(g, model.dual.text, tokens, model.config.heads, "text");
}

template <class T>
Var<T> pool_project(Var<T> seq, Linear<T>& head) {
  Graph<T>& g = *seq.graph;
  return ad::l2_normalize_rows(linear(g, ad::select_position(seq, 0), head));
}

template <class T>
CrossOutput<T> cross_encode_pairs(Graph<T>& g, Model<T>& model, Var<T> image_seq,
                                  Var<T> text_seq, std::span<const PairIndex> pairs) {
  const Shape si = image_seq.shape();
  const Shape st = text_seq.shape();
  if (si.size() != 3 || st.size() != 3 || si[2] != st[2]) {
    throw ShapeError("cross_encode: sequences " + ad::shape_str(si) + " and " +
                     ad::shape_str(st));
  }
  if (pairs.empty()) throw ShapeError("cross_encode: no pairs");
  std::vector<std::size_t> image_rows(pairs.size()), text_rows(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    if (pairs[p].image >= si[0] || pairs[p].text >= st[0]) {
      throw ShapeError("cross_encode: pair index out of range");
    }
    image_rows[p] = pairs[p].image;
    text_rows[p] = pairs[p].text;
  }
  const std::size_t heads = model.config.heads;
  Var<T> x = ad::gather_rows(text_seq, text_rows);
  for (auto& layer : model.cross.layers) {
    Var<T> h = norm(g, x, layer.ln_self);
    x = ad::add(x, attention(g, layer.self_attn, heads, h, h, {}));
    Var<T> memory = norm(g, image_seq, layer.ln_memory);
    x = ad::add(x, attention(g, layer.cross_attn, heads, norm(g, x, layer.ln_cross), memory,
                             std::span<const std::size_t>(image_rows)));
    x = ad::add(x, feed_forward(g, norm(g, x, layer.ln_ffn), layer.fc1, layer.fc2));
  }
  Var<T> logits = linear(g, ad::select_position(x, 0), model.cross.itm_head);
  return {logits, x};
}

template <class T>
CrossOutput<T> cross_encode(Graph<T>& g, Model<T>& model, Var<T> image_seq, Var<T> text_seq) {
  const std::size_t n = image_seq.shape().empty() ? 0 : image_seq.shape()[0];
  if (text_seq.shape().empty() || text_seq.shape()[0] != n) {
    throw ShapeError("cross_encode: image batch of " + std::to_string(n) +
                     " does not match text batch of " +
                     ad::shape_str(text_seq.shape()));
  }
  std::vector<PairIndex> pairs(n);
  for (std::size_t i = 0; i < n; ++i) pairs[i] = {i, i};
  return cross_encode_pairs(g, model, image_seq, text_seq, pairs);
}

template <class T>
Var<T> mlm_logits(Graph<T>& g, Model<T>& model, Var<T> cross_sequence) {
  const Shape s = cross_sequence.shape();
  Var<T> flat = ad::reshape(cross_sequence, {s[0] * s[1], s[2]});
  return linear(g, flat, model.cross.mlm_head);
}

#define DUET_INSTANTIATE(T)                                                                 \
  template struct Model<T>;                                                                    \
  template void for_each_parameter(Model<T>&,                                                  \
                                   const std::function<void(const std::string&, Tensor<T>&)>&); \
  template void for_each_parameter(                                                            \
      const Model<T>&, const std::function<void(const std::string&, const Tensor<T>&)>&);      \
  template void for_each_cross_parameter(                                                      \
      Model<T>&, const std::function<void(const std::string&, Tensor<T>&)>&);                  \
  template Var<T> encode_image(Graph<T>&, Model<T>&, const TokenBatch&);                       \
  template Var<T> encode_text(Graph<T>&, Model<T>&, const TokenBatch&);                        \
  template Var<T> pool_project(Var<T>, Linear<T>&);                                            \
  template CrossOutput<T> cross_encode_pairs(Graph<T>&, Model<T>&, Var<T>, Var<T>,             \
                                             std::span<const PairIndex>);                      \
  template CrossOutput<T> cross_encode(Graph<T>&, Model<T>&, Var<T>, Var<T>);                  \
  template Var<T> mlm_logits(Graph<T>&, Model<T>&, Var<T>);

DUET_INSTANTIATE(float)
DUET_INSTANTIATE(double)
#undef DUET_INSTANTIATE

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

}  // namespace duet
