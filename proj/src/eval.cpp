#include "duet/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "duet/errors.hpp"
#include "duet/parallel.hpp"

namespace duet {

namespace {

constexpr std::size_t kEncodeChunk = 64;
constexpr std::size_t kCrossChunk = 64;

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double percent(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * double(hits) / double(total);
}

}  // namespace

const char* to_string(RetrievalDirection d) {
  return d == RetrievalDirection::kTR ? "TR" : "IR";
}

RetrievalResult recall_at_k(std::span<const double> scores, std::size_t queries,
                            std::size_t candidates, std::span<const std::size_t> truth,
                            RetrievalDirection direction) {
  if (scores.size() != queries * candidates || truth.size() != queries) {
    throw ShapeError("recall_at_k: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(queries) + "x" + std::to_string(candidates) + ", " +
                     std::to_string(truth.size()) + " truths");
  }
  std::vector<char> seen(candidates, 0);
  for (std::size_t t : truth) {
    if (t >= candidates || seen[t]) {
      throw std::invalid_argument("recall_at_k: ground truth is not a bijection");
    }
    seen[t] = 1;
  }
  RetrievalResult r;
  r.direction = direction;
  r.ranks.resize(queries);
  std::size_t h1 = 0, h5 = 0, h10 = 0;
  for (std::size_t q = 0; q < queries; ++q) {
    const double* row = scores.data() + q * candidates;
    const double s = row[truth[q]];
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < candidates; ++c) {
      if (c != truth[q] && !(row[c] < s)) ++ahead;
    }
    const std::size_t rank = ahead + 1;
    r.ranks[q] = rank;
    h1 += rank <= 1;
    h5 += rank <= 5;
    h10 += rank <= 10;
  }
  r.r1 = percent(h1, queries);
  r.r5 = percent(h5, queries);
  r.r10 = percent(h10, queries);
  return r;
}

std::vector<std::vector<std::size_t>> topk_candidates(std::span<const double> scores,
                                                      std::size_t queries,
                                                      std::size_t candidates, std::size_t k) {
  if (scores.size() != queries * candidates) throw ShapeError("topk_candidates: bad size");
  k = std::min(k, candidates);
  std::vector<std::vector<std::size_t>> out(queries);
  std::vector<std::size_t> idx(candidates);
  for (std::size_t q = 0; q < queries; ++q) {
    const double* row = scores.data() + q * candidates;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [row](std::size_t a, std::size_t b) {
                        return row[a] != row[b] ? row[a] > row[b] : a < b;
                      });
    out[q].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

std::vector<double> rerank_topk(std::span<const double> dual, std::size_t queries,
                                std::size_t candidates, std::size_t k, const CrossLookup& cross) {
  if (dual.size() != queries * candidates) throw ShapeError("rerank_topk: bad size");
  std::vector<double> out(dual.begin(), dual.end());
  if (k <= 1) return out;
  k = std::min(k, candidates);
  const auto top = topk_candidates(dual, queries, candidates, k);
  std::vector<char> inside(candidates);
  std::vector<double> h(k);
  for (std::size_t q = 0; q < queries; ++q) {
    double* row = out.data() + q * candidates;
    std::fill(inside.begin(), inside.end(), 0);
    for (std::size_t j = 0; j < k; ++j) {
      inside[top[q][j]] = 1;
      h[j] = cross(q, top[q][j]);
    }
    if (k == candidates) {
      for (std::size_t j = 0; j < k; ++j) row[top[q][j]] = h[j];
      continue;
    }
    double best_outside = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates; ++c) {
      if (!inside[c]) best_outside = std::max(best_outside, row[c]);
    }
    const double shift = best_outside - *std::min_element(h.begin(), h.end()) + 1.0;
    for (std::size_t j = 0; j < k; ++j) row[top[q][j]] = h[j] + shift;
  }
  return out;
}

CorpusEncoding encode_corpus(Model<float>& model, const PairedCorpus& corpus,
                             std::size_t threads) {
  const ModelConfig& mc = model.config;
  CorpusEncoding enc;
  enc.items = corpus.size();
  enc.image_len = mc.image_len;
  enc.text_len = mc.text_len;
  enc.width = mc.width;
  enc.embed_dim = mc.embed_dim;
  enc.image_seq.resize(enc.items * mc.image_len * mc.width);
  enc.text_seq.resize(enc.items * mc.text_len * mc.width);
  enc.image_emb.resize(enc.items * mc.embed_dim);
  enc.text_emb.resize(enc.items * mc.embed_dim);
  const std::size_t chunks = (enc.items + kEncodeChunk - 1) / kEncodeChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kEncodeChunk, hi = std::min(enc.items, lo + kEncodeChunk);
    std::vector<std::size_t> rows(hi - lo);
    std::iota(rows.begin(), rows.end(), lo);
    ad::Graph<float> g(false);
    auto fi = encode_image(g, model, image_batch(corpus, rows, mc));
    auto ft = encode_text(g, model, text_batch(corpus, rows, mc));
    auto zi = pool_project(fi, model.dual.image_proj).values();
    auto zt = pool_project(ft, model.dual.text_proj).values();
    auto si = fi.values(), st = ft.values();
    std::copy(si.begin(), si.end(), enc.image_seq.begin() + lo * mc.image_len * mc.width);
    std::copy(st.begin(), st.end(), enc.text_seq.begin() + lo * mc.text_len * mc.width);
    std::copy(zi.begin(), zi.end(), enc.image_emb.begin() + lo * mc.embed_dim);
    std::copy(zt.begin(), zt.end(), enc.text_emb.begin() + lo * mc.embed_dim);
  });
  return enc;
}

std::vector<double> dual_similarity(const CorpusEncoding& enc) {
  const std::size_t n = enc.items, d = enc.embed_dim;
  std::vector<double> sim(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* a = enc.image_emb.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      const float* b = enc.text_emb.data() + j * d;
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += double(a[k]) * double(b[k]);
      sim[i * n + j] = s;
    }
  }
  return sim;
}

std::vector<double> cross_scores(Model<float>& model, const CorpusEncoding& enc,
                                 std::span<const PairIndex> pairs, std::size_t threads) {
  std::vector<double> out(pairs.size());
  const std::size_t chunks = (pairs.size() + kCrossChunk - 1) / kCrossChunk;
  const std::size_t li = enc.image_len * enc.width, lt = enc.text_len * enc.width;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kCrossChunk, hi = std::min(pairs.size(), lo + kCrossChunk);
    // Only the sequences this chunk touches enter the graph.
    std::map<std::size_t, std::size_t> image_slot, text_slot;
    for (std::size_t p = lo; p < hi; ++p) {
      image_slot.emplace(pairs[p].image, 0);
      text_slot.emplace(pairs[p].text, 0);
    }
    std::vector<float> iv, tv;
    for (auto& [item, slot] : image_slot) {
      slot = iv.size() / li;
      iv.insert(iv.end(), enc.image_seq.begin() + item * li, enc.image_seq.begin() + (item + 1) * li);
    }
    for (auto& [item, slot] : text_slot) {
      slot = tv.size() / lt;
      tv.insert(tv.end(), enc.text_seq.begin() + item * lt, enc.text_seq.begin() + (item + 1) * lt);
    }
    std::vector<PairIndex> local(hi - lo);
    for (std::size_t p = lo; p < hi; ++p) {
      local[p - lo] = {image_slot[pairs[p].image], text_slot[pairs[p].text]};
    }
    ad::Graph<float> g(false);
    auto fi = g.constant({image_slot.size(), enc.image_len, enc.width}, std::move(iv));
    auto ft = g.constant({text_slot.size(), enc.text_len, enc.width}, std::move(tv));
    auto logits = cross_encode_pairs(g, model, fi, ft, local).itm_logits.values();
    for (std::size_t p = lo; p < hi; ++p) out[p] = logits[2 * (p - lo)];
  });
  return out;
}

EvalMode EvalMode::parse(const std::string& text) {
  if (text == "dual") return {kDual, 0};
  if (text == "cross") return {kCross, 0};
  if (text.rfind("rerank:", 0) == 0) {
    const std::string num = text.substr(7);
    std::size_t k = 0;
    const auto [end, ec] = std::from_chars(num.data(), num.data() + num.size(), k);
    if (ec == std::errc() && end == num.data() + num.size() && !num.empty() && k >= 1) {
      return {kRerank, k};
    }
  }
  throw ConfigError("mode", "expected dual, rerank:K (K >= 1) or cross, got '" + text + "'");
}

std::string EvalMode::str() const {
  switch (kind) {
    case kDual:
      return "dual";
    case kCross:
      return "cross";
    case kRerank:
      return "rerank:" + std::to_string(k);
  }
  return "?";
}

EvalResult evaluate(Model<float>& model, const PairedCorpus& corpus, const EvalMode& mode,
                    std::size_t threads) {
  EvalResult r;
  r.mode = mode;
  const std::size_t n = corpus.size();
  if (n == 0) throw ShapeError("evaluate: empty corpus");

  auto t0 = Clock::now();
  const CorpusEncoding enc = encode_corpus(model, corpus, threads);
  r.timing.embed_ms = ms_since(t0);

  t0 = Clock::now();
  const std::vector<double> tr_dual = dual_similarity(enc);
  std::vector<double> ir_dual(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) ir_dual[j * n + i] = tr_dual[i * n + j];
  }
  r.timing.score_ms = ms_since(t0);

  std::vector<std::size_t> truth(n);
  std::iota(truth.begin(), truth.end(), std::size_t{0});

  std::size_t k = 0;
  if (mode.kind == EvalMode::kCross) k = n;
  if (mode.kind == EvalMode::kRerank) k = std::min(mode.k, n);
  if (k <= 1) {
    r.tr = recall_at_k(tr_dual, n, n, truth, RetrievalDirection::kTR);
    r.ir = recall_at_k(ir_dual, n, n, truth, RetrievalDirection::kIR);
    return r;
  }

  t0 = Clock::now();
  // Both directions draw on one table of pair scores keyed by image * n + text.
  const auto tr_top = topk_candidates(tr_dual, n, n, k);
  const auto ir_top = topk_candidates(ir_dual, n, n, k);
  std::vector<std::size_t> keys;
  keys.reserve(2 * n * k);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t c : tr_top[q]) keys.push_back(q * n + c);
    for (std::size_t c : ir_top[q]) keys.push_back(c * n + q);
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  std::vector<PairIndex> pairs(keys.size());
  for (std::size_t p = 0; p < keys.size(); ++p) pairs[p] = {keys[p] / n, keys[p] % n};
  const std::vector<double> h = cross_scores(model, enc, pairs, threads);
  auto lookup = [&](std::size_t image, std::size_t text) {
    const auto it = std::lower_bound(keys.begin(), keys.end(), image * n + text);
    return h[static_cast<std::size_t>(it - keys.begin())];
  };
  const auto tr_scores =
      rerank_topk(tr_dual, n, n, k, [&](std::size_t q, std::size_t c) { return lookup(q, c); });
  const auto ir_scores =
      rerank_topk(ir_dual, n, n, k, [&](std::size_t q, std::size_t c) { return lookup(c, q); });
  r.timing.rerank_ms = ms_since(t0);
  r.cross_pairs = n * k;
  r.cross_pairs_scored = pairs.size();

  r.tr = recall_at_k(tr_scores, n, n, truth, RetrievalDirection::kTR);
  r.ir = recall_at_k(ir_scores, n, n, truth, RetrievalDirection::kIR);
  return r;
}

std::vector<EvalResult> timing_benchmark(Model<float>& model, const PairedCorpus& corpus,
                                         std::span<const EvalMode> modes, std::size_t threads) {
  std::vector<EvalResult> out;
  for (const auto& mode : modes) {
    evaluate(model, corpus, mode, threads);
    out.push_back(evaluate(model, corpus, mode, threads));
  }
  return out;
}

}  // namespace duet
