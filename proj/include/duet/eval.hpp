#pragma once

// Retrieval metrics and the dual-retrieve / cross-rerank pipeline.
//
// Score matrices are query-major: scores[q * candidates + c]. For text
// retrieval (TR) the queries are images and the candidates texts; image
// retrieval (IR) is the transpose. Item i's ground truth is item i.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "duet/corpus.hpp"
#include "duet/model.hpp"

namespace duet {

enum class RetrievalDirection { kTR, kIR };

const char* to_string(RetrievalDirection d);

struct RetrievalResult {
  RetrievalDirection direction = RetrievalDirection::kTR;
  std::vector<std::size_t> ranks;  // 1-based rank of the true candidate, per query
  double r1 = 0, r5 = 0, r10 = 0;  // percent
};

// Ties count against the query: rank = 1 + #{c != truth : s_c >= s_truth}.
// Throws ShapeError on size mismatch, std::invalid_argument on a
// non-bijective truth vector.
RetrievalResult recall_at_k(std::span<const double> scores, std::size_t queries,
                            std::size_t candidates, std::span<const std::size_t> truth,
                            RetrievalDirection direction);

// Candidate indices of each query's top-k by score, best first (ties by
// lower index). k is clamped to the candidate count.
std::vector<std::vector<std::size_t>> topk_candidates(std::span<const double> scores,
                                                      std::size_t queries,
                                                      std::size_t candidates, std::size_t k);

using CrossLookup = std::function<double(std::size_t query, std::size_t candidate)>;

// Top-k candidates per query take cross score + shift, where the shift puts
// the whole block strictly above the best candidate left outside it. Others
// keep their dual score. k <= 1 returns the dual scores unchanged; k >= N
// returns pure cross scores.
std::vector<double> rerank_topk(std::span<const double> dual, std::size_t queries,
                                std::size_t candidates, std::size_t k, const CrossLookup& cross);

// ---- model-level evaluation ----------------------------------------------

// Per-item encoder outputs of a whole corpus.
struct CorpusEncoding {
  std::size_t items = 0;
  std::size_t image_len = 0, text_len = 0, width = 0, embed_dim = 0;
  std::vector<float> image_seq, text_seq;  // [items, len, width]
  std::vector<float> image_emb, text_emb;  // [items, embed_dim], unit rows
};

CorpusEncoding encode_corpus(Model<float>& model, const PairedCorpus& corpus,
                             std::size_t threads);

// sim[i * N + j] = image i . text j, accumulated in double.
std::vector<double> dual_similarity(const CorpusEncoding& enc);

// h_pos for each (image, text) pair, computed in chunks without recording.
std::vector<double> cross_scores(Model<float>& model, const CorpusEncoding& enc,
                                 std::span<const PairIndex> pairs, std::size_t threads);

struct EvalMode {
  enum Kind { kDual, kRerank, kCross } kind = kDual;
  std::size_t k = 0;  // rerank only

  static EvalMode parse(const std::string& text);  // dual | rerank:K | cross
  std::string str() const;
};

struct EvalTiming {
  double embed_ms = 0, score_ms = 0, rerank_ms = 0;
};

struct EvalResult {
  EvalMode mode;
  RetrievalResult tr, ir;
  std::size_t cross_pairs = 0;         // per direction: queries x k (0 for k <= 1)
  std::size_t cross_pairs_scored = 0;  // distinct pairs run through the cross encoder
  EvalTiming timing;
};

// Side-effect free: parameters and gradients are left untouched.
EvalResult evaluate(Model<float>& model, const PairedCorpus& corpus, const EvalMode& mode,
                    std::size_t threads);

// Runs each mode once to warm caches, then again timed.
std::vector<EvalResult> timing_benchmark(Model<float>& model, const PairedCorpus& corpus,
                                         std::span<const EvalMode> modes, std::size_t threads);

}  // namespace duet
