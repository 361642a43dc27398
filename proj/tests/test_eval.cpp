#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "duet/errors.hpp"
#include "duet/eval.hpp"

using namespace duet;

namespace {

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<double> random_matrix(std::size_t q, std::size_t n, std::uint64_t seed, int levels = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> s(q * n);
  for (auto& x : s) {
    x = u(rng);
    if (levels > 0) x = std::round(x * levels) / levels;
  }
  return s;
}

// Position of the truth after a full sort, placed behind every tied score.
std::size_t sort_rank(const std::vector<double>& s, std::size_t n, std::size_t q, std::size_t t) {
  std::vector<std::size_t> order = identity(n);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = s[q * n + a], sb = s[q * n + b];
    if (sa != sb) return sa > sb;
    return (a != t) && (b == t);
  });
  return std::size_t(std::find(order.begin(), order.end(), t) - order.begin()) + 1;
}

CorpusConfig small_corpus() {
  CorpusConfig c;
  c.num_classes = 6;
  c.pairs_per_class = 4;
  c.image_vocab = 16;
  c.text_vocab = 16;
  c.image_tokens = 6;
  c.text_tokens = 4;
  return c;
}

ModelConfig small_model(const CorpusConfig& corpus) {
  ModelConfig m;
  m.width = 16;
  m.embed_dim = 8;
  m.heads = 2;
  m.image_depth = m.text_depth = m.cross_depth = 1;
  m.mlp_ratio = 2;
  return fit_model_config(m, corpus);
}

std::vector<float> flatten(const Model<float>& m) {
  std::vector<float> out;
  for_each_parameter(m, std::function<void(const std::string&, const ad::Tensor<float>&)>(
                            [&](const std::string&, const ad::Tensor<float>& t) {
                              out.insert(out.end(), t.values.begin(), t.values.end());
                              CHECK_FALSE(t.has_grad());
                            }));
  return out;
}

}  // namespace

TEST_CASE("recall on fixed matrices") {
  const std::size_t n = 20;
  const auto truth = identity(n);
  std::vector<double> diag(n * n, 0.0), anti(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    diag[i * n + i] = 1.0;
    anti[i * n + (n - 1 - i)] = 1.0;
  }
  auto d = recall_at_k(diag, n, n, truth, RetrievalDirection::kTR);
  CHECK(d.r1 == 100.0);
  CHECK(d.r10 == 100.0);
  auto a = recall_at_k(anti, n, n, truth, RetrievalDirection::kIR);
  CHECK(a.r1 == 0.0);
  CHECK(a.direction == RetrievalDirection::kIR);

  // all tied: every other candidate ranks ahead
  std::vector<double> flat(n * n, 0.5);
  auto f = recall_at_k(flat, n, n, truth, RetrievalDirection::kTR);
  for (auto r : f.ranks) CHECK(r == n);
}

TEST_CASE("recall matches a sorting oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int levels = seed % 2 ? 4 : 0;  // odd seeds are full of ties
    const std::size_t n = 50;
    auto s = random_matrix(n, n, seed, levels);
    std::vector<std::size_t> truth = identity(n);
    std::shuffle(truth.begin(), truth.end(), std::mt19937_64(seed + 100));
    auto r = recall_at_k(s, n, n, truth, RetrievalDirection::kTR);
    std::size_t h1 = 0, h5 = 0, h10 = 0;
    for (std::size_t q = 0; q < n; ++q) {
      const auto rank = sort_rank(s, n, q, truth[q]);
      CHECK(r.ranks[q] == rank);
      h1 += rank <= 1;
      h5 += rank <= 5;
      h10 += rank <= 10;
    }
    CHECK(r.r1 == 100.0 * double(h1) / n);
    CHECK(r.r5 == 100.0 * double(h5) / n);
    CHECK(r.r10 == 100.0 * double(h10) / n);
    CHECK(r.r1 <= r.r5);
    CHECK(r.r5 <= r.r10);
    CHECK(r.r10 <= 100.0);
  }
}

TEST_CASE("recall input checks") {
  std::vector<double> s(12, 0.0);
  const auto t3 = identity(3);
  CHECK_THROWS_AS(recall_at_k(s, 3, 3, t3, RetrievalDirection::kTR), ShapeError);
  std::vector<double> sq(9, 0.0);
  CHECK_THROWS_AS(recall_at_k(sq, 3, 3, identity(2), RetrievalDirection::kTR), ShapeError);
  const std::vector<std::size_t> dup{0, 0, 1};
  CHECK_THROWS_AS(recall_at_k(sq, 3, 3, dup, RetrievalDirection::kTR), std::invalid_argument);
  const std::vector<std::size_t> out{0, 1, 3};
  CHECK_THROWS_AS(recall_at_k(sq, 3, 3, out, RetrievalDirection::kTR), std::invalid_argument);
}

TEST_CASE("top-k breaks ties by index") {
  const std::vector<double> s{0.1, 0.5, 0.5, 0.9, 0.5};
  auto top = topk_candidates(s, 1, 5, 3);
  CHECK(top[0] == std::vector<std::size_t>{3, 1, 2});
  CHECK(topk_candidates(s, 1, 5, 99)[0].size() == 5);
}

TEST_CASE("rerank identities") {
  const std::size_t q = 30, n = 30;
  const auto truth = identity(n);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto dual = random_matrix(q, n, seed);
    auto cross_m = random_matrix(q, n, seed + 1000);
    CrossLookup cross = [&](std::size_t a, std::size_t b) { return cross_m[a * n + b]; };

    CHECK(rerank_topk(dual, q, n, 1, cross) == dual);
    auto full = rerank_topk(dual, q, n, n, cross);
    CHECK(full == cross_m);
    CHECK(rerank_topk(dual, q, n, n + 7, cross) == cross_m);
    CHECK(recall_at_k(full, q, n, truth, RetrievalDirection::kTR).ranks ==
          recall_at_k(cross_m, q, n, truth, RetrievalDirection::kTR).ranks);

    for (std::size_t k : {2u, 5u, 16u}) {
      auto re = rerank_topk(dual, q, n, k, cross);
      const auto before = topk_candidates(dual, q, n, k);
      const auto after = topk_candidates(re, q, n, k);
      for (std::size_t i = 0; i < q; ++i) {
        CHECK(std::set<std::size_t>(before[i].begin(), before[i].end()) ==
              std::set<std::size_t>(after[i].begin(), after[i].end()));
        // internal order follows the cross scores
        for (std::size_t a = 1; a < k; ++a) {
          CHECK(cross_m[i * n + after[i][a - 1]] >= cross_m[i * n + after[i][a]]);
        }
        // outside the block the dual order and values are kept
        std::set<std::size_t> inside(before[i].begin(), before[i].end());
        double lowest_inside = INFINITY, best_outside = -INFINITY;
        for (std::size_t c = 0; c < n; ++c) {
          if (inside.count(c)) {
            lowest_inside = std::min(lowest_inside, re[i * n + c]);
          } else {
            CHECK(re[i * n + c] == dual[i * n + c]);
            best_outside = std::max(best_outside, re[i * n + c]);
          }
        }
        CHECK(lowest_inside > best_outside);
      }
    }
  }
}

TEST_CASE("eval mode strings") {
  CHECK(EvalMode::parse("dual").kind == EvalMode::kDual);
  CHECK(EvalMode::parse("cross").kind == EvalMode::kCross);
  auto r = EvalMode::parse("rerank:16");
  CHECK(r.kind == EvalMode::kRerank);
  CHECK(r.k == 16);
  CHECK(r.str() == "rerank:16");
  for (const char* bad : {"rerank", "rerank:0", "rerank:x", "rerank:-3", "both", ""}) {
    CHECK_THROWS_AS(EvalMode::parse(bad), ConfigError);
  }
}

TEST_CASE("model evaluation") {
  const auto cc = small_corpus();
  const auto corpus = generate_corpus(cc, Split::kTest);
  const std::size_t n = corpus.size();
  auto model = Model<float>::init(small_model(cc), 5);

  SUBCASE("evaluation leaves the model untouched") {
    const auto before = flatten(model);
    evaluate(model, corpus, EvalMode::parse("rerank:4"), 2);
    evaluate(model, corpus, EvalMode::parse("cross"), 1);
    CHECK(flatten(model) == before);
  }

  SUBCASE("rerank:1 equals dual, rerank:N equals cross") {
    auto dual = evaluate(model, corpus, EvalMode::parse("dual"), 1);
    auto r1 = evaluate(model, corpus, EvalMode::parse("rerank:1"), 1);
    auto cross = evaluate(model, corpus, EvalMode::parse("cross"), 1);
    auto rn = evaluate(model, corpus, EvalMode::parse("rerank:" + std::to_string(n)), 1);
    CHECK(r1.tr.ranks == dual.tr.ranks);
    CHECK(r1.ir.ranks == dual.ir.ranks);
    CHECK(rn.tr.ranks == cross.tr.ranks);
    CHECK(rn.ir.ranks == cross.ir.ranks);
    CHECK(dual.cross_pairs == 0);
    CHECK(r1.cross_pairs == 0);
    CHECK(cross.cross_pairs == n * n);
    CHECK(cross.cross_pairs_scored == n * n);
    auto r4 = evaluate(model, corpus, EvalMode::parse("rerank:4"), 1);
    CHECK(r4.cross_pairs == n * 4);
    CHECK(r4.cross_pairs_scored <= 2 * n * 4);
    CHECK(r4.cross_pairs_scored >= n * 4);
  }

  SUBCASE("results do not depend on the thread count") {
    auto a = evaluate(model, corpus, EvalMode::parse("rerank:5"), 1);
    auto b = evaluate(model, corpus, EvalMode::parse("rerank:5"), 3);
    CHECK(a.tr.ranks == b.tr.ranks);
    CHECK(a.ir.ranks == b.ir.ranks);
  }

  SUBCASE("rerank agrees with a full cross pass on shortlisted truths") {
    const std::size_t k = 8;
    auto enc = encode_corpus(model, corpus, 1);
    auto dual = dual_similarity(enc);
    std::vector<PairIndex> all;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) all.push_back({i, j});
    }
    auto full = cross_scores(model, enc, all, 1);  // full[i * n + j]
    auto re = evaluate(model, corpus, EvalMode::parse("rerank:" + std::to_string(k)), 1);
    auto top = topk_candidates(dual, n, n, k);
    std::size_t checked = 0;
    for (std::size_t q = 0; q < n; ++q) {
      const auto& block = top[q];
      if (std::find(block.begin(), block.end(), q) == block.end()) continue;
      ++checked;
      std::size_t rank = 1;
      for (std::size_t c : block) rank += c != q && full[q * n + c] >= full[q * n + q];
      CHECK(re.tr.ranks[q] == rank);
      // when the full-pass winner is shortlisted both agree on the hit
      std::size_t best = 0;
      for (std::size_t c = 1; c < n; ++c) best = full[q * n + c] > full[q * n + best] ? c : best;
      if (std::find(block.begin(), block.end(), best) != block.end()) {
        std::size_t cross_rank = 1;
        for (std::size_t c = 0; c < n; ++c) cross_rank += c != q && full[q * n + c] >= full[q * n + q];
        CHECK((re.tr.ranks[q] == 1) == (cross_rank == 1));
      }
    }
    CHECK(checked > 0);
  }

  SUBCASE("timing benchmark reports pair counts per mode") {
    const EvalMode modes[] = {EvalMode::parse("dual"), EvalMode::parse("rerank:3"),
                              EvalMode::parse("cross")};
    auto out = timing_benchmark(model, corpus, modes, 1);
    REQUIRE(out.size() == 3);
    CHECK(out[0].cross_pairs == 0);
    CHECK(out[1].cross_pairs == n * 3);
    CHECK(out[2].cross_pairs == n * n);
    CHECK(out[0].cross_pairs <= out[1].cross_pairs);
    CHECK(out[1].cross_pairs <= out[2].cross_pairs);
    for (const auto& r : out) CHECK(r.timing.embed_ms >= 0);
    CHECK(out[0].timing.rerank_ms == 0);
  }
}

TEST_CASE("untrained models retrieve at chance") {
  const auto cc = desk_corpus_config(Split::kTest, 0);
  const auto corpus = generate_corpus(cc, Split::kTest);
  ModelConfig mc;
  mc.width = 32;
  mc.embed_dim = 16;
  mc.heads = 2;
  mc.image_depth = mc.text_depth = mc.cross_depth = 1;
  mc.mlp_ratio = 2;
  mc = fit_model_config(mc, cc);
  const double n = double(corpus.size());
  double hits = 0, trials = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = Model<float>::init(mc, 1000 + seed);
    auto r = evaluate(model, corpus, EvalMode{}, 1);
    hits += (r.tr.r1 + r.ir.r1) / 100.0 * n;
    trials += 2 * n;
  }
  const double p = 1.0 / n;
  const double sd = std::sqrt(trials * p * (1 - p));
  MESSAGE("chance R@1 " << 100 * p << "%, observed " << 100 * hits / trials << "%");
  CHECK(std::abs(hits - trials * p) <= 4 * sd);
}
