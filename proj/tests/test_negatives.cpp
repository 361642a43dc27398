#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "duet/negatives.hpp"
#include "test_util.hpp"

using namespace duet;

namespace {

// Sort every non-positive candidate by (score desc, index asc) and keep m.
std::vector<std::size_t> sort_oracle(const std::vector<double>& sim, std::size_t n,
                                     std::size_t anchor, Direction dir, std::size_t m) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == anchor) continue;
    const double s = dir == Direction::kText ? sim[anchor * n + j] : sim[j * n + anchor];
    all.push_back({-s, j});
  }
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < m; ++k) out.push_back(all[k].second);
  return out;
}

std::vector<double> quantized(std::size_t n, std::uint64_t seed) {
  // Few distinct levels so ties are common.
  auto v = test::random_values(n * n, seed, 0.0, 1.0);
  for (auto& x : v) x = std::floor(x * 5.0) / 5.0;
  return v;
}

}  // namespace

TEST_CASE("mine_hard orders by score") {
  const std::vector<double> sim{0.9, 0.8, 0.1, 0.7,  //
                                0, 0, 0, 0,          //
                                0, 0, 0, 0,          //
                                0, 0, 0, 0};
  auto sel = mine_hard(std::span<const double>(sim), 4, 0, Direction::kText, 2);
  CHECK(sel.chosen == std::vector<std::size_t>{1, 3});
  CHECK(sel.scores == std::vector<double>{0.8, 0.7});
  CHECK(sel.method == SamplingMethod::kHard);
  CHECK(sel.anchor == 0);
}

TEST_CASE("mine_hard ties go to the lowest indices") {
  std::vector<double> sim(25, 0.3);
  sim[2 * 5 + 2] = 0.9;
  auto sel = mine_hard(std::span<const double>(sim), 5, 2, Direction::kText, 2);
  CHECK(sel.chosen == std::vector<std::size_t>{0, 1});
  sel = mine_hard(std::span<const double>(sim), 5, 0, Direction::kImage, 2);
  CHECK(sel.chosen == std::vector<std::size_t>{1, 2});
}

TEST_CASE("image direction reads columns") {
  const std::vector<double> sim{0.5, 0.9, 0.0,  //
                                0.1, 0.5, 0.2,  //
                                0.8, 0.3, 0.5};
  CHECK(mine_hard(std::span<const double>(sim), 3, 0, Direction::kImage, 1).chosen[0] == 2);
  CHECK(mine_hard(std::span<const double>(sim), 3, 0, Direction::kText, 1).chosen[0] == 1);
  CHECK(mine_hard(std::span<const double>(sim), 3, 1, Direction::kImage, 1).chosen[0] == 0);
}

TEST_CASE("mine_hard matches sort oracle") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t n = 10;
    const auto sim = seed % 2 ? quantized(n, seed) : test::random_values(n * n, seed);
    for (std::size_t m = 1; m < n; ++m) {
      for (std::size_t a = 0; a < n; ++a) {
        for (auto dir : {Direction::kText, Direction::kImage}) {
          auto sel = mine_hard(std::span<const double>(sim), n, a, dir, m);
          CHECK(sel.chosen == sort_oracle(sim, n, a, dir, m));
        }
      }
    }
  }
}

TEST_CASE("selection argument checks") {
  std::vector<double> sim(16, 0.0);
  std::span<const double> s(sim);
  CHECK_THROWS_AS(mine_hard(s, 4, 0, Direction::kText, 0), std::out_of_range);
  CHECK_THROWS_AS(mine_hard(s, 4, 0, Direction::kText, 4), std::out_of_range);
  CHECK_THROWS_AS(mine_hard(s, 4, 4, Direction::kText, 1), std::out_of_range);
  CHECK_THROWS_AS(mine_hard(s, 5, 0, Direction::kText, 1), std::invalid_argument);
  Rng rng(1);
  CHECK_THROWS_AS(sample_random(0, 4, 4, rng), std::out_of_range);
  CHECK_THROWS_AS(itm_negatives(std::span<const double>(sim.data(), 1), 1,
                                SamplingMethod::kHard, rng),
                  std::out_of_range);
}

TEST_CASE("nested top-m") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 12;
    const auto sim = quantized(n, seed + 100);
    for (std::size_t m = 1; m + 1 < n; ++m) {
      auto a = mine_hard(std::span<const double>(sim), n, 3, Direction::kText, m).chosen;
      auto b = mine_hard(std::span<const double>(sim), n, 3, Direction::kText, m + 1).chosen;
      std::set<std::size_t> bs(b.begin(), b.end());
      for (auto x : a) CHECK(bs.count(x) == 1);
    }
  }
}

TEST_CASE("hard selection is permutation covariant") {
  const std::size_t n = 9;
  const auto sim = test::random_values(n * n, 7);
  const std::vector<std::size_t> perm{3, 8, 0, 5, 1, 7, 2, 6, 4};  // new k holds old perm[k]
  std::vector<std::size_t> inv(n);
  for (std::size_t k = 0; k < n; ++k) inv[perm[k]] = k;
  std::vector<double> permuted(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) permuted[i * n + j] = sim[perm[i] * n + perm[j]];
  }
  for (std::size_t m = 1; m < n; ++m) {
    for (std::size_t k = 0; k < n; ++k) {
      for (auto dir : {Direction::kText, Direction::kImage}) {
        auto a = mine_hard(std::span<const double>(permuted), n, k, dir, m).chosen;
        auto b = mine_hard(std::span<const double>(sim), n, perm[k], dir, m).chosen;
        for (auto& x : b) x = inv[x];
        CHECK(a == b);
      }
    }
  }
}

TEST_CASE("hard selection ignores the rng") {
  const auto sim = test::random_values(36, 3);
  Rng a(1), b(999);
  b.discard(17);
  auto x = itm_negatives(std::span<const double>(sim), 6, SamplingMethod::kHard, a);
  auto y = itm_negatives(std::span<const double>(sim), 6, SamplingMethod::kHard, b);
  CHECK(x.text == y.text);
  CHECK(x.image == y.image);
  CHECK(a() == Rng(1)());
}

TEST_CASE("sample_random basics") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    CHECK(sample_random(0, 2, 1, rng).chosen == std::vector<std::size_t>{1});
    CHECK(sample_random(1, 2, 1, rng).chosen == std::vector<std::size_t>{0});
  }
  for (int t = 0; t < 200; ++t) {
    auto sel = sample_random(4, 9, 5, rng);
    std::set<std::size_t> s(sel.chosen.begin(), sel.chosen.end());
    CHECK(s.size() == 5);
    CHECK(s.count(4) == 0);
    CHECK(*s.rbegin() < 9);
  }
  Rng r1(42), r2(42);
  CHECK(sample_random(2, 8, 3, r1).chosen == sample_random(2, 8, 3, r2).chosen);
}

TEST_CASE("sample_random is uniform") {
  Rng rng(2024);
  const int draws = 100000;
  std::map<std::size_t, int> freq;
  for (int t = 0; t < draws; ++t) {
    for (auto j : sample_random(0, 8, 3, rng).chosen) ++freq[j];
  }
  CHECK(freq.count(0) == 0);
  for (std::size_t j = 1; j < 8; ++j) {
    const double f = double(freq[j]) / draws;
    CHECK(std::abs(f - 3.0 / 7.0) <= 0.01);
  }
}

TEST_CASE("itm_negatives") {
  SUBCASE("n=2 is forced") {
    const std::vector<double> sim{0.1, 0.5, -0.3, 0.2};
    for (auto method : {SamplingMethod::kHard, SamplingMethod::kRandom}) {
      Rng rng(3);
      auto neg = itm_negatives(std::span<const double>(sim), 2, method, rng);
      CHECK(neg.text == std::vector<std::size_t>{1, 0});
      CHECK(neg.image == std::vector<std::size_t>{1, 0});
    }
  }
  SUBCASE("hard equals mine_hard with m=1") {
    const auto sim = test::random_values(64, 11);
    Rng rng(0);
    auto neg = itm_negatives(std::span<const double>(sim), 8, SamplingMethod::kHard, rng);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(neg.text[i] ==
            mine_hard(std::span<const double>(sim), 8, i, Direction::kText, 1).chosen[0]);
      CHECK(neg.image[i] ==
            mine_hard(std::span<const double>(sim), 8, i, Direction::kImage, 1).chosen[0]);
    }
  }
  SUBCASE("random replays the documented draw order") {
    const std::size_t n = 6;
    const auto sim = test::random_values(n * n, 12);
    Rng rng(77);
    auto neg = itm_negatives(std::span<const double>(sim), n, SamplingMethod::kRandom, rng);
    // Oracle: text anchors 0..n-1 then image anchors, each one uniform draw
    // over the n-1 non-positive indices in ascending order.
    Rng replay(77);
    for (int pass = 0; pass < 2; ++pass) {
      const auto& got = pass == 0 ? neg.text : neg.image;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> cand;
        for (std::size_t j = 0; j < n; ++j) {
          if (j != i) cand.push_back(j);
        }
        CHECK(got[i] == cand[uniform_index(replay, cand.size())]);
      }
    }
  }
}
