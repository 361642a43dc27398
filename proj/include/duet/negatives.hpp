#pragma once

// In-batch negative selection over an n x n similarity matrix sim[i][j] =
// s(image i, text j). The text direction ranks texts for image anchor i along
// row i; the image direction ranks images for text anchor i along column i.
// The positive for anchor i is always index i.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/rng.hpp"

namespace duet {

enum class Direction { kText, kImage };
enum class SamplingMethod { kHard, kRandom };

inline const char* to_string(Direction d) { return d == Direction::kText ? "text" : "image"; }
inline const char* to_string(SamplingMethod s) {
  return s == SamplingMethod::kHard ? "hard" : "random";
}

struct NegativeSelection {
  Direction direction = Direction::kText;
  std::size_t anchor = 0;
  SamplingMethod method = SamplingMethod::kHard;
  std::vector<std::size_t> chosen;  // m distinct indices, none equal to anchor
  std::vector<double> scores;       // sim values of `chosen`
};

namespace detail {

inline void check_selection(std::size_t n, std::size_t anchor, std::size_t m) {
  if (anchor >= n) {
    throw std::out_of_range("anchor " + std::to_string(anchor) + " outside batch of " +
                            std::to_string(n));
  }
  if (m < 1 || m + 1 > n) {
    throw std::out_of_range("m=" + std::to_string(m) + " needs 1 <= m <= n-1 with n=" +
                            std::to_string(n));
  }
}

template <class T>
double score_at(std::span<const T> sim, std::size_t n, std::size_t anchor, Direction dir,
                std::size_t candidate) {
  return dir == Direction::kText ? double(sim[anchor * n + candidate])
                                 : double(sim[candidate * n + anchor]);
}

template <class T>
void check_matrix(std::span<const T> sim, std::size_t n) {
  if (sim.size() != n * n) {
    throw std::invalid_argument("similarity matrix has " + std::to_string(sim.size()) +
                                " entries, expected " + std::to_string(n * n));
  }
}

}  // namespace detail

// The m highest-scoring non-positive candidates, best first; ties go to the
// lower index.
template <class T>
NegativeSelection mine_hard(std::span<const T> sim, std::size_t n, std::size_t anchor,
                            Direction dir, std::size_t m) {
  detail::check_matrix(sim, n);
  detail::check_selection(n, anchor, m);
  std::vector<std::size_t> cand;
  cand.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (j != anchor) cand.push_back(j);
  }
  auto better = [&](std::size_t a, std::size_t b) {
    const double sa = detail::score_at(sim, n, anchor, dir, a);
    const double sb = detail::score_at(sim, n, anchor, dir, b);
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m), cand.end(),
                    better);
  NegativeSelection sel{dir, anchor, SamplingMethod::kHard, {}, {}};
  sel.chosen.assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m));
  for (auto j : sel.chosen) sel.scores.push_back(detail::score_at(sim, n, anchor, dir, j));
  return sel;
}

// Uniform draw of m distinct non-positive indices (partial Fisher-Yates).
inline NegativeSelection sample_random(std::size_t anchor, std::size_t n, std::size_t m, Rng& rng,
                                       Direction dir = Direction::kText) {
  detail::check_selection(n, anchor, m);
  std::vector<std::size_t> cand;
  cand.reserve(n - 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (j != anchor) cand.push_back(j);
  }
  for (std::size_t t = 0; t < m; ++t) {
    const auto j = t + static_cast<std::size_t>(uniform_index(rng, cand.size() - t));
    std::swap(cand[t], cand[j]);
  }
  NegativeSelection sel{dir, anchor, SamplingMethod::kRandom, {}, {}};
  sel.chosen.assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(m));
  return sel;
}

template <class T>
NegativeSelection select_negatives(std::span<const T> sim, std::size_t n, std::size_t anchor,
                                   Direction dir, std::size_t m, SamplingMethod method,
                                   Rng& rng) {
  if (method == SamplingMethod::kHard) return mine_hard(sim, n, anchor, dir, m);
  detail::check_matrix(sim, n);
  auto sel = sample_random(anchor, n, m, rng, dir);
  for (auto j : sel.chosen) sel.scores.push_back(detail::score_at(sim, n, anchor, dir, j));
  return sel;
}

// One negative text per image (text[i]) and one negative image per text
// (image[i]). Random draws take all text negatives first, then all image
// negatives, anchors in order.
struct ItmNegatives {
  std::vector<std::size_t> text;
  std::vector<std::size_t> image;
};

template <class T>
ItmNegatives itm_negatives(std::span<const T> sim, std::size_t n, SamplingMethod method,
                           Rng& rng) {
  if (n < 2) throw std::out_of_range("ITM negatives need a batch of at least 2");
  ItmNegatives out;
  for (Direction dir : {Direction::kText, Direction::kImage}) {
    auto& dst = dir == Direction::kText ? out.text : out.image;
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = select_negatives(sim, n, i, dir, 1, method, rng).chosen[0];
    }
  }
  return out;
}

}  // namespace duet
