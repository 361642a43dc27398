#pragma once

// Training losses over graph values. `sim` is always the n x n matrix of
// cosine similarities sim[i][j] = s(image i, text j); `tau` is the shared
// temperature node.

#include <cstddef>
#include <span>
#include <vector>

#include "duet/autodiff.hpp"
#include "duet/model.hpp"
#include "duet/negatives.hpp"

namespace duet {

// Symmetric contrastive loss: image-to-text cross-entropy over rows plus
// text-to-image over columns, summed over the batch.
template <class T>
ad::Var<T> itc_loss(ad::Var<T> sim, ad::Var<T> tau);

// Matching loss: positives should pick class 0 (h_pos), both negative sets
// class 1. Each input is [n, 2].
template <class T>
ad::Var<T> itm_loss(ad::Var<T> pos_logits, ad::Var<T> text_neg_logits,
                    ad::Var<T> image_neg_logits);

// A candidate set for one anchor: members[0] == anchor (the positive), then m
// negatives. For the text direction members are texts paired with image
// `anchor`; for the image direction they are images paired with text `anchor`.
struct DistillSet {
  Direction direction = Direction::kText;
  std::size_t anchor = 0;
  std::vector<std::size_t> members;

  PairIndex pair(std::size_t slot) const {
    return direction == Direction::kText ? PairIndex{anchor, members[slot]}
                                         : PairIndex{members[slot], anchor};
  }
};

// One set per anchor for the given direction.
template <class T>
std::vector<DistillSet> build_distill_sets(std::span<const T> sim, std::size_t n, std::size_t m,
                                           Direction direction, SamplingMethod method, Rng& rng);

// Student and teacher distributions for one direction, batched over anchors.
template <class T>
struct DistillPair {
  Direction direction = Direction::kText;
  std::vector<DistillSet> sets;
  ad::Var<T> student_logits;  // [n, m+1], sim / tau
  ad::Var<T> p;               // softmax of student_logits
  ad::Var<T> q;               // softmax(h_pos / tau); detached when stop_grad
};

// `teacher_hpos` holds h_pos for every (set, slot) pair, set-major, [n*(m+1)].
template <class T>
DistillPair<T> make_distill_pair(ad::Var<T> sim, ad::Var<T> tau, std::vector<DistillSet> sets,
                                 ad::Var<T> teacher_hpos, bool stop_grad);

// Sum over anchors of H(p, q) = -sum_k q_k log p_k.
template <class T>
ad::Var<T> distill_loss(const DistillPair<T>& pair);

// Mean cross-entropy over masked positions. `targets[r]` is the original token
// for masked rows of `logits` and -1 elsewhere. No masked rows gives 0.
template <class T>
ad::Var<T> mlm_loss(ad::Var<T> logits, std::span<const int> targets);

// Components left invalid (default Var) are treated as switched off.
template <class T>
struct LossTerms {
  ad::Var<T> itc, itm, mlm, distill_txt, distill_img;
};

template <class T>
struct LossBundle {
  double itc = 0, itm = 0, mlm = 0, distill_txt = 0, distill_img = 0;
  double lambda = 0;
  double total_value = 0;
  ad::Var<T> total;
};

// total = itc + itm + mlm + lambda * (distill_txt + distill_img). Throws
// DivergenceError naming the first non-finite component.
template <class T>
LossBundle<T> total_loss(ad::Graph<T>& g, const LossTerms<T>& terms, double lambda, long step);

}  // namespace duet
