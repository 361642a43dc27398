#include "duet/objectives.hpp"

#include <cmath>

#include "duet/errors.hpp"

namespace duet {

using ad::Graph;
using ad::Var;

template <class T>
Var<T> itc_loss(Var<T> sim, Var<T> tau) {
  const auto& s = sim.shape();
  if (s.size() != 2 || s[0] != s[1] || s[0] == 0) {
    throw ShapeError("itc_loss: similarity matrix must be square, got " + ad::shape_str(s));
  }
  const std::size_t n = s[0];
  std::vector<int> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<int>(i);
  const std::vector<T> ones(n, T(1));
  Var<T> logits = ad::div_scalar(sim, tau);
  return ad::add(ad::cross_entropy(logits, std::span<const int>(diag), std::span<const T>(ones)),
                 ad::cross_entropy(ad::transpose(logits), std::span<const int>(diag),
                                   std::span<const T>(ones)));
}

template <class T>
Var<T> itm_loss(Var<T> pos, Var<T> text_neg, Var<T> image_neg) {
  for (const auto* v : {&pos, &text_neg, &image_neg}) {
    const auto& s = v->shape();
    if (s.size() != 2 || s[1] != 2) {
      throw ShapeError("itm_loss: logits must be [n, 2], got " + ad::shape_str(s));
    }
  }
  auto term = [](Var<T> logits, int target) {
    const std::size_t n = logits.shape()[0];
    const std::vector<int> t(n, target);
    const std::vector<T> w(n, T(1));
    return ad::cross_entropy(logits, std::span<const int>(t), std::span<const T>(w));
  };
  return ad::add(ad::add(term(pos, 0), term(text_neg, 1)), term(image_neg, 1));
}

template <class T>
std::vector<DistillSet> build_distill_sets(std::span<const T> sim, std::size_t n, std::size_t m,
                                           Direction direction, SamplingMethod method, Rng& rng) {
  std::vector<DistillSet> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto sel = select_negatives(sim, n, i, direction, m, method, rng);
    sets[i].direction = direction;
    sets[i].anchor = i;
    sets[i].members.reserve(m + 1);
    sets[i].members.push_back(i);
    sets[i].members.insert(sets[i].members.end(), sel.chosen.begin(), sel.chosen.end());
  }
  return sets;
}

template <class T>
DistillPair<T> make_distill_pair(Var<T> sim, Var<T> tau, std::vector<DistillSet> sets,
                                 Var<T> teacher_hpos, bool stop_grad) {
  const auto& s = sim.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("distill: similarity must be square");
  if (sets.empty()) throw ShapeError("distill: no candidate sets");
  const std::size_t n = s[0];
  const std::size_t slots = sets[0].members.size();
  if (teacher_hpos.size() != sets.size() * slots) {
    throw ShapeError("distill: teacher scores do not cover every candidate");
  }
  std::vector<std::size_t> flat;
  flat.reserve(sets.size() * slots);
  for (const auto& set : sets) {
    if (set.members.size() != slots || set.direction != sets[0].direction) {
      throw ShapeError("distill: candidate sets must share direction and size");
    }
    for (std::size_t k = 0; k < slots; ++k) {
      const PairIndex p = set.pair(k);
      flat.push_back(p.image * n + p.text);
    }
  }
  const ad::Shape shape{sets.size(), slots};
  DistillPair<T> out;
  out.direction = sets[0].direction;
  out.student_logits =
      ad::div_scalar(ad::reshape(ad::pick(sim, std::span<const std::size_t>(flat)), shape), tau);
  out.p = ad::softmax_rows(out.student_logits);
  out.q = ad::softmax_rows(ad::div_scalar(ad::reshape(teacher_hpos, shape), tau));
  if (stop_grad) out.q = ad::detach(out.q);
  out.sets = std::move(sets);
  return out;
}

template <class T>
Var<T> distill_loss(const DistillPair<T>& pair) {
  return ad::soft_cross_entropy(pair.student_logits, pair.q);
}

template <class T>
Var<T> mlm_loss(Var<T> logits, std::span<const int> targets) {
  Graph<T>& g = *logits.graph;
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != targets.size()) {
    throw ShapeError("mlm_loss: logits " + ad::shape_str(s) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<std::size_t> rows;
  std::vector<int> kept;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= 0) {
      rows.push_back(r);
      kept.push_back(targets[r]);
    }
  }
  if (rows.empty()) return g.constant(ad::Tensor<T>::scalar(T(0)));
  const std::vector<T> w(rows.size(), static_cast<T>(1.0 / double(rows.size())));
  return ad::cross_entropy(ad::gather_rows(logits, std::span<const std::size_t>(rows)),
                           std::span<const int>(kept), std::span<const T>(w));
}

template <class T>
LossBundle<T> total_loss(Graph<T>& g, const LossTerms<T>& terms, double lambda, long step) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw NumericDomainError("distillation weight must lie in [0, 1]");
  }
  LossBundle<T> b;
  b.lambda = lambda;
  Var<T> total;
  auto accumulate = [&](Var<T> v, double& slot, const char* name, double weight) {
    if (!v.valid()) return;
    slot = double(v.item());
    if (!std::isfinite(slot)) throw DivergenceError(name, step);
    if (weight == 0.0) return;
    Var<T> term = weight == 1.0 ? v : ad::scale(v, static_cast<T>(weight));
    total = total.valid() ? ad::add(total, term) : term;
  };
  accumulate(terms.itc, b.itc, "itc", 1.0);
  accumulate(terms.itm, b.itm, "itm", 1.0);
  accumulate(terms.mlm, b.mlm, "mlm", 1.0);
  accumulate(terms.distill_txt, b.distill_txt, "distill_txt", lambda);
  accumulate(terms.distill_img, b.distill_img, "distill_img", lambda);
  if (!total.valid()) total = g.constant(ad::Tensor<T>::scalar(T(0)));
  b.total = total;
  b.total_value = double(total.item());
  if (!std::isfinite(b.total_value)) throw DivergenceError("total", step);
  return b;
}

#define DUET_INSTANTIATE(T)                                                               \
  template Var<T> itc_loss(Var<T>, Var<T>);                                                  \
  template Var<T> itm_loss(Var<T>, Var<T>, Var<T>);                                          \
  template std::vector<DistillSet> build_distill_sets(std::span<const T>, std::size_t,       \
                                                      std::size_t, Direction, SamplingMethod, \
                                                      Rng&);                                 \
  template DistillPair<T> make_distill_pair(Var<T>, Var<T>, std::vector<DistillSet>, Var<T>, \
                                            bool);                                           \
  template Var<T> distill_loss(const DistillPair<T>&);                                       \
  template Var<T> mlm_loss(Var<T>, std::span<const int>);                                    \
  template LossBundle<T> total_loss(Graph<T>&, const LossTerms<T>&, double, long);

DUET_INSTANTIATE(float)
DUET_INSTANTIATE(double)
#undef DUET_INSTANTIATE

}  // namespace duet
