#pragma once

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// A Graph records every operation as it executes; Var is a lightweight handle
// into it. Parameters enter a graph through Graph::parameter(), which binds the
// external Tensor without copying; backward() accumulates into Tensor::grad of
// every bound tensor that requires grad. A graph may be differentiated once.
//
// Instantiated for float (training) and double (gradient checks, oracles).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "duet/errors.hpp"

namespace duet::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  // Empty until a backward pass touches this tensor.
  std::vector<T> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> v, bool rg = false);
  static Tensor zeros(Shape s, bool rg = false);
  static Tensor scalar(T v, bool rg = false);

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.clear(); }
};

enum class OpKind : std::uint8_t {
  kParameter,
  kConstant,
  kDetach,
  kMatMul,
  kMatMulNT,
  kBatchMatMul,
  kAdd,
  kAddBias,
  kScale,
  kDivScalar,
  kMul,
  kSum,
  kSoftmaxRows,
  kLayerNorm,
  kGelu,
  kGatherRows,
  kSliceRows,
  kSelectPosition,
  kConcatRows,
  kReshape,
  kSplitHeads,
  kMergeHeads,
  kTranspose,
  kPick,
  kL2Normalize,
  kCrossEntropy,
  kSoftCrossEntropy,
};

const char* op_name(OpKind kind);

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  bool valid() const { return graph != nullptr; }
  const Shape& shape() const;
  std::span<const T> values() const;
  std::size_t size() const { return values().size(); }
  T item() const;
  bool requires_grad() const;
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

  // With record=false no backward closures are kept (evaluation mode).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Binds an external tensor as a leaf. Binding the same tensor twice returns
  // the same node. The tensor must outlive the graph.
  Var<T> parameter(Tensor<T>& t);
  Var<T> parameter(const Tensor<T>& t);  // never receives gradient
  Var<T> constant(Tensor<T> t);
  Var<T> constant(Shape shape, std::vector<T> values);

  // Rejects non-scalar roots and a second call on the same graph.
  void backward(Var<T> loss);

  const Shape& shape(std::uint32_t id) const { return nodes_[id].out.shape; }
  std::span<const T> value(std::uint32_t id) const;
  // Gradient of an interior node after backward(); empty if never reached.
  std::span<const T> grad(std::uint32_t id) const { return nodes_[id].grad; }
  OpKind kind(std::uint32_t id) const { return nodes_[id].kind; }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const {
    return nodes_[id].inputs;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var<T> push(OpKind kind, std::vector<std::uint32_t> inputs, Shape shape,
              std::vector<T> values, BackwardFn fn);
  std::span<T> grad_buffer(std::uint32_t id);
  std::span<const T> upstream(std::uint32_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<std::uint32_t> inputs;
    Tensor<T> out;
    const Tensor<T>* external = nullptr;
    Tensor<T>* sink = nullptr;  // receives gradient for trainable leaves
    bool requires_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  bool record_;
  bool differentiated_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::uint32_t> bound_;
};

// ---- operations -----------------------------------------------------------

// a[..., K] x b[K, N] -> [..., N]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b);
// a[M, K] x b[N, K]^T -> [M, N]
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
// a[B, M, K] x b[B, K, N] (or b[B, N, K] transposed) -> [B, M, N]
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b);

template <class T>
Var<T> add(Var<T> a, Var<T> b);
// bias shape must equal the trailing dimensions of a.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias);
template <class T>
Var<T> scale(Var<T> a, T factor);
// a / s with s a single-element tensor.
template <class T>
Var<T> div_scalar(Var<T> a, Var<T> s);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> sum(Var<T> a);

// Softmax over the last dimension, max-shifted.
template <class T>
Var<T> softmax_rows(Var<T> a);
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> x);

// Selects slabs along dim 0: x[N, ...] -> [rows.size(), ...].
template <class T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
// x[B, L, W] -> [B, W] at sequence position `pos`.
template <class T>
Var<T> select_position(Var<T> x, std::size_t pos);
template <class T>
Var<T> concat_rows(std::span<const Var<T>> xs);
template <class T>
Var<T> reshape(Var<T> x, Shape shape);
// [B, L, H*D] -> [B*H, L, D] and back.
template <class T>
Var<T> split_heads(Var<T> x, std::size_t heads);
template <class T>
Var<T> merge_heads(Var<T> x, std::size_t heads);
// 2-D transpose.
template <class T>
Var<T> transpose(Var<T> x);
// Flat-index gather -> [indices.size()].
template <class T>
Var<T> pick(Var<T> x, std::span<const std::size_t> flat_indices);
// Row-wise L2 normalization over the last dimension. Throws
// DegenerateEmbeddingError on a zero row.
template <class T>
Var<T> l2_normalize_rows(Var<T> x);

// Lower bound applied to probabilities inside every log.
inline constexpr double kLogFloor = 1e-12;

// sum_i weight_i * -log(max(softmax(logits_i)[target_i], floor)).
// Rows with weight 0 are masked out.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets,
                     std::span<const T> weights);
// sum_i -sum_k target_ik * log(max(softmax(logits_i)_k, floor)).
// Gradient flows into `target` too unless it is detached.
template <class T>
Var<T> soft_cross_entropy(Var<T> logits, Var<T> target);

// Same values, no gradient path to the input.
template <class T>
Var<T> detach(Var<T> x);

// ---- standalone numerics --------------------------------------------------

// Temperature-scaled softmax of a score vector. Throws NumericDomainError on
// non-finite scores or tau <= 0.
std::vector<double> softmax(std::span<const double> scores, double tau);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar function of one tensor, evaluated in 64-bit.
// eps must lie in [1e-6, 1e-3]; a non-finite f(point) is rejected.
using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;
double grad_check(const ScalarFn& f, const Tensor<double>& point, double eps);

// Same measure over a set of parameter tensors that a closure reads directly.
// At most `max_coords` coordinates per tensor are probed (chosen by `seed`).
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
};
using LossFn = std::function<Var<double>(Graph<double>&)>;
GradCheckReport grad_check_parameters(const LossFn& f,
                                      std::span<Tensor<double>* const> params,
                                      std::span<const std::string> names,
                                      double eps, std::size_t max_coords,
                                      std::uint64_t seed);

}  // namespace duet::ad
