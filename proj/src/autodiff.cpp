#include "duet/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

namespace duet::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kDetach: return "detach";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kBatchMatMul: return "bmm";
    case OpKind::kAdd: return "add";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kScale: return "scale";
    case OpKind::kDivScalar: return "div_scalar";
    case OpKind::kMul: return "mul";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmaxRows: return "softmax_rows";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSelectPosition: return "select_position";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSplitHeads: return "split_heads";
    case OpKind::kMergeHeads: return "merge_heads";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kPick: return "pick";
    case OpKind::kL2Normalize: return "l2_normalize_rows";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kSoftCrossEntropy: return "soft_cross_entropy";
  }
  return "?";
}

// ---- Tensor / Var ---------------------------------------------------------

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> v, bool rg)
    : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape s, bool rg) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<T>(n, T(0)), rg);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T v, bool rg) {
  return Tensor(Shape{1}, std::vector<T>{v}, rg);
}

template <class T>
const Shape& Var<T>::shape() const {
  return graph->shape(id);
}

template <class T>
std::span<const T> Var<T>::values() const {
  return graph->value(id);
}

template <class T>
T Var<T>::item() const {
  auto v = values();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return v[0];
}

template <class T>
bool Var<T>::requires_grad() const {
  return graph->requires_grad(id);
}

// ---- Graph ----------------------------------------------------------------

template <class T>
std::span<const T> Graph<T>::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? std::span<const T>(n.external->values)
                    : std::span<const T>(n.out.values);
}

template <class T>
Var<T> Graph<T>::parameter(Tensor<T>& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) {
    if (t.requires_grad && record_ && nodes_[it->second].sink == nullptr) {
      throw std::logic_error("tensor bound read-only before trainable binding");
    }
    return {this, it->second};
  }
  Node n;
  n.kind = OpKind::kParameter;
  n.out.shape = t.shape;
  n.external = &t;
  if (record_ && t.requires_grad) {
    n.sink = &t;
    n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  bound_.emplace(&t, id);
  return {this, id};
}

template <class T>
Var<T> Graph<T>::parameter(const Tensor<T>& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) return {this, it->second};
  Node n;
  n.kind = OpKind::kParameter;
  n.out.shape = t.shape;
  n.external = &t;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  bound_.emplace(&t, id);
  return {this, id};
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> t) {
  Node n;
  n.kind = OpKind::kConstant;
  n.out = std::move(t);
  n.out.requires_grad = false;
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::constant(Shape shape, std::vector<T> values) {
  return constant(Tensor<T>(std::move(shape), std::move(values)));
}

template <class T>
Var<T> Graph<T>::push(OpKind kind, std::vector<std::uint32_t> inputs, Shape shape,
                      std::vector<T> values, BackwardFn fn) {
  Node n;
  n.kind = kind;
  bool live = false;
  if (record_ && kind != OpKind::kDetach) {
    for (auto in : inputs) live = live || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.out.shape = std::move(shape);
  n.out.values = std::move(values);
  n.requires_grad = live;
  if (live) n.backward = std::move(fn);
  if (nodes_.capacity() == nodes_.size()) nodes_.reserve(nodes_.size() * 2 + 64);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
std::span<T> Graph<T>::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(numel(n.out.shape), T(0));
  return n.grad;
}

template <class T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw std::invalid_argument("loss belongs to another graph");
  if (!record_) throw std::logic_error("backward on a non-recording graph");
  if (differentiated_) {
    throw std::logic_error("backward already ran on this graph; build a new graph per step");
  }
  if (numel(nodes_[loss.id].out.shape) != 1) {
    throw ShapeError("backward root must be scalar, got " +
                     shape_str(nodes_[loss.id].out.shape));
  }
  differentiated_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = T(1);
  for (std::int64_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
    if (n.sink) {
      auto& g = n.sink->grad;
      if (g.empty()) g.assign(n.grad.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

template <class T>
Graph<T>& same_graph(Var<T> a, Var<T> b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw std::invalid_argument("operands belong to different graphs");
  }
  return *a.graph;
}

template <class T>
std::vector<T> to_vec(std::span<const T> s) {
  return {s.begin(), s.end()};
}

std::size_t last_dim(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": scalar input has no last dimension");
  return s.back();
}

#if defined(__AVX512F__)
inline constexpr std::size_t kPacketBytes = 64;
inline constexpr std::size_t kTileRows = 8;
#else
inline constexpr std::size_t kPacketBytes = 32;
inline constexpr std::size_t kTileRows = 6;
#endif

template <class T>
struct Packet;
template <>
struct Packet<float> {
  typedef float type __attribute__((vector_size(kPacketBytes)));
};
template <>
struct Packet<double> {
  typedef double type __attribute__((vector_size(kPacketBytes)));
};

// C[M,N] = A[M,K] * B where B(k, n) = b[k * sk + n * sn].
// Every output element is the same k-ordered accumulation no matter where its
// row sits in A, so results do not depend on batch composition or order.
template <class T>
void row_gemm(const T* a, const T* b, std::size_t sk, std::size_t sn, T* c, std::size_t M,
              std::size_t K, std::size_t N) {
  using vec = typename Packet<T>::type;
  constexpr std::size_t L = sizeof(vec) / sizeof(T);
  constexpr std::size_t R = kTileRows, P = 2, C = P * L;
  const std::size_t Np = (N + C - 1) / C * C;
  std::vector<vec> packed(K * Np / L);
  T* bp = reinterpret_cast<T*>(packed.data());
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t n = 0; n < N; ++n) bp[k * Np + n] = b[k * sk + n * sn];
    for (std::size_t n = N; n < Np; ++n) bp[k * Np + n] = T(0);
  }
  std::vector<T> panel(K * R);  // A rows of one tile, k-major, zero padded
  alignas(sizeof(vec)) T out[R * C];
  for (std::size_t i0 = 0; i0 < M; i0 += R) {
    const std::size_t rows = std::min(R, M - i0);
    const T* ar = a + i0 * K;
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t r = 0; r < R; ++r) panel[k * R + r] = r < rows ? ar[r * K + k] : T(0);
    }
    const T* ap = panel.data();
    for (std::size_t n0 = 0; n0 < Np; n0 += C) {
      vec acc[R][P] = {};
      const vec* bk = packed.data() + n0 / L;
      for (std::size_t k = 0; k < K; ++k, bk += Np / L) {
        vec bv[P];
#pragma GCC unroll 4
        for (std::size_t p = 0; p < P; ++p) bv[p] = bk[p];
#pragma GCC unroll 16
        for (std::size_t r = 0; r < R; ++r) {
          const T av = ap[k * R + r];
#pragma GCC unroll 4
          for (std::size_t p = 0; p < P; ++p) acc[r][p] += av * bv[p];
        }
      }
      const std::size_t cols = std::min(C, N - n0);
      if (cols == C) {
        for (std::size_t r = 0; r < rows; ++r) {
          std::memcpy(c + (i0 + r) * N + n0, &acc[r][0], C * sizeof(T));
        }
      } else {
        std::memcpy(out, acc, sizeof(out));
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy(out + r * C, out + r * C + cols, c + (i0 + r) * N + n0);
        }
      }
    }
  }
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sb.size() != 2 || sa.empty() || sa.back() != sb[0]) {
    throw ShapeError("matmul: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t K = sb[0], N = sb[1], M = numel(sa) / K;
  std::vector<T> out(M * N);
  row_gemm(a.values().data(), b.values().data(), N, 1, out.data(), M, K, N);
  Shape so = sa;
  so.back() = N;
  const auto ia = a.id, ib = b.id;
  return g.push(OpKind::kMatMul, {ia, ib}, so, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  CMap<T> gc(gr.upstream(self).data(), M, N);
                  if (gr.requires_grad(ia)) {
                    MMap<T>(gr.grad_buffer(ia).data(), M, K).noalias() +=
                        gc * CMap<T>(gr.value(ib).data(), K, N).transpose();
                  }
                  if (gr.requires_grad(ib)) {
                    MMap<T>(gr.grad_buffer(ib).data(), K, N).noalias() +=
                        CMap<T>(gr.value(ia).data(), M, K).transpose() * gc;
                  }
                });
}

template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) {
    throw ShapeError("matmul_nt: " + shape_str(sa) + " x " + shape_str(sb) + "^T");
  }
  const std::size_t M = sa[0], K = sa[1], N = sb[0];
  std::vector<T> out(M * N);
  row_gemm(a.values().data(), b.values().data(), 1, K, out.data(), M, K, N);
  const auto ia = a.id, ib = b.id;
  return g.push(OpKind::kMatMulNT, {ia, ib}, Shape{M, N}, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  CMap<T> gc(gr.upstream(self).data(), M, N);
                  if (gr.requires_grad(ia)) {
                    MMap<T>(gr.grad_buffer(ia).data(), M, K).noalias() +=
                        gc * CMap<T>(gr.value(ib).data(), N, K);
                  }
                  if (gr.requires_grad(ib)) {
                    MMap<T>(gr.grad_buffer(ib).data(), N, K).noalias() +=
                        gc.transpose() * CMap<T>(gr.value(ia).data(), M, K);
                  }
                });
}

template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  Graph<T>& g = same_graph(a, b);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
    throw ShapeError("bmm: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t B = sa[0], M = sa[1], K = sa[2];
  const std::size_t N = transpose_b ? sb[1] : sb[2];
  if ((transpose_b ? sb[2] : sb[1]) != K) {
    throw ShapeError("bmm inner dimension: " + shape_str(sa) + " x " + shape_str(sb));
  }
  std::vector<T> out(B * M * N);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (std::size_t i = 0; i < B; ++i) {
    CMap<T> A(pa + i * M * K, M, K);
    MMap<T> C(out.data() + i * M * N, M, N);
    if (transpose_b) {
      C.noalias() = A.lazyProduct(CMap<T>(pb + i * N * K, N, K).transpose());
    } else {
      C.noalias() = A.lazyProduct(CMap<T>(pb + i * K * N, K, N));
    }
  }
  const auto ia = a.id, ib = b.id;
  return g.push(
      OpKind::kBatchMatMul, {ia, ib}, Shape{B, M, N}, std::move(out),
      [=](Graph<T>& gr, std::uint32_t self) {
        const T* gc = gr.upstream(self).data();
        const T* va = gr.value(ia).data();
        const T* vb = gr.value(ib).data();
        T* ga = gr.requires_grad(ia) ? gr.grad_buffer(ia).data() : nullptr;
        T* gb = gr.requires_grad(ib) ? gr.grad_buffer(ib).data() : nullptr;
        for (std::size_t i = 0; i < B; ++i) {
          CMap<T> G(gc + i * M * N, M, N);
          CMap<T> A(va + i * M * K, M, K);
          if (transpose_b) {
            CMap<T> Bt(vb + i * N * K, N, K);  // C = A Bt^T
            if (ga) MMap<T>(ga + i * M * K, M, K).noalias() += G.lazyProduct(Bt);
            if (gb) MMap<T>(gb + i * N * K, N, K).noalias() += G.transpose().lazyProduct(A);
          } else {
            CMap<T> Bm(vb + i * K * N, K, N);
            if (ga) MMap<T>(ga + i * M * K, M, K).noalias() += G.lazyProduct(Bm.transpose());
            if (gb) MMap<T>(gb + i * K * N, K, N).noalias() += A.transpose().lazyProduct(G);
          }
        }
      });
}

// ---- elementwise ----------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  const Shape sa = a.shape();
  if (sa != b.shape()) throw ShapeError("add: " + shape_str(sa) + " + " + shape_str(b.shape()));
  auto va = a.values();
  auto vb = b.values();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  const auto ia = a.id, ib = b.id;
  return g.push(OpKind::kAdd, {ia, ib}, sa, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  for (auto in : {ia, ib}) {
                    if (!gr.requires_grad(in)) continue;
                    auto gi = gr.grad_buffer(in);
                    for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i];
                  }
                });
}

template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  Graph<T>& g = same_graph(a, bias);
  const Shape sa = a.shape();
  const Shape sb = bias.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw ShapeError("add_bias: " + shape_str(sa) + " + " + shape_str(sb));
  }
  auto va = a.values();
  auto vb = bias.values();
  const std::size_t S = vb.size(), R = va.size() / S;
  std::vector<T> out(va.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < S; ++j) out[r * S + j] = va[r * S + j] + vb[j];
  const auto ia = a.id, ib = bias.id;
  return g.push(OpKind::kAddBias, {ia, ib}, sa, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  if (gr.requires_grad(ia)) {
                    auto gi = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i];
                  }
                  if (gr.requires_grad(ib)) {
                    auto gb = gr.grad_buffer(ib);
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t j = 0; j < S; ++j) gb[j] += gc[r * S + j];
                  }
                });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Graph<T>& g = *a.graph;
  auto va = a.values();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
  const auto ia = a.id;
  return g.push(OpKind::kScale, {ia}, a.shape(), std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ia);
                  for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i] * factor;
                });
}

template <class T>
Var<T> div_scalar(Var<T> a, Var<T> s) {
  Graph<T>& g = same_graph(a, s);
  if (s.size() != 1) throw ShapeError("div_scalar: divisor must have one element");
  const T d = s.item();
  if (!(d != T(0)) || !std::isfinite(d)) throw NumericDomainError("div_scalar: divisor is zero or non-finite");
  auto va = a.values();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] / d;
  const auto ia = a.id, is = s.id;
  return g.push(OpKind::kDivScalar, {ia, is}, a.shape(), std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  if (gr.requires_grad(ia)) {
                    auto gi = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i] / d;
                  }
                  if (gr.requires_grad(is)) {
                    auto xa = gr.value(ia);
                    double acc = 0.0;
                    for (std::size_t i = 0; i < gc.size(); ++i)
                      acc += static_cast<double>(gc[i]) * xa[i];
                    gr.grad_buffer(is)[0] += static_cast<T>(-acc / (double(d) * d));
                  }
                });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = same_graph(a, b);
  const Shape sa = a.shape();
  if (sa != b.shape()) throw ShapeError("mul: " + shape_str(sa) + " * " + shape_str(b.shape()));
  auto va = a.values();
  auto vb = b.values();
  std::vector<T> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const auto ia = a.id, ib = b.id;
  return g.push(OpKind::kMul, {ia, ib}, sa, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto xa = gr.value(ia);
                  auto xb = gr.value(ib);
                  if (gr.requires_grad(ia)) {
                    auto gi = gr.grad_buffer(ia);
                    for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i] * xb[i];
                  }
                  if (gr.requires_grad(ib)) {
                    auto gi = gr.grad_buffer(ib);
                    for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i] * xa[i];
                  }
                });
}

template <class T>
Var<T> sum(Var<T> a) {
  Graph<T>& g = *a.graph;
  double acc = 0.0;
  for (T v : a.values()) acc += v;
  const auto ia = a.id;
  return g.push(OpKind::kSum, {ia}, Shape{1}, {static_cast<T>(acc)},
                [=](Graph<T>& gr, std::uint32_t self) {
                  const T gc = gr.upstream(self)[0];
                  for (auto& x : gr.grad_buffer(ia)) x += gc;
                });
}

// ---- normalization / activations -----------------------------------------

namespace {

template <class T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const T e = std::exp(in[j] - mx);
    out[j] = e;
    z += e;
  }
  const T inv = static_cast<T>(1.0 / z);
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

// log-softmax of one row in double precision.
template <class T>
void log_softmax_row(const T* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, double(in[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(double(in[j]) - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < n; ++j) out[j] = double(in[j]) - lz;
}

}  // namespace

template <class T>
Var<T> softmax_rows(Var<T> a) {
  Graph<T>& g = *a.graph;
  const Shape sa = a.shape();
  const std::size_t C = last_dim(sa, "softmax_rows");
  auto va = a.values();
  const std::size_t R = va.size() / C;
  std::vector<T> out(va.size());
  for (std::size_t r = 0; r < R; ++r) softmax_row(va.data() + r * C, out.data() + r * C, C);
  const auto ia = a.id;
  return g.push(OpKind::kSoftmaxRows, {ia}, sa, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto y = gr.value(self);
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ia);
                  for (std::size_t r = 0; r < R; ++r) {
                    const std::size_t o = r * C;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < C; ++j) dot += double(gc[o + j]) * y[o + j];
                    for (std::size_t j = 0; j < C; ++j)
                      gi[o + j] += static_cast<T>(y[o + j] * (gc[o + j] - dot));
                  }
                });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Graph<T>& g = same_graph(x, gamma);
  same_graph(x, beta);
  const Shape sx = x.shape();
  const std::size_t W = last_dim(sx, "layer_norm");
  if (gamma.size() != W || beta.size() != W) throw ShapeError("layer_norm: affine size mismatch");
  auto vx = x.values();
  auto vg = gamma.values();
  auto vb = beta.values();
  const std::size_t R = vx.size() / W;
  std::vector<T> out(vx.size());
  std::vector<T> xhat(vx.size());
  std::vector<T> rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = vx.data() + r * W;
    double mean = 0.0;
    for (std::size_t j = 0; j < W; ++j) mean += row[j];
    mean /= double(W);
    double var = 0.0;
    for (std::size_t j = 0; j < W; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= double(W);
    const double rs = 1.0 / std::sqrt(var + double(eps));
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < W; ++j) {
      const T xh = static_cast<T>((row[j] - mean) * rs);
      xhat[r * W + j] = xh;
      out[r * W + j] = xh * vg[j] + vb[j];
    }
  }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  return g.push(OpKind::kLayerNorm, {ix, ig, ib}, sx, std::move(out),
                [=, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& gr,
                                                                    std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gam = gr.value(ig);
                  if (gr.requires_grad(ig)) {
                    auto gg = gr.grad_buffer(ig);
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t j = 0; j < W; ++j) gg[j] += gc[r * W + j] * xhat[r * W + j];
                  }
                  if (gr.requires_grad(ib)) {
                    auto gb = gr.grad_buffer(ib);
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t j = 0; j < W; ++j) gb[j] += gc[r * W + j];
                  }
                  if (gr.requires_grad(ix)) {
                    auto gx = gr.grad_buffer(ix);
                    for (std::size_t r = 0; r < R; ++r) {
                      const std::size_t o = r * W;
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < W; ++j) {
                        const double d = double(gc[o + j]) * gam[j];
                        m1 += d;
                        m2 += d * xhat[o + j];
                      }
                      m1 /= double(W);
                      m2 /= double(W);
                      for (std::size_t j = 0; j < W; ++j) {
                        const double d = double(gc[o + j]) * gam[j];
                        gx[o + j] += static_cast<T>(rstd[r] * (d - m1 - xhat[o + j] * m2));
                      }
                    }
                  }
                });
}

template <class T>
Var<T> gelu(Var<T> x) {
  Graph<T>& g = *x.graph;
  auto vx = x.values();
  std::vector<T> out(vx.size());
  // Phi(x) is kept for the backward pass.
  auto cdf = std::make_shared<std::vector<T>>(vx.size());
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  for (std::size_t i = 0; i < vx.size(); ++i) {
    const T c = T(0.5) * (T(1) + std::erf(vx[i] * inv_sqrt2));
    (*cdf)[i] = c;
    out[i] = vx[i] * c;
  }
  const auto ix = x.id;
  return g.push(OpKind::kGelu, {ix}, x.shape(), std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  const T inv_sqrt2pi = static_cast<T>(0.39894228040143267794);
                  auto gc = gr.upstream(self);
                  auto xv = gr.value(ix);
                  auto gi = gr.grad_buffer(ix);
                  const auto& c = *cdf;
                  for (std::size_t i = 0; i < gc.size(); ++i) {
                    const T v = xv[i];
                    gi[i] += gc[i] * (c[i] + v * std::exp(T(-0.5) * v * v) * inv_sqrt2pi);
                  }
                });
}

// ---- indexing / layout ----------------------------------------------------

template <class T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.empty()) throw ShapeError("gather_rows: scalar input");
  const std::size_t N = sx[0], S = numel(sx) / N;
  auto vx = x.values();
  std::vector<T> out(rows.size() * S);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= N) {
      throw ShapeError("gather_rows: index " + std::to_string(rows[r]) + " out of range " +
                       std::to_string(N));
    }
    std::copy_n(vx.data() + rows[r] * S, S, out.data() + r * S);
  }
  Shape so = sx;
  so[0] = rows.size();
  const auto ix = x.id;
  return g.push(OpKind::kGatherRows, {ix}, so, std::move(out),
                [=, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
                    Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t r = 0; r < idx.size(); ++r) {
                    T* dst = gi.data() + idx[r] * S;
                    const T* src = gc.data() + r * S;
                    for (std::size_t j = 0; j < S; ++j) dst[j] += src[j];
                  }
                });
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.empty() || begin > end || end > sx[0]) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + shape_str(sx));
  }
  const std::size_t S = numel(sx) / sx[0];
  auto vx = x.values();
  std::vector<T> out(vx.begin() + begin * S, vx.begin() + end * S);
  Shape so = sx;
  so[0] = end - begin;
  const auto ix = x.id;
  return g.push(OpKind::kSliceRows, {ix}, so, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t i = 0; i < gc.size(); ++i) gi[begin * S + i] += gc[i];
                });
}

template <class T>
Var<T> select_position(Var<T> x, std::size_t pos) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.size() != 3 || pos >= sx[1]) {
    throw ShapeError("select_position " + std::to_string(pos) + " of " + shape_str(sx));
  }
  const std::size_t B = sx[0], L = sx[1], W = sx[2];
  auto vx = x.values();
  std::vector<T> out(B * W);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(vx.data() + (b * L + pos) * W, W, out.data() + b * W);
  const auto ix = x.id;
  return g.push(OpKind::kSelectPosition, {ix}, Shape{B, W}, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < W; ++j) gi[(b * L + pos) * W + j] += gc[b * W + j];
                });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  Graph<T>& g = *xs[0].graph;
  Shape so = xs[0].shape();
  if (so.empty()) throw ShapeError("concat_rows: scalar input");
  const std::size_t S = numel(so) / so[0];
  std::size_t rows = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& v : xs) {
    same_graph(xs[0], v);
    const Shape& s = v.shape();
    if (s.size() != so.size() || !std::equal(s.begin() + 1, s.end(), so.begin() + 1)) {
      throw ShapeError("concat_rows: " + shape_str(s) + " vs " + shape_str(so));
    }
    offsets.push_back(rows * S);
    rows += s[0];
    ids.push_back(v.id);
  }
  std::vector<T> out;
  out.reserve(rows * S);
  for (const auto& v : xs) {
    auto vv = v.values();
    out.insert(out.end(), vv.begin(), vv.end());
  }
  so[0] = rows;
  return g.push(OpKind::kConcatRows, ids, so, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!gr.requires_grad(ids[k])) continue;
                    auto gi = gr.grad_buffer(ids[k]);
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gc[offsets[k] + i];
                  }
                });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto ix = x.id;
  return g.push(OpKind::kReshape, {ix}, std::move(shape), to_vec(x.values()),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t i = 0; i < gc.size(); ++i) gi[i] += gc[i];
                });
}

namespace {

// [B, L, H*D] <-> [B*H, L, D]; forward=true maps x(b,l,h*D+d) -> y(b*H+h,l,d).
template <class T>
void permute_heads(const T* src, T* dst, std::size_t B, std::size_t L, std::size_t H,
                   std::size_t D, bool split, bool accumulate) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t merged = (b * L + l) * H * D + h * D;
        const std::size_t head = ((b * H + h) * L + l) * D;
        const T* s = src + (split ? merged : head);
        T* d = dst + (split ? head : merged);
        if (accumulate) {
          for (std::size_t k = 0; k < D; ++k) d[k] += s[k];
        } else {
          std::copy_n(s, D, d);
        }
      }
}

}  // namespace

template <class T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.size() != 3 || heads == 0 || sx[2] % heads != 0) {
    throw ShapeError("split_heads: " + shape_str(sx) + " into " + std::to_string(heads));
  }
  const std::size_t B = sx[0], L = sx[1], H = heads, D = sx[2] / heads;
  std::vector<T> out(x.size());
  permute_heads(x.values().data(), out.data(), B, L, H, D, true, false);
  const auto ix = x.id;
  return g.push(OpKind::kSplitHeads, {ix}, Shape{B * H, L, D}, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  permute_heads(gr.upstream(self).data(), gr.grad_buffer(ix).data(), B, L, H,
                                D, false, true);
                });
}

template <class T>
Var<T> merge_heads(Var<T> x, std::size_t heads) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.size() != 3 || heads == 0 || sx[0] % heads != 0) {
    throw ShapeError("merge_heads: " + shape_str(sx) + " from " + std::to_string(heads));
  }
  const std::size_t H = heads, B = sx[0] / H, L = sx[1], D = sx[2];
  std::vector<T> out(x.size());
  permute_heads(x.values().data(), out.data(), B, L, H, D, false, false);
  const auto ix = x.id;
  return g.push(OpKind::kMergeHeads, {ix}, Shape{B, L, H * D}, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  permute_heads(gr.upstream(self).data(), gr.grad_buffer(ix).data(), B, L, H,
                                D, true, true);
                });
}

template <class T>
Var<T> transpose(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  if (sx.size() != 2) throw ShapeError("transpose: " + shape_str(sx));
  const std::size_t R = sx[0], C = sx[1];
  auto vx = x.values();
  std::vector<T> out(vx.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = vx[r * C + c];
  const auto ix = x.id;
  return g.push(OpKind::kTranspose, {ix}, Shape{C, R}, std::move(out),
                [=](Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) gi[r * C + c] += gc[c * R + r];
                });
}

template <class T>
Var<T> pick(Var<T> x, std::span<const std::size_t> flat_indices) {
  Graph<T>& g = *x.graph;
  auto vx = x.values();
  std::vector<T> out(flat_indices.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flat_indices[i] >= vx.size()) throw ShapeError("pick: index out of range");
    out[i] = vx[flat_indices[i]];
  }
  const auto ix = x.id;
  Shape so{out.size()};
  return g.push(OpKind::kPick, {ix}, std::move(so), std::move(out),
                [=, idx = std::vector<std::size_t>(flat_indices.begin(), flat_indices.end())](
                    Graph<T>& gr, std::uint32_t self) {
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += gc[i];
                });
}

template <class T>
Var<T> l2_normalize_rows(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Shape sx = x.shape();
  const std::size_t W = last_dim(sx, "l2_normalize_rows");
  auto vx = x.values();
  const std::size_t R = vx.size() / W;
  std::vector<T> out(vx.size());
  std::vector<T> inv_norm(R);
  for (std::size_t r = 0; r < R; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < W; ++j) ss += double(vx[r * W + j]) * vx[r * W + j];
    const double n = std::sqrt(ss);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw DegenerateEmbeddingError("l2_normalize_rows: row " + std::to_string(r) +
                                     " has zero or non-finite norm");
    }
    inv_norm[r] = static_cast<T>(1.0 / n);
    for (std::size_t j = 0; j < W; ++j) out[r * W + j] = static_cast<T>(vx[r * W + j] / n);
  }
  const auto ix = x.id;
  return g.push(OpKind::kL2Normalize, {ix}, sx, std::move(out),
                [=, inv_norm = std::move(inv_norm)](Graph<T>& gr, std::uint32_t self) {
                  auto y = gr.value(self);
                  auto gc = gr.upstream(self);
                  auto gi = gr.grad_buffer(ix);
                  for (std::size_t r = 0; r < R; ++r) {
                    const std::size_t o = r * W;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < W; ++j) dot += double(gc[o + j]) * y[o + j];
                    for (std::size_t j = 0; j < W; ++j)
                      gi[o + j] += static_cast<T>((gc[o + j] - y[o + j] * dot) * inv_norm[r]);
                  }
                });
}

// ---- losses ---------------------------------------------------------------

template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const T> weights) {
  Graph<T>& g = *logits.graph;
  const Shape sl = logits.shape();
  if (sl.size() != 2) throw ShapeError("cross_entropy: logits must be 2-D, got " + shape_str(sl));
  const std::size_t N = sl[0], C = sl[1];
  if (targets.size() != N || weights.size() != N) {
    throw ShapeError("cross_entropy: targets/weights length must equal rows");
  }
  const double log_floor = std::log(kLogFloor);
  auto vl = logits.values();
  std::vector<double> lp(C);
  std::vector<T> probs(N * C);
  std::vector<std::uint8_t> clamped(N, 0);
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= C) {
      throw ShapeError("cross_entropy: target out of range");
    }
    if (weights[i] == T(0)) continue;
    log_softmax_row(vl.data() + i * C, lp.data(), C);
    double l = lp[static_cast<std::size_t>(targets[i])];
    if (l < log_floor) {
      l = log_floor;
      clamped[i] = 1;
    }
    loss -= double(weights[i]) * l;
    for (std::size_t j = 0; j < C; ++j) probs[i * C + j] = static_cast<T>(std::exp(lp[j]));
  }
  const auto il = logits.id;
  return g.push(OpKind::kCrossEntropy, {il}, Shape{1}, {static_cast<T>(loss)},
                [=, tg = std::vector<int>(targets.begin(), targets.end()),
                 w = std::vector<T>(weights.begin(), weights.end()), probs = std::move(probs),
                 clamped = std::move(clamped)](Graph<T>& gr, std::uint32_t self) {
                  const T gc = gr.upstream(self)[0];
                  auto gi = gr.grad_buffer(il);
                  for (std::size_t i = 0; i < N; ++i) {
                    if (w[i] == T(0) || clamped[i]) continue;
                    const T s = gc * w[i];
                    for (std::size_t j = 0; j < C; ++j) gi[i * C + j] += s * probs[i * C + j];
                    gi[i * C + static_cast<std::size_t>(tg[i])] -= s;
                  }
                });
}

template <class T>
Var<T> soft_cross_entropy(Var<T> logits, Var<T> target) {
  Graph<T>& g = same_graph(logits, target);
  const Shape sl = logits.shape();
  if (sl.size() != 2 || target.shape() != sl) {
    throw ShapeError("soft_cross_entropy: " + shape_str(sl) + " vs " + shape_str(target.shape()));
  }
  const std::size_t N = sl[0], C = sl[1];
  const double log_floor = std::log(kLogFloor);
  auto vl = logits.values();
  auto vq = target.values();
  std::vector<double> lp(C);
  std::vector<T> logp(N * C);
  std::vector<T> probs(N * C);
  std::vector<std::uint8_t> clamped(N * C, 0);
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    log_softmax_row(vl.data() + i * C, lp.data(), C);
    for (std::size_t k = 0; k < C; ++k) {
      probs[i * C + k] = static_cast<T>(std::exp(lp[k]));
      double l = lp[k];
      if (l < log_floor) {
        l = log_floor;
        clamped[i * C + k] = 1;
      }
      logp[i * C + k] = static_cast<T>(l);
      loss -= double(vq[i * C + k]) * l;
    }
  }
  const auto il = logits.id, iq = target.id;
  return g.push(OpKind::kSoftCrossEntropy, {il, iq}, Shape{1}, {static_cast<T>(loss)},
                [=, logp = std::move(logp), probs = std::move(probs),
                 clamped = std::move(clamped)](Graph<T>& gr, std::uint32_t self) {
                  const T gc = gr.upstream(self)[0];
                  auto q = gr.value(iq);
                  if (gr.requires_grad(il)) {
                    auto gi = gr.grad_buffer(il);
                    for (std::size_t i = 0; i < N; ++i) {
                      double qsum = 0.0;
                      for (std::size_t k = 0; k < C; ++k)
                        if (!clamped[i * C + k]) qsum += q[i * C + k];
                      for (std::size_t j = 0; j < C; ++j) {
                        double d = probs[i * C + j] * qsum;
                        if (!clamped[i * C + j]) d -= q[i * C + j];
                        gi[i * C + j] += static_cast<T>(gc * d);
                      }
                    }
                  }
                  if (gr.requires_grad(iq)) {
                    auto gt = gr.grad_buffer(iq);
                    for (std::size_t i = 0; i < N * C; ++i) gt[i] -= gc * logp[i];
                  }
                });
}

template <class T>
Var<T> detach(Var<T> x) {
  Graph<T>& g = *x.graph;
  return g.push(OpKind::kDetach, {x.id}, x.shape(), to_vec(x.values()), nullptr);
}

// ---- standalone numerics --------------------------------------------------

std::vector<double> softmax(std::span<const double> scores, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw NumericDomainError("softmax: tau must be > 0");
  if (scores.empty()) throw ShapeError("softmax: empty score vector");
  std::vector<double> scaled(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericDomainError("softmax: non-finite score");
    scaled[i] = scores[i] / tau;
  }
  std::vector<double> out(scores.size());
  softmax_row(scaled.data(), out.data(), scaled.size());
  return out;
}

namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  }
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor<double>& point, double eps) {
  check_eps(eps);
  Tensor<double> x = point;
  x.requires_grad = true;
  x.grad.clear();
  {
    Graph<double> g;
    auto y = f(g, g.parameter(x));
    if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericDomainError("grad_check: f(point) is not finite");
    g.backward(y);
  }
  std::vector<double> analytic = x.grad.empty() ? std::vector<double>(x.size(), 0.0) : x.grad;
  auto eval = [&] {
    Graph<double> g(false);
    return f(g, g.parameter(x)).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.values[i];
    x.values[i] = orig + eps;
    const double fp = eval();
    x.values[i] = orig - eps;
    const double fm = eval();
    x.values[i] = orig;
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

GradCheckReport grad_check_parameters(const LossFn& f, std::span<Tensor<double>* const> params,
                                      std::span<const std::string> names, double eps,
                                      std::size_t max_coords, std::uint64_t seed) {
  check_eps(eps);
  std::vector<bool> was_trainable;
  for (auto* p : params) {
    was_trainable.push_back(p->requires_grad);
    p->requires_grad = true;
    p->grad.clear();
  }
  {
    Graph<double> g;
    auto y = f(g);
    if (y.size() != 1) throw ShapeError("grad_check: loss must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericDomainError("grad_check: loss is not finite");
    g.backward(y);
  }
  auto eval = [&] {
    Graph<double> g(false);
    return f(g).item();
  };
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<double>& p = *params[t];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (auto c : coords) {
      const double analytic = p.grad.empty() ? 0.0 : p.grad[c];
      const double orig = p.values[c];
      p.values[c] = orig + eps;
      const double fp = eval();
      p.values[c] = orig - eps;
      const double fm = eval();
      p.values[c] = orig;
      const double err = rel_error(analytic, (fp - fm) / (2.0 * eps));
      ++report.coordinates;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = t < names.size() ? names[t] : std::to_string(t);
      }
    }
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    params[t]->requires_grad = was_trainable[t];
    params[t]->grad.clear();
  }
  return report;
}

// ---- instantiations -------------------------------------------------------

#define DUET_INSTANTIATE(T)                                                   \
  template struct Tensor<T>;                                                     \
  template struct Var<T>;                                                        \
  template class Graph<T>;                                                       \
  template Var<T> matmul(Var<T>, Var<T>);                                        \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                     \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                     \
  template Var<T> add(Var<T>, Var<T>);                                           \
  template Var<T> add_bias(Var<T>, Var<T>);                                      \
  template Var<T> scale(Var<T>, T);                                              \
  template Var<T> div_scalar(Var<T>, Var<T>);                                    \
  template Var<T> mul(Var<T>, Var<T>);                                           \
  template Var<T> sum(Var<T>);                                                   \
  template Var<T> softmax_rows(Var<T>);                                          \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                         \
  template Var<T> gelu(Var<T>);                                                  \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);             \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                  \
  template Var<T> select_position(Var<T>, std::size_t);                          \
  template Var<T> concat_rows(std::span<const Var<T>>);                          \
  template Var<T> reshape(Var<T>, Shape);                                        \
  template Var<T> split_heads(Var<T>, std::size_t);                              \
  template Var<T> merge_heads(Var<T>, std::size_t);                              \
  template Var<T> transpose(Var<T>);                                             \
  template Var<T> pick(Var<T>, std::span<const std::size_t>);                    \
  template Var<T> l2_normalize_rows(Var<T>);                                     \
  template Var<T> cross_entropy(Var<T>, std::span<const int>, std::span<const T>); \
  template Var<T> soft_cross_entropy(Var<T>, Var<T>);                            \
  template Var<T> detach(Var<T>);

DUET_INSTANTIATE(float)
DUET_INSTANTIATE(double)

#undef DUET_INSTANTIATE

}  // namespace duet::ad
