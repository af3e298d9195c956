#include "flowcritic/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace flowcritic {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Const: return "const";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::MatMul: return "matmul";
    case OpKind::Affine: return "affine";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Square: return "square";
    case OpKind::Softplus: return "softplus";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowSum: return "row_sum";
    case OpKind::ColMean: return "col_mean";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::StopGradient: return "stop_gradient";
    case OpKind::Conv2d: return "conv2d";
  }
  return "?";
}

namespace {

std::atomic<std::uint64_t> next_graph_uid{1};

// How the second operand of an elementwise binary op maps onto the first.
enum class Broadcast { Same, Row, Col, Scalar };

std::string describe(const Node& n, std::size_t id) {
  std::string s = std::string(op_name(n.op)) + " node " + std::to_string(id);
  if (!n.label.empty()) s += " (" + n.label + ")";
  return s;
}

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const Node& n, std::size_t id) {
  if (b.shape() == a.shape()) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::Col;
  if (b.size() == 1) return Broadcast::Scalar;
  throw NodeShapeError(describe(n, id) + ": cannot broadcast " + shape_string(b.shape()) +
                           " onto " + shape_string(a.shape()),
                       id, n.label);
}

inline std::size_t bindex(Broadcast k, std::size_t i, std::size_t j, std::size_t cols) {
  switch (k) {
    case Broadcast::Same: return i * cols + j;
    case Broadcast::Row: return j;
    case Broadcast::Col: return i;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

template <typename T>
void require_rank2(const Tensor<T>& t, const Node& n, std::size_t id) {
  if (t.rank() != 2) {
    throw NodeShapeError(describe(n, id) + ": expected rank-2 operand, got " +
                             shape_string(t.shape()),
                         id, n.label);
  }
}

// C += A * B, sequential over k for each output element.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <typename T>
void gemm_tn(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

// Shewchuk's non-overlapping partials: their exact sum is the exact sum of
// the inputs, whatever order they arrive in.
template <typename T>
void add_partial(std::vector<T>& partials, T v) {
  std::size_t used = 0;
  for (T p : partials) {
    if (std::abs(v) < std::abs(p)) std::swap(v, p);
    const T hi = v + p;
    const T lo = p - (hi - v);
    if (lo != T(0)) partials[used++] = lo;
    v = hi;
  }
  partials.resize(used);
  partials.push_back(v);
}

// Correctly rounded value of the partials (round-half-even step from
// Python's math.fsum).
template <typename T>
T round_partials(const std::vector<T>& partials) {
  if (partials.empty()) return T(0);
  std::size_t i = partials.size() - 1;
  T hi = partials[i];
  T lo = 0;
  while (i > 0) {
    const T v = hi;
    const T y = partials[--i];
    hi = v + y;
    const T yr = hi - v;
    lo = y - yr;
    if (lo != T(0)) break;
  }
  if (i > 0 && ((lo < T(0) && partials[i - 1] < T(0)) || (lo > T(0) && partials[i - 1] > T(0)))) {
    const T y = lo * T(2);
    const T v = hi + y;
    if (y == v - hi) hi = v;
  }
  return hi;
}

// Mean of a strided sequence computed from its exact sum, so permuting,
// duplicating or repeating rows leaves a column mean bit-identical.
template <typename T>
T exact_mean(const T* x, std::size_t n, std::size_t stride) {
  std::vector<T> partials;
  for (std::size_t k = 0; k < n; ++k) add_partial(partials, x[k * stride]);
  const T count = static_cast<T>(n);
  const T m = round_partials(partials) / count;
  // One correction step with the exact residual sum - m * n.
  const T prod = m * count;
  add_partial(partials, -prod);
  add_partial(partials, -std::fma(m, count, -prod));
  return m + round_partials(partials) / count;
}

template <typename T>
T softplus_value(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                  const ConvGeometry& g, Tensor<T>& out) {
  const std::size_t hw = g.height * g.width;
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const T* in = x.data().data() + n * g.channels_in * hw;
    T* o = out.data().data() + n * g.channels_out * hw;
    for (std::size_t co = 0; co < g.channels_out; ++co) {
      for (std::ptrdiff_t yy = 0; yy < H; ++yy) {
        for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
          T acc = b[co];
          for (std::size_t ci = 0; ci < g.channels_in; ++ci) {
            for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t sy = yy + ky - 1;
              if (sy < 0 || sy >= H) continue;
              for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t sx = xx + kx - 1;
                if (sx < 0 || sx >= W) continue;
                acc += w[co * g.channels_in * 9 + ci * 9 + static_cast<std::size_t>(ky * 3 + kx)] *
                       in[ci * hw + static_cast<std::size_t>(sy * W + sx)];
              }
            }
          }
          o[co * hw + static_cast<std::size_t>(yy * W + xx)] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                   const ConvGeometry& g, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t hw = g.height * g.width;
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const T* in = x.data().data() + n * g.channels_in * hw;
    const T* go = gout.data().data() + n * g.channels_out * hw;
    for (std::size_t co = 0; co < g.channels_out; ++co) {
      for (std::ptrdiff_t yy = 0; yy < H; ++yy) {
        for (std::ptrdiff_t xx = 0; xx < W; ++xx) {
          const T gv = go[co * hw + static_cast<std::size_t>(yy * W + xx)];
          if (db) (*db)[co] += gv;
          for (std::size_t ci = 0; ci < g.channels_in; ++ci) {
            for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t sy = yy + ky - 1;
              if (sy < 0 || sy >= H) continue;
              for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t sx = xx + kx - 1;
                if (sx < 0 || sx >= W) continue;
                const std::size_t wi = co * g.channels_in * 9 + ci * 9 + static_cast<std::size_t>(ky * 3 + kx);
                const std::size_t xi = ci * hw + static_cast<std::size_t>(sy * W + sx);
                if (dw) (*dw)[wi] += gv * in[xi];
                if (dx) (*dx)[n * g.channels_in * hw + xi] += gv * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph construction

template <typename T>
Graph<T>::Graph() : uid_(next_graph_uid.fetch_add(1)) {}

template <typename T>
void Graph<T>::check_id(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw InvalidArgument("node id " + std::to_string(id.index) + " does not exist in graph");
  }
}

template <typename T>
NodeId Graph<T>::push(Node n) {
  n.label = scope_;
  nodes_.push_back(std::move(n));
  // Any structural change invalidates activations computed earlier.
  uid_ = next_graph_uid.fetch_add(1);
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
NodeId Graph<T>::input(const std::string& name, bool differentiable) {
  if (auto it = inputs_.find(name); it != inputs_.end()) return it->second;
  Node n;
  n.op = OpKind::Input;
  n.name = name;
  n.needs_grad = differentiable;
  const NodeId id = push(std::move(n));
  inputs_.emplace(name, id);
  return id;
}

template <typename T>
NodeId Graph<T>::param(const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return it->second;
  Node n;
  n.op = OpKind::Param;
  n.name = name;
  n.needs_grad = std::none_of(frozen_.begin(), frozen_.end(),
                              [&](const std::string& f) { return name.starts_with(f); });
  const NodeId id = push(std::move(n));
  params_.emplace(name, id);
  return id;
}

template <typename T>
NodeId Graph<T>::constant(Tensor<T> value) {
  if (value.rank() != 2) throw ShapeError("graph constants must be rank-2");
  Node n;
  n.op = OpKind::Const;
  n.constant = constants_.size();
  constants_.push_back(std::move(value));
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::unary(OpKind op, NodeId a, double attr) {
  check_id(a);
  Node n;
  n.op = op;
  n.in[0] = a;
  n.arity = 1;
  n.attr = attr;
  n.needs_grad = nodes_[a.index].needs_grad;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::binary(OpKind op, NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  Node n;
  n.op = op;
  n.in[0] = a;
  n.in[1] = b;
  n.arity = 2;
  n.needs_grad = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
  return push(std::move(n));
}

template <typename T> NodeId Graph<T>::add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
template <typename T> NodeId Graph<T>::sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b); }
template <typename T> NodeId Graph<T>::mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }
template <typename T> NodeId Graph<T>::matmul(NodeId a, NodeId b) { return binary(OpKind::MatMul, a, b); }
template <typename T> NodeId Graph<T>::concat_cols(NodeId a, NodeId b) { return binary(OpKind::ConcatCols, a, b); }

template <typename T>
NodeId Graph<T>::affine(NodeId x, NodeId w, NodeId b) {
  check_id(x);
  check_id(w);
  check_id(b);
  Node n;
  n.op = OpKind::Affine;
  n.in = {x, w, b};
  n.arity = 3;
  n.needs_grad = nodes_[x.index].needs_grad || nodes_[w.index].needs_grad ||
                 nodes_[b.index].needs_grad;
  return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::conv2d(NodeId x, NodeId w, NodeId b, ConvGeometry geom) {
  check_id(x);
  check_id(w);
  check_id(b);
  Node n;
  n.op = OpKind::Conv2d;
  n.in = {x, w, b};
  n.arity = 3;
  n.ints = {geom.channels_in, geom.height, geom.width, geom.channels_out};
  n.needs_grad = nodes_[x.index].needs_grad || nodes_[w.index].needs_grad ||
                 nodes_[b.index].needs_grad;
  return push(std::move(n));
}

template <typename T> NodeId Graph<T>::neg(NodeId a) { return unary(OpKind::Neg, a); }
template <typename T> NodeId Graph<T>::scale(NodeId a, double c) { return unary(OpKind::Scale, a, c); }
template <typename T> NodeId Graph<T>::add_scalar(NodeId a, double c) { return unary(OpKind::AddScalar, a, c); }
template <typename T> NodeId Graph<T>::tanh(NodeId a) { return unary(OpKind::Tanh, a); }
template <typename T> NodeId Graph<T>::sigmoid(NodeId a) { return unary(OpKind::Sigmoid, a); }
template <typename T> NodeId Graph<T>::exp(NodeId a) { return unary(OpKind::Exp, a); }
template <typename T> NodeId Graph<T>::log(NodeId a) { return unary(OpKind::Log, a); }
template <typename T> NodeId Graph<T>::leaky_relu(NodeId a, double slope) { return unary(OpKind::LeakyRelu, a, slope); }
template <typename T> NodeId Graph<T>::square(NodeId a) { return unary(OpKind::Square, a); }
template <typename T> NodeId Graph<T>::softplus(NodeId a) { return unary(OpKind::Softplus, a); }
template <typename T> NodeId Graph<T>::sum(NodeId a) { return unary(OpKind::Sum, a); }
template <typename T> NodeId Graph<T>::mean(NodeId a) { return unary(OpKind::Mean, a); }
template <typename T> NodeId Graph<T>::row_sum(NodeId a) { return unary(OpKind::RowSum, a); }
template <typename T> NodeId Graph<T>::col_mean(NodeId a) { return unary(OpKind::ColMean, a); }

template <typename T>
NodeId Graph<T>::stop_gradient(NodeId a) {
  const NodeId id = unary(OpKind::StopGradient, a);
  nodes_[id.index].needs_grad = false;
  return id;
}

template <typename T>
NodeId Graph<T>::slice_cols(NodeId a, std::size_t begin, std::size_t end) {
  if (begin >= end) throw InvalidArgument("slice_cols: empty range");
  const NodeId id = unary(OpKind::SliceCols, a);
  nodes_[id.index].ints = {begin, end, 0, 0};
  return id;
}

// ---------------------------------------------------------------------------
// Forward evaluation

template <typename T>
Activations<T> evaluate(const Graph<T>& graph, const TensorMap<T>& inputs,
                        const ParamView<T>& params) {
  std::vector<Tensor<T>> v(graph.size());
  for (std::size_t id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(id)});
    const auto& a = n.arity > 0 ? v[n.in[0].index] : v[id];
    Tensor<T> out;
    switch (n.op) {
      case OpKind::Input: {
        auto it = inputs.find(n.name);
        if (it == inputs.end()) {
          throw NodeError(describe(n, id) + ": unbound input '" + n.name + "'", id, n.label);
        }
        require_rank2(it->second, n, id);
        out = it->second;
        break;
      }
      case OpKind::Param: {
        const Tensor<T>* p = params.find(n.name);
        if (!p) {
          throw NodeError(describe(n, id) + ": unknown parameter '" + n.name + "'", id, n.label);
        }
        require_rank2(*p, n, id);
        out = *p;
        break;
      }
      case OpKind::Const:
        out = graph.constant_value(n.constant);
        break;
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& b = v[n.in[1].index];
        const Broadcast k = broadcast_kind(a, b, n, id);
        out = Tensor<T>(a.shape());
        const std::size_t rows = a.rows(), cols = a.cols();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const T av = a[i * cols + j];
            const T bv = b[bindex(k, i, j, cols)];
            out[i * cols + j] = n.op == OpKind::Add ? av + bv : n.op == OpKind::Sub ? av - bv : av * bv;
          }
        }
        break;
      }
      case OpKind::MatMul: {
        const auto& b = v[n.in[1].index];
        if (a.cols() != b.rows()) {
          throw NodeShapeError(describe(n, id) + ": " + shape_string(a.shape()) + " x " +
                                   shape_string(b.shape()),
                               id, n.label);
        }
        out = Tensor<T>::matrix(a.rows(), b.cols());
        gemm_nn(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
        break;
      }
      case OpKind::Affine: {
        const auto& w = v[n.in[1].index];
        const auto& b = v[n.in[2].index];
        if (a.cols() != w.rows() || b.size() != w.cols()) {
          throw NodeShapeError(describe(n, id) + ": x" + shape_string(a.shape()) + " W" +
                                   shape_string(w.shape()) + " b" + shape_string(b.shape()),
                               id, n.label);
        }
        out = Tensor<T>::matrix(a.rows(), w.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          std::copy(b.data().begin(), b.data().end(), out.row(i).begin());
        }
        gemm_nn(a.data().data(), w.data().data(), out.data().data(), a.rows(), a.cols(), w.cols());
        break;
      }
      case OpKind::Conv2d: {
        const auto& w = v[n.in[1].index];
        const auto& b = v[n.in[2].index];
        const ConvGeometry g{n.ints[0], n.ints[1], n.ints[2], n.ints[3]};
        if (a.cols() != g.channels_in * g.height * g.width ||
            w.rows() != g.channels_out || w.cols() != g.channels_in * 9 ||
            b.size() != g.channels_out) {
          throw NodeShapeError(describe(n, id) + ": conv geometry mismatch for x" +
                                   shape_string(a.shape()) + " W" + shape_string(w.shape()),
                               id, n.label);
        }
        out = Tensor<T>::matrix(a.rows(), g.channels_out * g.height * g.width);
        conv_forward(a, w, b, g, out);
        break;
      }
      case OpKind::Neg:
      case OpKind::Scale:
      case OpKind::AddScalar:
      case OpKind::Tanh:
      case OpKind::Sigmoid:
      case OpKind::Exp:
      case OpKind::Log:
      case OpKind::LeakyRelu:
      case OpKind::Square:
      case OpKind::Softplus:
      case OpKind::StopGradient: {
        out = a;
        const T c = static_cast<T>(n.attr);
        for (auto& x : out.data()) {
          switch (n.op) {
            case OpKind::Neg: x = -x; break;
            case OpKind::Scale: x = x * c; break;
            case OpKind::AddScalar: x = x + c; break;
            case OpKind::Tanh: x = std::tanh(x); break;
            case OpKind::Sigmoid: x = sigmoid_value(x); break;
            case OpKind::Exp: x = std::exp(x); break;
            case OpKind::Log: x = std::log(x); break;
            case OpKind::LeakyRelu: x = x > T(0) ? x : x * c; break;
            case OpKind::Square: x = x * x; break;
            case OpKind::Softplus: x = softplus_value(x); break;
            default: break;
          }
        }
        break;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        T acc = 0;
        for (T x : a.data()) acc += x;
        if (n.op == OpKind::Mean) acc /= static_cast<T>(a.size());
        out = Tensor<T>::scalar(acc);
        break;
      }
      case OpKind::RowSum: {
        out = Tensor<T>::matrix(a.rows(), 1);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          T acc = 0;
          for (T x : a.row(i)) acc += x;
          out[i] = acc;
        }
        break;
      }
      case OpKind::ColMean: {
        out = Tensor<T>::matrix(1, a.cols());
        for (std::size_t j = 0; j < a.cols(); ++j) {
          out[j] = exact_mean(a.data().data() + j, a.rows(), a.cols());
        }
        break;
      }
      case OpKind::SliceCols: {
        const std::size_t b0 = n.ints[0], b1 = n.ints[1];
        if (b1 > a.cols()) {
          throw NodeShapeError(describe(n, id) + ": slice [" + std::to_string(b0) + "," +
                                   std::to_string(b1) + ") of " + shape_string(a.shape()),
                               id, n.label);
        }
        out = Tensor<T>::matrix(a.rows(), b1 - b0);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          std::copy(a.row(i).begin() + static_cast<std::ptrdiff_t>(b0),
                    a.row(i).begin() + static_cast<std::ptrdiff_t>(b1), out.row(i).begin());
        }
        break;
      }
      case OpKind::ConcatCols: {
        const auto& b = v[n.in[1].index];
        if (a.rows() != b.rows()) {
          throw NodeShapeError(describe(n, id) + ": row mismatch " + shape_string(a.shape()) +
                                   " vs " + shape_string(b.shape()),
                               id, n.label);
        }
        out = Tensor<T>::matrix(a.rows(), a.cols() + b.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          auto dst = out.row(i).begin();
          dst = std::copy(a.row(i).begin(), a.row(i).end(), dst);
          std::copy(b.row(i).begin(), b.row(i).end(), dst);
        }
        break;
      }
    }
    if (!out.all_finite()) {
      throw NonFiniteError(describe(n, id) + ": non-finite value", id, n.label);
    }
    v[id] = std::move(out);
  }
  return Activations<T>(graph.uid(), std::move(v));
}

// ---------------------------------------------------------------------------
// Reverse pass

template <typename T>
Gradients<T> vjp(const Graph<T>& graph, const Activations<T>& acts, NodeId output,
                 const Tensor<T>& cotangent) {
  if (acts.graph_uid() != graph.uid() || acts.size() != graph.size()) {
    throw Error("backward called without a matching forward evaluation");
  }
  if (output.index >= graph.size()) throw InvalidArgument("vjp: unknown output node");
  if (cotangent.shape() != acts[output].shape()) {
    throw ShapeError("vjp: cotangent shape " + shape_string(cotangent.shape()) +
                     " does not match output " + shape_string(acts[output].shape()));
  }

  std::vector<Tensor<T>> g(graph.size());
  auto grad_of = [&](NodeId id) -> Tensor<T>* {
    const Node& n = graph.node(id);
    if (!n.needs_grad) return nullptr;
    Tensor<T>& t = g[id.index];
    if (t.empty()) t = Tensor<T>(acts[id].shape());
    return &t;
  };

  if (graph.node(output).needs_grad) g[output.index] = cotangent;

  for (std::size_t id = output.index + 1; id-- > 0;) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(id)});
    if (!n.needs_grad || g[id].empty()) continue;
    const Tensor<T>& gy = g[id];
    const Tensor<T>& y = acts[NodeId{static_cast<std::uint32_t>(id)}];
    const T c = static_cast<T>(n.attr);

    switch (n.op) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::Const:
      case OpKind::StopGradient:
        break;
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& a = acts[n.in[0]];
        const auto& b = acts[n.in[1]];
        const Broadcast k = broadcast_kind(a, b, n, id);
        Tensor<T>* ga = grad_of(n.in[0]);
        Tensor<T>* gb = grad_of(n.in[1]);
        const std::size_t rows = a.rows(), cols = a.cols();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t ai = i * cols + j;
            const std::size_t bi = bindex(k, i, j, cols);
            const T gv = gy[ai];
            if (n.op == OpKind::Mul) {
              if (ga) (*ga)[ai] += gv * b[bi];
              if (gb) (*gb)[bi] += gv * a[ai];
            } else {
              if (ga) (*ga)[ai] += gv;
              if (gb) (*gb)[bi] += n.op == OpKind::Add ? gv : -gv;
            }
          }
        }
        break;
      }
      case OpKind::MatMul: {
        const auto& a = acts[n.in[0]];
        const auto& b = acts[n.in[1]];
        if (Tensor<T>* ga = grad_of(n.in[0])) {
          gemm_nt(gy.data().data(), b.data().data(), ga->data().data(), a.rows(), a.cols(), b.cols());
        }
        if (Tensor<T>* gb = grad_of(n.in[1])) {
          gemm_tn(a.data().data(), gy.data().data(), gb->data().data(), a.rows(), a.cols(), b.cols());
        }
        break;
      }
      case OpKind::Affine: {
        const auto& x = acts[n.in[0]];
        const auto& w = acts[n.in[1]];
        if (Tensor<T>* gx = grad_of(n.in[0])) {
          gemm_nt(gy.data().data(), w.data().data(), gx->data().data(), x.rows(), x.cols(), w.cols());
        }
        if (Tensor<T>* gw = grad_of(n.in[1])) {
          gemm_tn(x.data().data(), gy.data().data(), gw->data().data(), x.rows(), x.cols(), w.cols());
        }
        if (Tensor<T>* gb = grad_of(n.in[2])) {
          for (std::size_t i = 0; i < gy.rows(); ++i) {
            for (std::size_t j = 0; j < gy.cols(); ++j) (*gb)[j] += gy(i, j);
          }
        }
        break;
      }
      case OpKind::Conv2d: {
        const ConvGeometry geom{n.ints[0], n.ints[1], n.ints[2], n.ints[3]};
        conv_backward(acts[n.in[0]], acts[n.in[1]], gy, geom, grad_of(n.in[0]),
                      grad_of(n.in[1]), grad_of(n.in[2]));
        break;
      }
      case OpKind::Neg:
      case OpKind::Scale:
      case OpKind::AddScalar:
      case OpKind::Tanh:
      case OpKind::Sigmoid:
      case OpKind::Exp:
      case OpKind::Log:
      case OpKind::LeakyRelu:
      case OpKind::Square:
      case OpKind::Softplus: {
        Tensor<T>* ga = grad_of(n.in[0]);
        if (!ga) break;
        const auto& a = acts[n.in[0]];
        for (std::size_t i = 0; i < gy.size(); ++i) {
          T d = 0;
          switch (n.op) {
            case OpKind::Neg: d = T(-1); break;
            case OpKind::Scale: d = c; break;
            case OpKind::AddScalar: d = T(1); break;
            case OpKind::Tanh: d = T(1) - y[i] * y[i]; break;
            case OpKind::Sigmoid: d = y[i] * (T(1) - y[i]); break;
            case OpKind::Exp: d = y[i]; break;
            case OpKind::Log: d = T(1) / a[i]; break;
            case OpKind::LeakyRelu: d = a[i] > T(0) ? T(1) : c; break;
            case OpKind::Square: d = T(2) * a[i]; break;
            case OpKind::Softplus: d = sigmoid_value(a[i]); break;
            default: break;
          }
          (*ga)[i] += gy[i] * d;
        }
        break;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        Tensor<T>* ga = grad_of(n.in[0]);
        if (!ga) break;
        T gv = gy[0];
        if (n.op == OpKind::Mean) gv /= static_cast<T>(ga->size());
        for (auto& x : ga->data()) x += gv;
        break;
      }
      case OpKind::RowSum: {
        Tensor<T>* ga = grad_of(n.in[0]);
        if (!ga) break;
        for (std::size_t i = 0; i < ga->rows(); ++i) {
          for (auto& x : ga->row(i)) x += gy[i];
        }
        break;
      }
      case OpKind::ColMean: {
        Tensor<T>* ga = grad_of(n.in[0]);
        if (!ga) break;
        const T inv = T(1) / static_cast<T>(ga->rows());
        for (std::size_t i = 0; i < ga->rows(); ++i) {
          for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += gy[j] * inv;
        }
        break;
      }
      case OpKind::SliceCols: {
        Tensor<T>* ga = grad_of(n.in[0]);
        if (!ga) break;
        const std::size_t b0 = n.ints[0];
        for (std::size_t i = 0; i < gy.rows(); ++i) {
          for (std::size_t j = 0; j < gy.cols(); ++j) (*ga)(i, b0 + j) += gy(i, j);
        }
        break;
      }
      case OpKind::ConcatCols: {
        const std::size_t ca = acts[n.in[0]].cols();
        Tensor<T>* ga = grad_of(n.in[0]);
        Tensor<T>* gb = grad_of(n.in[1]);
        for (std::size_t i = 0; i < gy.rows(); ++i) {
          for (std::size_t j = 0; j < gy.cols(); ++j) {
            if (j < ca) {
              if (ga) (*ga)(i, j) += gy(i, j);
            } else if (gb) {
              (*gb)(i, j - ca) += gy(i, j);
            }
          }
        }
        break;
      }
    }
  }

  Gradients<T> out;
  for (std::size_t id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(NodeId{static_cast<std::uint32_t>(id)});
    if (n.op != OpKind::Param && n.op != OpKind::Input) continue;
    Tensor<T> t = g[id].empty() ? Tensor<T>(acts[NodeId{static_cast<std::uint32_t>(id)}].shape())
                                : std::move(g[id]);
    (n.op == OpKind::Param ? out.params : out.inputs).insert_or_assign(n.name, std::move(t));
  }
  return out;
}

template <typename T>
Gradients<T> backward(const Graph<T>& graph, const Activations<T>& acts, NodeId seed) {
  if (acts.graph_uid() != graph.uid() || acts.size() != graph.size()) {
    throw Error("backward called without a matching forward evaluation");
  }
  if (acts[seed].size() != 1) {
    throw ShapeError("backward seed must be scalar, got " + shape_string(acts[seed].shape()));
  }
  return vjp(graph, acts, seed, Tensor<T>(acts[seed].shape(), T(1)));
}

template class Graph<float>;
template class Graph<double>;
template Activations<float> evaluate(const Graph<float>&, const TensorMap<float>&, const ParamView<float>&);
template Activations<double> evaluate(const Graph<double>&, const TensorMap<double>&, const ParamView<double>&);
template Gradients<float> backward(const Graph<float>&, const Activations<float>&, NodeId);
template Gradients<double> backward(const Graph<double>&, const Activations<double>&, NodeId);
template Gradients<float> vjp(const Graph<float>&, const Activations<float>&, NodeId, const Tensor<float>&);
template Gradients<double> vjp(const Graph<double>&, const Activations<double>&, NodeId, const Tensor<double>&);

}  // namespace flowcritic
