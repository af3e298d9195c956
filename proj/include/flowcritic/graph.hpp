#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "flowcritic/tensor.hpp"

namespace flowcritic {

/// Index of a node inside one Graph.
struct NodeId {
  std::uint32_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

enum class OpKind : std::uint8_t {
  Input,
  Param,
  Const,
  Add,
  Sub,
  Mul,
  MatMul,
  Affine,
  Neg,
  Scale,
  AddScalar,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  LeakyRelu,
  Square,
  Softplus,
  Sum,
  Mean,
  RowSum,
  ColMean,
  SliceCols,
  ConcatCols,
  StopGradient,
  Conv2d,
};

const char* op_name(OpKind op);

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>, std::less<>>;

/// Named parameter tensors owned by a model.
template <typename T>
using ParamStore = TensorMap<T>;

/// Read-only lookup over one or more parameter stores (first match wins).
template <typename T>
class ParamView {
 public:
  ParamView() = default;
  ParamView(const ParamStore<T>& store) : stores_{&store} {}  // NOLINT: implicit by design of call sites
  ParamView(std::initializer_list<const ParamStore<T>*> stores) : stores_(stores) {}

  const Tensor<T>* find(std::string_view name) const {
    for (const auto* s : stores_) {
      if (auto it = s->find(name); it != s->end()) return &it->second;
    }
    return nullptr;
  }

 private:
  std::vector<const ParamStore<T>*> stores_;
};

/// 3x3, stride 1, zero-padded convolution over [N, C*H*W] rows.
struct ConvGeometry {
  std::size_t channels_in = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels_out = 1;
};

struct Node {
  OpKind op = OpKind::Input;
  std::array<NodeId, 3> in{};
  std::uint8_t arity = 0;
  double attr = 0.0;
  std::array<std::size_t, 4> ints{};
  std::string name;
  std::size_t constant = 0;
  bool needs_grad = false;
  std::string label;
};

/// Symbolic op list in topological order. Shapes are resolved at evaluation,
/// so one graph serves any batch size.
template <typename T>
class Graph {
 public:
  Graph();

  NodeId input(const std::string& name, bool differentiable = true);
  NodeId param(const std::string& name);
  NodeId constant(Tensor<T> value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId affine(NodeId x, NodeId w, NodeId b);
  NodeId neg(NodeId a);
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId leaky_relu(NodeId a, double slope);
  NodeId square(NodeId a);
  NodeId softplus(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId col_mean(NodeId a);
  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId stop_gradient(NodeId a);
  NodeId conv2d(NodeId x, NodeId w, NodeId b, ConvGeometry geom);

  /// Parameters whose names start with `prefix` and are created after this
  /// call get no gradient.
  void freeze_prefix(std::string prefix) { frozen_.push_back(std::move(prefix)); }

  /// Label attached to nodes created from now on; shows up in errors.
  void set_scope(std::string scope) { scope_ = std::move(scope); }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t uid() const { return uid_; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Tensor<T>& constant_value(std::size_t i) const { return constants_.at(i); }

 private:
  NodeId push(Node n);
  NodeId unary(OpKind op, NodeId a, double attr = 0.0);
  NodeId binary(OpKind op, NodeId a, NodeId b);
  void check_id(NodeId id) const;

  std::uint64_t uid_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> constants_;
  std::map<std::string, NodeId, std::less<>> params_;
  std::map<std::string, NodeId, std::less<>> inputs_;
  std::string scope_;
  std::vector<std::string> frozen_;
};

/// Per-node forward values saved for the backward pass.
template <typename T>
class Activations {
 public:
  Activations() = default;
  Activations(std::uint64_t graph_uid, std::vector<Tensor<T>> values)
      : graph_uid_(graph_uid), values_(std::move(values)) {}

  const Tensor<T>& operator[](NodeId id) const { return values_.at(id.index); }
  std::uint64_t graph_uid() const { return graph_uid_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::uint64_t graph_uid_ = 0;
  std::vector<Tensor<T>> values_;
};

template <typename T>
struct Gradients {
  TensorMap<T> params;
  TensorMap<T> inputs;
};

template <typename T>
Activations<T> evaluate(const Graph<T>& graph, const TensorMap<T>& inputs,
                        const ParamView<T>& params);

/// Reverse pass seeded with d(seed)/d(seed) = 1; the seed node must be scalar.
template <typename T>
Gradients<T> backward(const Graph<T>& graph, const Activations<T>& acts, NodeId seed);

/// Vector-Jacobian product for an arbitrary output node.
template <typename T>
Gradients<T> vjp(const Graph<T>& graph, const Activations<T>& acts, NodeId output,
                 const Tensor<T>& cotangent);

}  // namespace flowcritic
