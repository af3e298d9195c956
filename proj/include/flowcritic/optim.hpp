#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>

#include "flowcritic/graph.hpp"

namespace flowcritic {

/// Per-parameter accumulators. rmsprop uses only `second`; adam uses both
/// moments plus the step count.
template <typename T>
struct OptState {
  TensorMap<T> first;
  TensorMap<T> second;
  std::uint64_t step = 0;

  bool operator==(const OptState&) const = default;
};

struct RmspropConfig {
  double lr = 5e-5;
  double decay = 0.99;
  double eps = 1e-8;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// acc <- decay*acc + (1-decay)*g^2, then p <- p - lr*g/sqrt(acc+eps).
/// Only parameters present in both `params` and `grads` are touched. A
/// non-finite gradient throws before anything is modified.
template <typename T>
void rmsprop_step(ParamStore<T>& params, const TensorMap<T>& grads, OptState<T>& state,
                  const RmspropConfig& cfg);

/// Bias-corrected Adam.
template <typename T>
void adam_step(ParamStore<T>& params, const TensorMap<T>& grads, OptState<T>& state,
               const AdamConfig& cfg);

using ClipSet = std::set<std::string, std::less<>>;

/// Projects every scalar of the named parameters onto [-c, c].
template <typename T>
void clip_to_box(ParamStore<T>& params, double c, const ClipSet& clip_set);

template <typename T>
double max_abs_param(const ParamStore<T>& params, const ClipSet& names);

/// A differentiable scalar function together with its analytic gradient.
struct ScalarFn {
  std::function<double(const Tensor<double>&)> value;
  std::function<Tensor<double>(const Tensor<double>&)> gradient;
};

/// max_i |analytic_i - central_i| / max(1, |analytic_i|).
double grad_check(const ScalarFn& fn, const Tensor<double>& point, double eps);

/// Builds a ScalarFn over one parameter of a graph's scalar output, all
/// other inputs and parameters held fixed.
ScalarFn graph_param_fn(const Graph<double>& graph, NodeId loss, const TensorMap<double>& inputs,
                        const ParamStore<double>& params, const std::string& param_name);

/// Same, but differentiating with respect to a named input.
ScalarFn graph_input_fn(const Graph<double>& graph, NodeId loss, const TensorMap<double>& inputs,
                        const ParamStore<double>& params, const std::string& input_name);

}  // namespace flowcritic
