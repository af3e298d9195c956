#include "flowcritic/optim.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace flowcritic {

namespace {

template <typename T>
void check_grads(const ParamStore<T>& params, const TensorMap<T>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    if (g.shape() != it->second.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g.shape()) +
                       ", parameter is " + shape_string(it->second.shape()));
    }
    if (!g.all_finite()) throw NonFiniteValue("non-finite gradient for '" + name + "'");
  }
}

template <typename T>
Tensor<T>& slot(TensorMap<T>& m, const std::string& name, const Shape& shape) {
  auto it = m.find(name);
  if (it == m.end()) it = m.emplace(name, Tensor<T>(shape)).first;
  return it->second;
}

}  // namespace

template <typename T>
void rmsprop_step(ParamStore<T>& params, const TensorMap<T>& grads, OptState<T>& state,
                  const RmspropConfig& cfg) {
  if (!(cfg.lr > 0) || !(cfg.decay > 0 && cfg.decay < 1)) {
    throw InvalidArgument("rmsprop: need lr > 0 and 0 < decay < 1");
  }
  check_grads(params, grads);
  const T decay = static_cast<T>(cfg.decay);
  const T lr = static_cast<T>(cfg.lr);
  const T eps = static_cast<T>(cfg.eps);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    Tensor<T>& p = it->second;
    Tensor<T>& acc = slot(state.second, name, p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      acc[i] = decay * acc[i] + (T(1) - decay) * g[i] * g[i];
      p[i] -= lr * g[i] / std::sqrt(acc[i] + eps);
    }
  }
  ++state.step;
}

template <typename T>
void adam_step(ParamStore<T>& params, const TensorMap<T>& grads, OptState<T>& state,
               const AdamConfig& cfg) {
  if (!(cfg.lr > 0) || !(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1)) {
    throw InvalidArgument("adam: need lr > 0 and betas in [0, 1)");
  }
  check_grads(params, grads);
  const std::uint64_t t = state.step + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    Tensor<T>& p = it->second;
    Tensor<T>& m = slot(state.first, name, p.shape());
    Tensor<T>& v = slot(state.second, name, p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = static_cast<T>(m[i] / c1);
      const T vhat = static_cast<T>(v[i] / c2);
      p[i] -= static_cast<T>(cfg.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.eps));
    }
  }
  state.step = t;
}

template <typename T>
void clip_to_box(ParamStore<T>& params, double c, const ClipSet& clip_set) {
  if (!(c > 0)) throw InvalidArgument("clip_to_box: c must be positive");
  const T hi = static_cast<T>(c);
  for (auto& [name, p] : params) {
    if (!clip_set.contains(name)) continue;
    for (auto& x : p.data()) x = std::clamp(x, -hi, hi);
  }
}

template <typename T>
double max_abs_param(const ParamStore<T>& params, const ClipSet& names) {
  double m = 0;
  for (const auto& [name, p] : params) {
    if (!names.contains(name)) continue;
    for (T x : p.data()) m = std::max(m, static_cast<double>(std::abs(x)));
  }
  return m;
}

double grad_check(const ScalarFn& fn, const Tensor<double>& point, double eps) {
  if (!(eps > 0)) throw InvalidArgument("grad_check: eps must be positive");
  const Tensor<double> analytic = fn.gradient(point);
  if (analytic.shape() != point.shape()) {
    throw ShapeError("grad_check: gradient shape does not match point");
  }
  double worst = 0;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = fn.value(probe);
    probe[i] = orig - eps;
    const double down = fn.value(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NonFiniteValue("grad_check: non-finite function value near coordinate " +
                           std::to_string(i));
    }
    const double numeric = (up - down) / (2 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

ScalarFn graph_param_fn(const Graph<double>& graph, NodeId loss, const TensorMap<double>& inputs,
                        const ParamStore<double>& params, const std::string& param_name) {
  auto shared = std::make_shared<ParamStore<double>>(params);
  if (!shared->contains(param_name)) throw InvalidArgument("unknown parameter " + param_name);
  ScalarFn fn;
  fn.value = [&graph, loss, inputs, shared, param_name](const Tensor<double>& p) {
    ParamStore<double> local = *shared;
    local[param_name] = p;
    return evaluate(graph, inputs, ParamView<double>(local))[loss].item();
  };
  fn.gradient = [&graph, loss, inputs, shared, param_name](const Tensor<double>& p) {
    ParamStore<double> local = *shared;
    local[param_name] = p;
    const auto acts = evaluate(graph, inputs, ParamView<double>(local));
    return backward(graph, acts, loss).params.at(param_name);
  };
  return fn;
}

ScalarFn graph_input_fn(const Graph<double>& graph, NodeId loss, const TensorMap<double>& inputs,
                        const ParamStore<double>& params, const std::string& input_name) {
  auto shared = std::make_shared<ParamStore<double>>(params);
  ScalarFn fn;
  fn.value = [&graph, loss, inputs, shared, input_name](const Tensor<double>& x) {
    TensorMap<double> local = inputs;
    local[input_name] = x;
    return evaluate(graph, local, ParamView<double>(*shared))[loss].item();
  };
  fn.gradient = [&graph, loss, inputs, shared, input_name](const Tensor<double>& x) {
    TensorMap<double> local = inputs;
    local[input_name] = x;
    const auto acts = evaluate(graph, local, ParamView<double>(*shared));
    return backward(graph, acts, loss).inputs.at(input_name);
  };
  return fn;
}

template void rmsprop_step(ParamStore<float>&, const TensorMap<float>&, OptState<float>&, const RmspropConfig&);
template void rmsprop_step(ParamStore<double>&, const TensorMap<double>&, OptState<double>&, const RmspropConfig&);
template void adam_step(ParamStore<float>&, const TensorMap<float>&, OptState<float>&, const AdamConfig&);
template void adam_step(ParamStore<double>&, const TensorMap<double>&, OptState<double>&, const AdamConfig&);
template void clip_to_box(ParamStore<float>&, double, const ClipSet&);
template void clip_to_box(ParamStore<double>&, double, const ClipSet&);
template double max_abs_param(const ParamStore<float>&, const ClipSet&);
template double max_abs_param(const ParamStore<double>&, const ClipSet&);

}  // namespace flowcritic
