#include "flowcritic/flow.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace flowcritic {

namespace {

template <typename T>
Tensor<T> mask_row(const AffineCoupling& layer, bool conditioning) {
  const std::size_t d = layer.mask.size();
  Tensor<T> row = Tensor<T>::matrix(1, d);
  for (std::size_t i = 0; i < d; ++i) {
    row[i] = (conditioning ? layer.conditions_on(i) : layer.updates(i)) ? T(1) : T(0);
  }
  return row;
}

struct ScaleShift {
  NodeId s;
  NodeId t;
};

// s and t for one coupling, evaluated on the conditioning coordinates of `in`.
template <typename T>
ScaleShift coupling_net(Graph<T>& g, const AffineCoupling& layer, NodeId in) {
  const NodeId cond = g.constant(mask_row<T>(layer, true));
  const NodeId upd = g.constant(mask_row<T>(layer, false));
  const std::string& p = layer.prefix;
  const NodeId xc = g.mul(in, cond);
  const NodeId h1 = g.tanh(g.affine(xc, g.param(p + "w1"), g.param(p + "b1")));
  const NodeId h2 = g.tanh(g.affine(h1, g.param(p + "w2"), g.param(p + "b2")));
  const NodeId s_raw = g.affine(h2, g.param(p + "ws"), g.param(p + "bs"));
  const NodeId s = g.mul(g.scale(g.tanh(s_raw), layer.scale_cap), upd);
  const NodeId t = g.mul(g.affine(h2, g.param(p + "wt"), g.param(p + "bt")), upd);
  return {s, t};
}

template <typename T>
NodeId zero_logdet(Graph<T>& g, NodeId x) {
  return g.scale(g.slice_cols(x, 0, 1), 0.0);
}

template <typename T>
void add_layer_params(ParamStore<T>& params, const std::string& prefix, std::size_t dim,
                      std::size_t hidden, Rng& rng) {
  auto init = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor<T> w = Tensor<T>::matrix(fan_in, fan_out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : w.data()) x = static_cast<T>(rng.normal() * sd);
    return w;
  };
  params[prefix + "w1"] = init(dim, hidden);
  params[prefix + "b1"] = Tensor<T>::matrix(1, hidden);
  params[prefix + "w2"] = init(hidden, hidden);
  params[prefix + "b2"] = Tensor<T>::matrix(1, hidden);
  params[prefix + "ws"] = Tensor<T>::matrix(hidden, dim);
  params[prefix + "bs"] = Tensor<T>::matrix(1, dim);
  params[prefix + "wt"] = Tensor<T>::matrix(hidden, dim);
  params[prefix + "bt"] = Tensor<T>::matrix(1, dim);
}

std::string layer_prefix(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "flow.c%02zu.", index);
  return buf;
}

}  // namespace

int couplings_for_levels(int levels) {
  if (levels < 1 || levels > 3) throw InvalidArgument("levels must be 1, 2 or 3");
  return 7 + 6 * (levels - 1);
}

template <typename T>
FlowModel<T> build_nvp(int levels, std::size_t dim, std::size_t hidden_width, std::uint64_t seed) {
  couplings_for_levels(levels);
  if (dim < 2) throw InvalidArgument("build_nvp: need D >= 2");
  if (hidden_width < 1) throw InvalidArgument("build_nvp: hidden_width must be positive");

  FlowModel<T> model(dim, levels, hidden_width);
  Rng rng(seed);
  std::vector<std::uint8_t> active(dim, 1);
  std::size_t index = 0;

  for (int level = 1; level <= levels; ++level) {
    std::vector<std::size_t> live;
    for (std::size_t d = 0; d < dim; ++d) {
      if (active[d]) live.push_back(d);
    }
    if (live.size() < 2) {
      throw InvalidArgument("build_nvp: D=" + std::to_string(dim) + " is too small for " +
                            std::to_string(levels) + " levels");
    }
    const int count = level == 1 ? 7 : 6;
    for (int k = 0; k < count; ++k) {
      AffineCoupling layer;
      layer.prefix = layer_prefix(index++);
      layer.level = level;
      layer.active = active;
      layer.mask.assign(dim, 1);
      for (std::size_t pos = 0; pos < live.size(); ++pos) {
        layer.mask[live[pos]] = (pos + static_cast<std::size_t>(k)) % 2 == 0 ? 1 : 0;
      }
      add_layer_params(model.params(), layer.prefix, dim, hidden_width, rng);
      model.layers().push_back(std::move(layer));
    }
    std::vector<std::size_t> frozen;
    if (level < levels) {
      for (std::size_t pos = 0; pos < live.size(); pos += 2) {
        frozen.push_back(live[pos]);
        active[live[pos]] = 0;
      }
    }
    model.factored().push_back(std::move(frozen));
  }
  return model;
}

template <typename T>
void append_identity_coupling(FlowModel<T>& model, std::vector<std::uint8_t> mask,
                              std::uint64_t seed) {
  if (mask.size() != model.dim()) throw InvalidArgument("mask width does not match model");
  AffineCoupling layer;
  layer.prefix = layer_prefix(model.layers().size());
  layer.level = model.levels();
  layer.active.assign(model.dim(), 1);
  layer.mask = std::move(mask);
  Rng rng(seed);
  const std::size_t hidden = model.hidden_width() ? model.hidden_width() : 8;
  add_layer_params(model.params(), layer.prefix, model.dim(), hidden, rng);
  model.layers().push_back(std::move(layer));
}

template <typename T>
FlowNodes append_forward(Graph<T>& g, const FlowModel<T>& model, NodeId z0) {
  NodeId x = z0;
  NodeId logdet = zero_logdet(g, z0);
  const auto& layers = model.layers();
  for (std::size_t i = layers.size(); i-- > 0;) {
    g.set_scope("coupling " + std::to_string(i));
    const ScaleShift st = coupling_net(g, layers[i], x);
    x = g.add(g.mul(x, g.exp(st.s)), st.t);
    logdet = g.add(logdet, g.row_sum(st.s));
  }
  g.set_scope("");
  return {x, logdet};
}

template <typename T>
FlowNodes append_inverse(Graph<T>& g, const FlowModel<T>& model, NodeId x) {
  NodeId y = x;
  NodeId logdet = zero_logdet(g, x);
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    g.set_scope("coupling " + std::to_string(i));
    const ScaleShift st = coupling_net(g, layers[i], y);
    y = g.mul(g.sub(y, st.t), g.exp(g.neg(st.s)));
    logdet = g.add(logdet, g.row_sum(st.s));
  }
  g.set_scope("");
  return {y, logdet};
}

template <typename T>
NodeId append_prior_logpdf(Graph<T>& g, NodeId z, std::size_t dim) {
  const double norm = -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
  return g.add_scalar(g.scale(g.row_sum(g.square(z)), -0.5), norm);
}

template <typename T>
NodeId append_log_prob(Graph<T>& g, const FlowModel<T>& model, NodeId x) {
  const FlowNodes inv = append_inverse(g, model, x);
  return g.sub(append_prior_logpdf(g, inv.value, model.dim()), inv.logdet);
}

template <typename T>
FlowResult<T> forward(const FlowModel<T>& model, const Tensor<T>& z0) {
  Graph<T> g;
  const FlowNodes out = append_forward(g, model, g.input("z0", false));
  const auto acts = evaluate(g, TensorMap<T>{{"z0", z0}}, ParamView<T>(model.params()));
  return {acts[out.value], acts[out.logdet]};
}

template <typename T>
FlowResult<T> inverse(const FlowModel<T>& model, const Tensor<T>& x) {
  Graph<T> g;
  const FlowNodes out = append_inverse(g, model, g.input("x", false));
  const auto acts = evaluate(g, TensorMap<T>{{"x", x}}, ParamView<T>(model.params()));
  return {acts[out.value], acts[out.logdet]};
}

template <typename T>
Tensor<T> log_prob(const FlowModel<T>& model, const Tensor<T>& x) {
  Graph<T> g;
  const NodeId lp = append_log_prob(g, model, g.input("x", false));
  return evaluate(g, TensorMap<T>{{"x", x}}, ParamView<T>(model.params()))[lp];
}

template <typename T>
Tensor<T> prior_logpdf(const Tensor<T>& z) {
  Graph<T> g;
  const NodeId lp = append_prior_logpdf(g, g.input("z", false), z.cols());
  return evaluate(g, TensorMap<T>{{"z", z}}, ParamView<T>())[lp];
}

template <typename T>
Samples<T> sample(const FlowModel<T>& model, std::size_t n, Rng& rng) {
  if (n < 1) throw InvalidArgument("sample: n must be at least 1");
  const Tensor<T> z0 = rng.normal_matrix<T>(n, model.dim());
  Graph<T> g;
  const NodeId zin = g.input("z0", false);
  const FlowNodes out = append_forward(g, model, zin);
  const NodeId lp = g.sub(append_prior_logpdf(g, zin, model.dim()), out.logdet);
  const auto acts = evaluate(g, TensorMap<T>{{"z0", z0}}, ParamView<T>(model.params()));
  return {acts[out.value], acts[lp]};
}

template <typename T>
Tensor<T> partial_resample(const FlowModel<T>& model, const Tensor<T>& x, LatentHalf half,
                           Rng& rng) {
  Tensor<T> z0 = inverse(model, x).value;
  const std::size_t split = model.dim() / 2;
  const std::size_t begin = half == LatentHalf::first ? 0 : split;
  const std::size_t end = half == LatentHalf::first ? split : model.dim();
  for (std::size_t i = 0; i < z0.rows(); ++i) {
    for (std::size_t d = begin; d < end; ++d) z0(i, d) = static_cast<T>(rng.normal());
  }
  return forward(model, z0).value;
}

#define FLOWCRITIC_INSTANTIATE(T)                                                          \
  template FlowModel<T> build_nvp(int, std::size_t, std::size_t, std::uint64_t);          \
  template void append_identity_coupling(FlowModel<T>&, std::vector<std::uint8_t>,        \
                                         std::uint64_t);                                   \
  template FlowNodes append_forward(Graph<T>&, const FlowModel<T>&, NodeId);              \
  template FlowNodes append_inverse(Graph<T>&, const FlowModel<T>&, NodeId);              \
  template NodeId append_prior_logpdf(Graph<T>&, NodeId, std::size_t);                    \
  template NodeId append_log_prob(Graph<T>&, const FlowModel<T>&, NodeId);                \
  template FlowResult<T> forward(const FlowModel<T>&, const Tensor<T>&);                  \
  template FlowResult<T> inverse(const FlowModel<T>&, const Tensor<T>&);                  \
  template Tensor<T> log_prob(const FlowModel<T>&, const Tensor<T>&);                     \
  template Tensor<T> prior_logpdf(const Tensor<T>&);                                      \
  template Samples<T> sample(const FlowModel<T>&, std::size_t, Rng&);                     \
  template Tensor<T> partial_resample(const FlowModel<T>&, const Tensor<T>&, LatentHalf, Rng&);

FLOWCRITIC_INSTANTIATE(float)
FLOWCRITIC_INSTANTIATE(double)
#undef FLOWCRITIC_INSTANTIATE

}  // namespace flowcritic
