#include "flowcritic/critic.hpp"

#include <cmath>

#include "flowcritic/rng.hpp"

namespace flowcritic {

namespace {

std::size_t trunk_input_width(const CriticConfig& cfg) {
  return cfg.image_side ? cfg.conv_channels * cfg.image_side * cfg.image_side : cfg.dim;
}

template <typename T>
NodeId scaled_input(Graph<T>& g, const CriticConfig& cfg, NodeId x) {
  NodeId in = x;
  if (cfg.input_scale != 1.0) in = g.scale(in, cfg.input_scale);
  if (cfg.input_shift != 0.0) in = g.add_scalar(in, cfg.input_shift);
  return in;
}

}  // namespace

template <typename T>
void Critic<T>::allocate() {
  if (cfg_.dim < 1 || cfg_.hidden < 1) throw InvalidArgument("critic: empty layer");
  if (!(cfg_.clip_c > 0)) throw InvalidArgument("critic: clip_c must be positive");
  if (cfg_.image_side && cfg_.image_side * cfg_.image_side != cfg_.dim) {
    throw InvalidArgument("critic: image_side^2 must equal dim");
  }
  const std::string& p = cfg_.prefix;
  if (cfg_.image_side) {
    params_[p + "conv.w"] = Tensor<T>::matrix(cfg_.conv_channels, 9);
    params_[p + "conv.b"] = Tensor<T>::matrix(1, cfg_.conv_channels);
  }
  params_[p + "w1"] = Tensor<T>::matrix(trunk_input_width(cfg_), cfg_.hidden);
  params_[p + "b1"] = Tensor<T>::matrix(1, cfg_.hidden);
  params_[p + "w2"] = Tensor<T>::matrix(cfg_.hidden, cfg_.hidden);
  params_[p + "b2"] = Tensor<T>::matrix(1, cfg_.hidden);
  params_[p + "w3"] = Tensor<T>::matrix(cfg_.hidden, 1);
  params_[p + "b3"] = Tensor<T>::matrix(1, 1);
  for (const auto& [name, t] : params_) clip_set_.insert(name);
}

template <typename T>
Critic<T>::Critic(CriticConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  allocate();
  Rng rng(seed);
  const std::string& p = cfg_.prefix;
  for (const char* name : {"conv.w", "w1", "w2"}) {
    auto it = params_.find(p + name);
    if (it == params_.end()) continue;
    for (auto& x : it->second.data()) {
      x = static_cast<T>((2.0 * rng.uniform() - 1.0) * cfg_.clip_c);
    }
  }
}

template <typename T>
Critic<T> Critic<T>::zeros(CriticConfig cfg) {
  Critic<T> c;
  c.cfg_ = std::move(cfg);
  c.allocate();
  return c;
}

template <typename T>
NodeId append_critic(Graph<T>& g, const Critic<T>& critic, NodeId x,
                     std::optional<NodeId> hidden_bias) {
  const CriticConfig& cfg = critic.config();
  const std::string& p = cfg.prefix;
  NodeId h = scaled_input(g, cfg, x);
  if (cfg.image_side) {
    const ConvGeometry geom{1, cfg.image_side, cfg.image_side, cfg.conv_channels};
    h = g.leaky_relu(g.conv2d(h, g.param(p + "conv.w"), g.param(p + "conv.b"), geom), cfg.leak);
  }
  NodeId pre1 = g.affine(h, g.param(p + "w1"), g.param(p + "b1"));
  if (hidden_bias) pre1 = g.add(pre1, *hidden_bias);
  const NodeId a1 = g.leaky_relu(pre1, cfg.leak);
  const NodeId a2 = g.leaky_relu(g.affine(a1, g.param(p + "w2"), g.param(p + "b2")), cfg.leak);
  return g.affine(a2, g.param(p + "w3"), g.param(p + "b3"));
}

template <typename T>
NodeId append_wgan_objective(Graph<T>& g, NodeId scores_real, NodeId scores_gen) {
  return g.sub(g.mean(scores_real), g.mean(scores_gen));
}

template <typename T>
Tensor<T> critic_value(const Critic<T>& critic, const Tensor<T>& x) {
  if (x.empty()) throw InvalidArgument("critic_value: empty batch");
  Graph<T> g;
  const NodeId out = append_critic(g, critic, g.input("x", false));
  return evaluate(g, TensorMap<T>{{"x", x}}, ParamView<T>(critic.params()))[out];
}

template <typename T>
double wgan_objective(const Critic<T>& critic, const Tensor<T>& x_real, const Tensor<T>& x_gen) {
  if (x_real.empty() || x_gen.empty()) throw InvalidArgument("wgan_objective: empty batch");
  if (x_real.cols() != x_gen.cols()) throw ShapeError("wgan_objective: batch widths differ");
  Graph<T> g;
  const NodeId fr = append_critic(g, critic, g.input("x_real", false));
  const NodeId fg = append_critic(g, critic, g.input("x_gen", false));
  const NodeId w = append_wgan_objective(g, fr, fg);
  const auto acts = evaluate(g, TensorMap<T>{{"x_real", x_real}, {"x_gen", x_gen}},
                             ParamView<T>(critic.params()));
  return static_cast<double>(acts[w].item());
}

double lipschitz_bound(const CriticConfig& cfg) {
  if (cfg.image_side) throw InvalidArgument("lipschitz_bound: dense trunks only");
  // ||dh1||_inf <= c ||dx||_1; each later layer multiplies by width * c.
  const double c = cfg.clip_c;
  const double h = static_cast<double>(cfg.hidden);
  return std::abs(cfg.input_scale) * c * (h * c) * (h * c);
}

template <typename T>
FastCritic<T>::FastCritic(CriticConfig trunk, EmbedConfig embed, std::uint64_t seed)
    : trunk_(std::move(trunk), seed), ecfg_(std::move(embed)) {
  if (ecfg_.width < 1) throw InvalidArgument("embedding width must be positive");
  Rng rng(stream_seed(seed, 0xE3B));
  auto init = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor<T> w = Tensor<T>::matrix(fan_in, fan_out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : w.data()) x = static_cast<T>(rng.normal() * sd);
    return w;
  };
  const std::string& p = ecfg_.prefix;
  const std::size_t e = ecfg_.width;
  embed_[p + "in.w"] = init(trunk_.config().dim, e);
  embed_[p + "in.b"] = Tensor<T>::matrix(1, e);
  for (std::size_t b = 0; b < ecfg_.blocks; ++b) {
    const std::string bp = p + "gate" + std::to_string(b) + ".";
    embed_[bp + "w"] = init(e, 2 * e);
    embed_[bp + "b"] = Tensor<T>::matrix(1, 2 * e);
  }
  // Zero projection: a fresh fast critic scores exactly like its trunk.
  embed_[p + "proj"] = Tensor<T>::matrix(e, trunk_.config().hidden);
}

template <typename T>
NodeId append_embedding(Graph<T>& g, const FastCritic<T>& fast, NodeId x_extra) {
  const EmbedConfig& ec = fast.embed_config();
  const std::string& p = ec.prefix;
  const std::size_t e = ec.width;
  NodeId h = g.affine(scaled_input(g, fast.trunk().config(), x_extra), g.param(p + "in.w"),
                      g.param(p + "in.b"));
  for (std::size_t b = 0; b < ec.blocks; ++b) {
    const std::string bp = p + "gate" + std::to_string(b) + ".";
    const NodeId ab = g.affine(h, g.param(bp + "w"), g.param(bp + "b"));
    const NodeId gate = g.mul(g.tanh(g.slice_cols(ab, 0, e)), g.sigmoid(g.slice_cols(ab, e, 2 * e)));
    h = g.add(h, gate);
  }
  return g.col_mean(h);
}

template <typename T>
NodeId append_fast_critic(Graph<T>& g, const FastCritic<T>& fast, NodeId x, NodeId embedding) {
  const NodeId bias = g.matmul(embedding, g.param(fast.embed_config().prefix + "proj"));
  return append_critic(g, fast.trunk(), x, bias);
}

template <typename T>
Tensor<T> embed_distribution(const FastCritic<T>& fast, const Tensor<T>& x_extra) {
  if (x_extra.empty()) throw InvalidArgument("embed_distribution: empty extra batch");
  Graph<T> g;
  const NodeId e = append_embedding(g, fast, g.input("x_e", false));
  return evaluate(g, TensorMap<T>{{"x_e", x_extra}}, fast.view())[e];
}

template <typename T>
Tensor<T> fast_critic_value(const FastCritic<T>& fast, const Tensor<T>& x, const Tensor<T>& x_extra) {
  if (x.empty() || x_extra.empty()) throw InvalidArgument("fast_critic_value: empty batch");
  Graph<T> g;
  const NodeId e = append_embedding(g, fast, g.input("x_e", false));
  const NodeId out = append_fast_critic(g, fast, g.input("x", false), e);
  return evaluate(g, TensorMap<T>{{"x", x}, {"x_e", x_extra}}, fast.view())[out];
}

template <typename T>
Tensor<T> fast_critic_value_with_embedding(const FastCritic<T>& fast, const Tensor<T>& x,
                                           const Tensor<T>& embedding) {
  Graph<T> g;
  const NodeId out = append_fast_critic(g, fast, g.input("x", false), g.input("embedding", false));
  return evaluate(g, TensorMap<T>{{"x", x}, {"embedding", embedding}}, fast.view())[out];
}

#define FLOWCRITIC_INSTANTIATE(T)                                                                 \
  template class Critic<T>;                                                                       \
  template class FastCritic<T>;                                                                   \
  template NodeId append_critic(Graph<T>&, const Critic<T>&, NodeId, std::optional<NodeId>);     \
  template NodeId append_wgan_objective(Graph<T>&, NodeId, NodeId);                              \
  template Tensor<T> critic_value(const Critic<T>&, const Tensor<T>&);                           \
  template double wgan_objective(const Critic<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template NodeId append_embedding(Graph<T>&, const FastCritic<T>&, NodeId);                     \
  template NodeId append_fast_critic(Graph<T>&, const FastCritic<T>&, NodeId, NodeId);           \
  template Tensor<T> embed_distribution(const FastCritic<T>&, const Tensor<T>&);                 \
  template Tensor<T> fast_critic_value(const FastCritic<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> fast_critic_value_with_embedding(const FastCritic<T>&, const Tensor<T>&,    \
                                                      const Tensor<T>&);

FLOWCRITIC_INSTANTIATE(float)
FLOWCRITIC_INSTANTIATE(double)
#undef FLOWCRITIC_INSTANTIATE

}  // namespace flowcritic
