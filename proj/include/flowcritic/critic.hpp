#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "flowcritic/graph.hpp"
#include "flowcritic/optim.hpp"

namespace flowcritic {

struct CriticConfig {
  std::size_t dim = 2;
  std::size_t hidden = 64;
  double clip_c = 0.01;
  double leak = 0.2;
  /// Applied as scale*x + shift before the trunk, mapping data into [-1, 1].
  double input_scale = 1.0;
  double input_shift = 0.0;
  /// Non-zero enables a leading 3x3 convolution over side x side images.
  std::size_t image_side = 0;
  std::size_t conv_channels = 8;
  std::string prefix = "critic.";
};

/// Clipped leaky-rectifier score network f: R^D -> R.
template <typename T>
class Critic {
 public:
  Critic() = default;

  /// Hidden weights uniform in the clip box, output layer zero, so a fresh
  /// critic scores everything 0.
  Critic(CriticConfig cfg, std::uint64_t seed);

  /// Every parameter zero.
  static Critic zeros(CriticConfig cfg);

  const CriticConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }
  const ClipSet& clip_set() const { return clip_set_; }

  void clip() { clip_to_box(params_, cfg_.clip_c, clip_set_); }

 private:
  void allocate();

  CriticConfig cfg_;
  ParamStore<T> params_;
  ClipSet clip_set_;
};

/// Scores per row, shape [m, 1]. `hidden_bias` ([1, hidden]) is added right
/// after the first dense affine layer.
template <typename T>
NodeId append_critic(Graph<T>& g, const Critic<T>& critic, NodeId x,
                     std::optional<NodeId> hidden_bias = std::nullopt);

/// mean f(x_r) - mean f(x_g) as a scalar node.
template <typename T>
NodeId append_wgan_objective(Graph<T>& g, NodeId scores_real, NodeId scores_gen);

template <typename T>
Tensor<T> critic_value(const Critic<T>& critic, const Tensor<T>& x);

template <typename T>
double wgan_objective(const Critic<T>& critic, const Tensor<T>& x_real, const Tensor<T>& x_gen);

/// Upper bound K on |f(x) - f(x')| / ||x - x'||_1 implied by the clip box and
/// layer widths (dense trunks only).
double lipschitz_bound(const CriticConfig& cfg);

struct EmbedConfig {
  std::size_t width = 32;
  std::size_t blocks = 2;
  std::string prefix = "embed.";
};

/// Critic conditioned on a mean-pooled gated-residual embedding of extra
/// generator samples. Embedding weights live outside the clip set.
template <typename T>
class FastCritic {
 public:
  FastCritic() = default;
  FastCritic(CriticConfig trunk, EmbedConfig embed, std::uint64_t seed);

  const Critic<T>& trunk() const { return trunk_; }
  Critic<T>& trunk() { return trunk_; }
  const ParamStore<T>& embed_params() const { return embed_; }
  ParamStore<T>& embed_params() { return embed_; }
  const EmbedConfig& embed_config() const { return ecfg_; }

  ParamView<T> view() const { return ParamView<T>{&trunk_.params(), &embed_}; }
  void clip() { trunk_.clip(); }

 private:
  Critic<T> trunk_;
  EmbedConfig ecfg_;
  ParamStore<T> embed_;
};

/// Distribution embedding of x_e, shape [1, width].
template <typename T>
NodeId append_embedding(Graph<T>& g, const FastCritic<T>& fast, NodeId x_extra);

/// f(x, x_e) from a precomputed embedding node.
template <typename T>
NodeId append_fast_critic(Graph<T>& g, const FastCritic<T>& fast, NodeId x, NodeId embedding);

template <typename T>
Tensor<T> embed_distribution(const FastCritic<T>& fast, const Tensor<T>& x_extra);

template <typename T>
Tensor<T> fast_critic_value(const FastCritic<T>& fast, const Tensor<T>& x, const Tensor<T>& x_extra);

/// Scores with the embedding replaced by an explicit vector (e.g. zeros).
template <typename T>
Tensor<T> fast_critic_value_with_embedding(const FastCritic<T>& fast, const Tensor<T>& x,
                                           const Tensor<T>& embedding);

}  // namespace flowcritic
