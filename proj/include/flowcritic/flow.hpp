#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowcritic/graph.hpp"
#include "flowcritic/rng.hpp"

namespace flowcritic {

/// One affine coupling. Along the generation direction (latent -> data)
/// unmasked active coordinates become x*exp(s) + t, with s and t computed
/// from the masked active coordinates; everything else passes through.
struct AffineCoupling {
  std::string prefix;                 ///< parameter name prefix, e.g. "flow.c03."
  std::vector<std::uint8_t> mask;     ///< 1 = pass-through
  std::vector<std::uint8_t> active;   ///< 1 = not yet factored out at this level
  int level = 1;
  double scale_cap = 4.0;

  bool conditions_on(std::size_t d) const { return mask[d] && active[d]; }
  bool updates(std::size_t d) const { return !mask[d]; }
};

/// Stack of couplings stored in inference order (data -> latent): level 1
/// first. Sampling runs the list back to front.
template <typename T>
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(std::size_t dim, int levels, std::size_t hidden_width)
      : dim_(dim), levels_(levels), hidden_(hidden_width) {}

  /// Zero-layer model; z1 == z0.
  static FlowModel identity(std::size_t dim) { return FlowModel(dim, 1, 0); }

  std::size_t dim() const { return dim_; }
  int levels() const { return levels_; }
  std::size_t hidden_width() const { return hidden_; }

  const std::vector<AffineCoupling>& layers() const { return layers_; }
  std::vector<AffineCoupling>& layers() { return layers_; }
  const ParamStore<T>& params() const { return params_; }
  ParamStore<T>& params() { return params_; }

  /// factored()[l] lists the dims frozen after level l+1 (empty for the last).
  const std::vector<std::vector<std::size_t>>& factored() const { return factored_; }
  std::vector<std::vector<std::size_t>>& factored() { return factored_; }

  template <typename U>
  FlowModel<U> cast() const {
    FlowModel<U> out(dim_, levels_, hidden_);
    out.layers() = layers_;
    out.factored() = factored_;
    for (const auto& [name, p] : params_) out.params().emplace(name, p.template cast<U>());
    return out;
  }

 private:
  std::size_t dim_ = 0;
  int levels_ = 1;
  std::size_t hidden_ = 0;
  std::vector<AffineCoupling> layers_;
  std::vector<std::vector<std::size_t>> factored_;
  ParamStore<T> params_;
};

/// Couplings per level count: 7, 13 or 19 in total.
int couplings_for_levels(int levels);

/// Real-NVP analogue with 1-3 levels. Hidden layers are randomly
/// initialised; the s and t heads start at zero, so the model is the
/// identity until trained.
template <typename T>
FlowModel<T> build_nvp(int levels, std::size_t dim, std::size_t hidden_width, std::uint64_t seed);

/// Appends one zero-initialised coupling with the given mask to the
/// inference end of the stack.
template <typename T>
void append_identity_coupling(FlowModel<T>& model, std::vector<std::uint8_t> mask,
                              std::uint64_t seed);

struct FlowNodes {
  NodeId value;
  NodeId logdet;  ///< per-row log|det dz1/dz0|, shape [m, 1]
};

template <typename T>
FlowNodes append_forward(Graph<T>& g, const FlowModel<T>& model, NodeId z0);

template <typename T>
FlowNodes append_inverse(Graph<T>& g, const FlowModel<T>& model, NodeId x);

/// Standard-normal log-density per row, shape [m, 1].
template <typename T>
NodeId append_prior_logpdf(Graph<T>& g, NodeId z, std::size_t dim);

/// log p(x) = prior(z0) - logdet, per row.
template <typename T>
NodeId append_log_prob(Graph<T>& g, const FlowModel<T>& model, NodeId x);

template <typename T>
struct FlowResult {
  Tensor<T> value;
  Tensor<T> logdet;
};

template <typename T>
FlowResult<T> forward(const FlowModel<T>& model, const Tensor<T>& z0);

template <typename T>
FlowResult<T> inverse(const FlowModel<T>& model, const Tensor<T>& x);

/// Nats per example, shape [m, 1].
template <typename T>
Tensor<T> log_prob(const FlowModel<T>& model, const Tensor<T>& x);

template <typename T>
Tensor<T> prior_logpdf(const Tensor<T>& z);

template <typename T>
struct Samples {
  Tensor<T> x;
  Tensor<T> log_prob;
};

template <typename T>
Samples<T> sample(const FlowModel<T>& model, std::size_t n, Rng& rng);

template <typename T>
Samples<T> sample(const FlowModel<T>& model, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample(model, n, rng);
}

enum class LatentHalf { first, second };

/// Infers z0, redraws one half of it from the prior and regenerates. The
/// first half is dims [0, D/2), rounding down.
template <typename T>
Tensor<T> partial_resample(const FlowModel<T>& model, const Tensor<T>& x, LatentHalf half,
                           Rng& rng);

}  // namespace flowcritic
