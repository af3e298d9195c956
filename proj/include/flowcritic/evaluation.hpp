#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "flowcritic/critic.hpp"
#include "flowcritic/datapipe.hpp"
#include "flowcritic/flow.hpp"

namespace flowcritic {

/// Draws n rows. Sources own whatever state they need beyond `rng`.
template <typename T>
using SampleSource = std::function<Tensor<T>(std::size_t n, Rng& rng)>;

/// Rows drawn with replacement from a dataset; images get fresh noise.
template <typename T>
SampleSource<T> dataset_source(const Dataset& data);

/// Rows drawn with replacement from a fixed matrix.
template <typename T>
SampleSource<T> matrix_source(Tensor<T> rows);

/// Fresh samples from a frozen copy of the model.
template <typename T>
SampleSource<T> model_source(FlowModel<T> model);

struct IndependentCriticConfig {
  CriticConfig critic;
  std::size_t budget = 2000;
  std::size_t batch_size = 64;
  double lr = 5e-5;
  std::uint64_t seed = 0;
};

/// Evaluation-only critic. It never feeds gradients to any generator.
template <typename T>
struct IndependentCritic {
  Critic<T> critic;
  std::size_t updates = 0;
};

/// Maximises mean f(valid) - mean f(gen) with rmsprop and clipping after
/// every update. A zero budget yields the all-zero critic.
template <typename T>
IndependentCritic<T> train_independent_critic(const SampleSource<T>& valid,
                                              const SampleSource<T>& gen,
                                              const IndependentCriticConfig& cfg);

struct WEstimate {
  double value = 0.0;
  double bootstrap_std = 0.0;
  std::vector<double> batch_values;
};

/// Mean over n_batches of mean f(a) - mean f(b); the std comes from
/// `resamples` bootstrap draws over the per-batch differences.
template <typename T>
WEstimate w_hat(const IndependentCritic<T>& ic, const SampleSource<T>& a, const SampleSource<T>& b,
                std::size_t n_batches, std::size_t batch_size, std::uint64_t seed,
                std::size_t resamples = 200);

/// sqrt(sa^2 + sb^2).
double pooled_std(const WEstimate& a, const WEstimate& b);

struct Histogram {
  std::vector<double> edges;  ///< n_bins + 1 ascending edges
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const;
};

/// Equal-width bins over [min, max] of the values; the top edge is inclusive.
Histogram histogram(std::span<const double> values, std::size_t n_bins);

/// Per-example negative log-density in nats.
template <typename T>
std::vector<double> nll_values(const FlowModel<T>& model, const Tensor<T>& data);

template <typename T>
Histogram nll_histogram(const FlowModel<T>& model, const Tensor<T>& data, std::size_t n_bins);

struct GridSpec {
  std::size_t bins = 20;
  double lo = -4.0;
  double hi = 4.0;
};

struct LatentStats {
  std::vector<double> mean;  ///< every latent dim
  std::vector<double> std;   ///< population std, every latent dim
  std::array<std::size_t, 2> dims{0, 1};
  GridSpec grid;
  std::vector<std::uint64_t> counts;  ///< bins x bins, row = first dim; outliers dropped
};

template <typename T>
LatentStats latent_stats(const FlowModel<T>& model, const Tensor<T>& data,
                         std::array<std::size_t, 2> dims, GridSpec grid = {});

struct ProbeRank {
  std::vector<double> singular_values;  ///< descending
  std::size_t rank = 0;
  double fd_error = 0.0;  ///< max relative gap to central differences
};

/// Dense dz1/dz0 at each probe row: D reverse-mode passes, columns checked
/// against central differences in double, then a Jacobi SVD.
template <typename T>
std::vector<ProbeRank> jacobian_rank(const FlowModel<T>& model, const Tensor<T>& probes,
                                     double tol_ratio = 1e-3, double fd_tol = 1e-4);

/// Reverse-mode Jacobian of the forward map at one point, [D, D] with
/// J(i, j) = dz1_i / dz0_j.
template <typename T>
Tensor<double> flow_jacobian(const FlowModel<T>& model, std::span<const T> z0);

/// Singular values of a square or tall matrix, descending. Throws
/// ConvergenceError after `max_sweeps` without convergence.
std::vector<double> singular_values(const Tensor<double>& a, int max_sweeps = 60);

std::size_t numerical_rank(const std::vector<double>& sv, double tol_ratio);

/// Flow whose samples are N(mu, I): two complementary couplings with only
/// their shift biases set.
template <typename T>
FlowModel<T> gaussian_shift_flow(const std::vector<double>& mu);

struct DiscriminatorConfig {
  std::size_t hidden = 64;
  double leak = 0.2;
  std::size_t updates = 5000;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::string prefix = "disc.";
};

/// Two hidden layers, logit output.
template <typename T>
struct Discriminator {
  DiscriminatorConfig cfg;
  std::size_t dim = 0;
  ParamStore<T> params;
};

template <typename T>
Discriminator<T> make_discriminator(std::size_t dim, const DiscriminatorConfig& cfg);

template <typename T>
NodeId append_disc_logit(Graph<T>& g, const Discriminator<T>& d, NodeId x);

/// Logistic loss with prior samples labelled 1 and q samples labelled 0, so
/// the optimum has logit = log p(z) - log q(z).
template <typename T>
NodeId append_disc_loss(Graph<T>& g, const Discriminator<T>& d, NodeId x_prior, NodeId x_q);

struct KlGap {
  double kl_unbiased = 0.0;
  double kl_disc = 0.0;
};

/// Unconditional q given by a flow, prior N(0, I). kl_unbiased averages
/// log q(z) - log p(z) over n samples from q; kl_disc averages -logit D(z)
/// over the same samples after fitting D.
template <typename T>
KlGap kl_gap(const FlowModel<T>& flow_q, const DiscriminatorConfig& disc, std::size_t n);

/// Number of worker threads: FLOWCRITIC_THREADS if set and positive,
/// otherwise the hardware concurrency.
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n) across worker_threads(). The first exception
/// is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace flowcritic
