#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "flowcritic/rng.hpp"
#include "flowcritic/tensor.hpp"

namespace flowcritic {

inline constexpr int kIntensityLevels = 256;

/// Integer examples, one per row. Images keep their geometry so they can be
/// flipped and downsampled.
struct IntBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> values;

  std::int32_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const IntBatch&) const = default;
};

/// z2 = pixels + u with u ~ Uniform[0, 1).
template <typename T>
Tensor<T> dequantize(const IntBatch& pixels, Rng& rng);

template <typename T>
struct Scaled {
  Tensor<T> z1;
  double logdet_adjust;  ///< log p(z2) = log p(z1) + logdet_adjust
};

/// z1 = z2 / 256; the density correction is -D ln 256.
template <typename T>
Scaled<T> scale_to_unit(const Tensor<T>& z2);

/// (-logprob_z1 + D ln 256) / (D ln 2).
double bits_per_dim(double logprob_z1_nats, std::size_t dim);

/// Reads an IDX file (0x00000803 images or 0x00000801 labels). When
/// `downsample_side` is set, images are block-averaged to that side length
/// and rounded.
IntBatch load_idx(const std::filesystem::path& path,
                  std::optional<std::size_t> downsample_side = std::nullopt);

/// Area-weighted block averaging to side x side, rounded to nearest.
IntBatch downsample(const IntBatch& images, std::size_t side);

IntBatch flip_horizontal(const IntBatch& images);

/// Equal-weight mixture of `modes` isotropic Gaussians on a circle, repeated
/// independently over `pairs` coordinate pairs (D = 2 * pairs).
struct RingMixture {
  std::size_t modes = 8;
  double radius = 2.0;
  double sigma = 0.05;
  std::size_t pairs = 1;

  std::size_t dim() const { return 2 * pairs; }
  double logpdf(std::span<const double> x) const;
  std::array<double, 2> center(std::size_t mode) const;
};

enum class Origin : std::uint8_t { idx_images, synth2d };
enum class Split : std::uint8_t { train, valid, test };

const char* split_name(Split s);

struct Dataset {
  Split split = Split::train;
  Origin origin = Origin::synth2d;
  Tensor<double> examples;          ///< [n, D] in model space (z1)
  std::optional<IntBatch> pixels;   ///< integer source for fresh dequantization
  std::optional<RingMixture> oracle;

  std::size_t size() const { return examples.rows(); }
  std::size_t dim() const { return examples.cols(); }
  /// Mean oracle log-density over the examples.
  double oracle_mean_logpdf() const;
};

Dataset synth_ring(std::size_t n, const RingMixture& mixture, std::uint64_t seed);

struct PreprocessSpec {
  std::size_t dim = 64;
  int intensity_levels = kIntensityLevels;
  std::uint64_t noise_seed = 0;
  bool flip_augment = false;
};

/// Dequantizes and scales integer images into a dataset (fixed noise from
/// spec.noise_seed for the stored examples).
Dataset image_dataset(const IntBatch& pixels, const PreprocessSpec& spec);

struct Splits {
  Dataset train;
  Dataset valid;
  Dataset test;
};

/// Seeded shuffle, contiguous split, then optional flip augmentation of the
/// training split (image origin only).
Splits split_and_augment(const Dataset& all, std::array<double, 3> ratios, bool flip_augment,
                         std::uint64_t seed);

/// Draws n rows with replacement. Image datasets are re-dequantized with
/// `noise` on every draw.
template <typename T>
Tensor<T> draw_batch(const Dataset& data, std::size_t n, Rng& index_rng, Rng& noise);

/// Raw f64 blocks: "FC2D", u32 n, u32 d, u32 reserved, then n*d LE doubles.
void save_fc2d(const std::filesystem::path& path, const Tensor<double>& examples);
Tensor<double> load_fc2d(const std::filesystem::path& path);

}  // namespace flowcritic
