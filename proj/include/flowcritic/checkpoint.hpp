#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flowcritic/graph.hpp"
#include "flowcritic/training.hpp"

namespace flowcritic {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Header fields plus named arrays. Arrays are held as doubles in memory and
/// written in `dtype`; values must be representable in it.
///
/// Layout: "RNVP", u32 version, u8 dtype, u64 step, u64 seed, then per
/// array u16 name length, name bytes, u8 ndim, u32 dims, payload; finally
/// the CRC32 of the array section. All integers little-endian.
struct Checkpoint {
  DType dtype = DType::f32;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  TensorMap<double> arrays;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);

/// Verifies magic, version and CRC before parsing any array.
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

/// Writes to a temporary name and renames, so readers never see a partial
/// file. Throws IoError carrying errno on failure.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Integers as 16-bit chunks, exact in either float width.
Tensor<double> pack_words(std::span<const std::uint64_t> words);
std::vector<std::uint64_t> unpack_words(const Tensor<double>& packed);

Tensor<double> pack_doubles(std::span<const double> values);
std::vector<double> unpack_doubles(const Tensor<double>& packed);

enum class ModelKind : std::uint8_t { nvp = 0, identity = 1, uniform_stub = 2 };

struct ModelMeta {
  ModelKind kind = ModelKind::nvp;
  std::size_t dim = 0;
  int levels = 1;
  std::size_t hidden = 0;
  Objective objective = Objective::mle;
  std::size_t image_side = 0;  ///< non-zero for square image models
};

ModelMeta read_meta(const Checkpoint& ckpt);
void write_meta(Checkpoint& ckpt, const ModelMeta& meta);

/// Generator weights and structure only.
template <typename T>
Checkpoint model_checkpoint(const FlowModel<T>& model, ModelKind kind, std::uint64_t seed,
                            std::size_t image_side = 0);

/// Checkpoint for the constant density 1 on [0, 1)^dim.
Checkpoint uniform_stub_checkpoint(std::size_t dim);

template <typename T>
FlowModel<T> model_from_checkpoint(const Checkpoint& ckpt);

/// Full training state: weights, optimiser moments, RNG streams, counters.
template <typename T>
Checkpoint snapshot(const Trainer<T>& trainer);

/// Overwrites the trainer's weights and run state. The trainer must have
/// been built with the same configuration.
template <typename T>
void restore(Trainer<T>& trainer, const Checkpoint& ckpt);

}  // namespace flowcritic
