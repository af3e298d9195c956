#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowcritic/datapipe.hpp"
#include "flowcritic/training.hpp"

namespace flowcritic {

/// Bad configuration; `key()` names the offending key.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : InvalidArgument(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Flat key=value run configuration. Lines starting with '#' and blank lines
/// are ignored.
///
///   dataset        synth_ring      synth_ring | synth_ring8 | fc2d:PATH | idx:PATH
///   levels         1               1..3
///   hidden_width   32
///   objective      mle             mle | wgan | combined | wgan_fast
///   lambda         0               combined objective weight
///   n_critic       5               2 when objective is wgan_fast and unset
///   total_steps    1000
///   seed           0
///   precision      f32             f32 | f64
///   out_dir        run
///   clip_c         0.01
///   batch_size     64
///   eval_interval  250
struct RunConfig {
  std::string dataset = "synth_ring";
  int levels = 1;
  std::size_t hidden_width = 32;
  Objective objective = Objective::mle;
  double lambda = 0.0;
  std::optional<int> n_critic;
  std::uint64_t total_steps = 1000;
  std::uint64_t seed = 0;
  DType precision = DType::f32;
  std::string out_dir = "run";
  double clip_c = 0.01;
  std::size_t batch_size = 64;
  std::uint64_t eval_interval = 250;

  int effective_n_critic() const;
  TrainConfig train_config() const;
};

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// The built-in ring datasets: eight modes of sd 0.5 on a radius-3 circle.
RingMixture ring_mixture(std::size_t pairs);

/// Resolves a dataset spec into train/valid/test splits (80/10/10 for
/// files, 10000/1000/1000 for the synthetic rings). Data generation and
/// splitting use a fixed seed so runs with different seeds share data.
Splits load_dataset(const std::string& spec);

/// RFC 4180 field quoting.
std::string csv_field(std::string_view s);

/// "%.17g".
std::string format_double(double v);

/// Append-only CSV with a fixed header and CRLF line ends. Every write is
/// flushed; failures throw IoError.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::string_view header, bool append = false);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void row(const std::vector<std::string>& fields);

 private:
  void write(const std::string& s);

  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
};

/// metrics.csv (step,metric,value,split) plus timing.csv with wall clock
/// times, so the metrics file stays reproducible.
class MetricsFile {
 public:
  MetricsFile(const std::filesystem::path& dir, bool append);
  void write(const MetricsRow& row);

 private:
  CsvWriter metrics_;
  CsvWriter timing_;
};

/// Binary PGM (P5, maxval 255) of a grid of square images, one per row of
/// `images` in [0, 1). Images are tiled row-major, `columns` per row.
void write_pgm_grid(const std::filesystem::path& path, const Tensor<double>& images,
                    std::size_t side, std::size_t columns);

/// Exclusive lock file; the file is removed on destruction.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

class LockHeld : public Error {
 public:
  using Error::Error;
};

}  // namespace flowcritic
