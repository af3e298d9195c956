#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flowcritic/runio.hpp"

namespace flowcritic {

enum ExitCode : int {
  kExitOk = 0,
  kExitBadConfig = 1,
  kExitNanAbort = 2,
  kExitDiskFull = 3,
  kExitChecksum = 4,
};

struct TrainOptions {
  RunConfig config;
  std::optional<std::filesystem::path> resume;  ///< continue from this checkpoint
};

struct EvalOptions {
  RunConfig config;  ///< dataset and out_dir
  std::filesystem::path checkpoint;
  std::vector<std::string> kinds;  ///< wdist, bpd, latents, nllhist, jrank, klgap
  std::size_t critic_budget = 2000;
  std::size_t samples = 10000;
};

enum class SampleMode { fresh, partial_first, partial_second };

SampleMode parse_sample_mode(const std::string& name);

struct SampleOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = ".";
  std::size_t n = 64;
  std::uint64_t seed = 0;
  SampleMode mode = SampleMode::fresh;
  std::optional<std::filesystem::path> input;  ///< FC2D rows for partial modes
};

/// Each command reports progress and errors on `log` and returns an exit
/// code; exceptions are mapped to codes, never propagated.
int cmd_train(const TrainOptions& opts, std::ostream& log);
int cmd_eval(const EvalOptions& opts, std::ostream& log);
int cmd_sample(const SampleOptions& opts, std::ostream& log);

/// Maps an in-flight exception to an exit code and prints it.
int exit_code_for_current_exception(std::ostream& log);

}  // namespace flowcritic
