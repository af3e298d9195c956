#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flowcritic/tensor.hpp"

namespace flowcritic {

/// Seeded stream over std::mt19937_64. Normal draws use Box-Muller without
/// a cached spare, so the engine state alone determines the stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  template <typename T>
  Tensor<T> normal_matrix(std::size_t rows, std::size_t cols) {
    Tensor<T> t = Tensor<T>::matrix(rows, cols);
    for (auto& x : t.data()) x = static_cast<T>(normal());
    return t;
  }

  std::mt19937_64& engine() { return engine_; }

  /// Engine state as integers (the standard textual representation, parsed).
  std::vector<std::uint64_t> state() const {
    std::ostringstream os;
    os << engine_;
    std::istringstream is(os.str());
    std::vector<std::uint64_t> words;
    std::uint64_t w;
    while (is >> w) words.push_back(w);
    return words;
  }

  void set_state(const std::vector<std::uint64_t>& words) {
    std::ostringstream os;
    for (std::size_t i = 0; i < words.size(); ++i) os << (i ? " " : "") << words[i];
    std::istringstream is(os.str());
    is >> engine_;
    if (!is) throw FormatError("malformed RNG state");
  }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a run seed and a stream tag.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), 0x9e3779b9u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace flowcritic
