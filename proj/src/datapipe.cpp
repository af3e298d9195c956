#include "flowcritic/datapipe.hpp"

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <numeric>

namespace flowcritic {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string(), errno);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_le32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_le32(const std::vector<unsigned char>& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[off + i]} << (8 * i);
  return v;
}

double log_sum_exp(std::span<const double> xs) {
  const double m = *std::max_element(xs.begin(), xs.end());
  double s = 0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

Dataset subset(const Dataset& all, std::span<const std::size_t> idx, Split split) {
  Dataset out;
  out.split = split;
  out.origin = all.origin;
  out.oracle = all.oracle;
  out.examples = gather_rows(all.examples, idx);
  if (all.pixels) {
    IntBatch p = *all.pixels;
    p.rows = idx.size();
    p.values.resize(idx.size() * p.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(all.pixels->values.begin() + static_cast<std::ptrdiff_t>(idx[i] * p.cols),
                  p.cols, p.values.begin() + static_cast<std::ptrdiff_t>(i * p.cols));
    }
    out.pixels = std::move(p);
  }
  return out;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

template <typename T>
Tensor<T> dequantize(const IntBatch& pixels, Rng& rng) {
  if (pixels.rows == 0 || pixels.cols == 0) throw InvalidArgument("dequantize: empty batch");
  Tensor<T> z2 = Tensor<T>::matrix(pixels.rows, pixels.cols);
  for (std::size_t i = 0; i < pixels.values.size(); ++i) {
    const std::int32_t v = pixels.values[i];
    if (v < 0 || v >= kIntensityLevels) {
      throw InvalidArgument("dequantize: pixel value " + std::to_string(v) + " out of range");
    }
    // float rounding of v + u could reach v + 1; keep the noise strictly below 1.
    T z = static_cast<T>(v) + static_cast<T>(rng.uniform());
    if (z >= static_cast<T>(v + 1)) z = std::nextafter(static_cast<T>(v + 1), static_cast<T>(v));
    z2[i] = z;
  }
  return z2;
}

template <typename T>
Scaled<T> scale_to_unit(const Tensor<T>& z2) {
  Scaled<T> out{z2, -static_cast<double>(z2.cols()) * std::log(256.0)};
  for (auto& x : out.z1.data()) x /= T(256);
  return out;
}

double bits_per_dim(double logprob_z1_nats, std::size_t dim) {
  if (dim < 1) throw InvalidArgument("bits_per_dim: D must be at least 1");
  const double d = static_cast<double>(dim);
  return (-logprob_z1_nats + d * std::log(256.0)) / (d * std::numbers::ln2);
}

IntBatch load_idx(const std::filesystem::path& path, std::optional<std::size_t> downsample_side) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4) throw TruncatedError("IDX file shorter than its magic number");
  const std::uint32_t magic = read_be32(bytes, 0);
  std::size_t ndim = 0;
  if (magic == 0x00000803) {
    ndim = 3;
  } else if (magic == 0x00000801) {
    ndim = 1;
  } else {
    throw FormatError("bad IDX magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }());
  }
  const std::size_t header = 4 + 4 * ndim;
  if (bytes.size() < header) throw TruncatedError("IDX header truncated");
  std::array<std::uint64_t, 3> dims{1, 1, 1};
  std::uint64_t total = 1;
  constexpr std::uint64_t limit = std::uint64_t{1} << 40;
  for (std::size_t k = 0; k < ndim; ++k) {
    dims[k] = read_be32(bytes, 4 + 4 * k);
    if (dims[k] == 0) throw FormatError("IDX dimension " + std::to_string(k) + " is zero");
    if (total > limit / dims[k]) throw OverflowError("IDX dimensions overflow");
    total *= dims[k];
  }
  if (bytes.size() - header < total) {
    throw TruncatedError("IDX payload truncated: expected " + std::to_string(total) +
                         " bytes, found " + std::to_string(bytes.size() - header));
  }
  IntBatch out;
  out.rows = dims[0];
  out.height = ndim == 3 ? dims[1] : 1;
  out.width = ndim == 3 ? dims[2] : 1;
  out.cols = out.height * out.width;
  out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                    bytes.begin() + static_cast<std::ptrdiff_t>(header + total));
  if (downsample_side && ndim == 3) return downsample(out, *downsample_side);
  return out;
}

IntBatch downsample(const IntBatch& images, std::size_t side) {
  if (side == 0 || images.height == 0 || images.width == 0) {
    throw InvalidArgument("downsample: bad geometry");
  }
  IntBatch out;
  out.rows = images.rows;
  out.height = out.width = side;
  out.cols = side * side;
  out.values.resize(out.rows * out.cols);
  const double sy = static_cast<double>(images.height) / static_cast<double>(side);
  const double sx = static_cast<double>(images.width) / static_cast<double>(side);
  for (std::size_t n = 0; n < images.rows; ++n) {
    for (std::size_t oy = 0; oy < side; ++oy) {
      const double y0 = static_cast<double>(oy) * sy, y1 = y0 + sy;
      for (std::size_t ox = 0; ox < side; ++ox) {
        const double x0 = static_cast<double>(ox) * sx, x1 = x0 + sx;
        double acc = 0, area = 0;
        for (auto iy = static_cast<std::size_t>(y0); static_cast<double>(iy) < y1 && iy < images.height; ++iy) {
          const double wy = std::min(y1, static_cast<double>(iy + 1)) - std::max(y0, static_cast<double>(iy));
          for (auto ix = static_cast<std::size_t>(x0); static_cast<double>(ix) < x1 && ix < images.width; ++ix) {
            const double wx = std::min(x1, static_cast<double>(ix + 1)) - std::max(x0, static_cast<double>(ix));
            acc += wy * wx * images.at(n, iy * images.width + ix);
            area += wy * wx;
          }
        }
        out.values[n * out.cols + oy * side + ox] = static_cast<std::int32_t>(std::lround(acc / area));
      }
    }
  }
  return out;
}

IntBatch flip_horizontal(const IntBatch& images) {
  IntBatch out = images;
  for (std::size_t n = 0; n < images.rows; ++n) {
    for (std::size_t y = 0; y < images.height; ++y) {
      auto row = out.values.begin() + static_cast<std::ptrdiff_t>(n * images.cols + y * images.width);
      std::reverse(row, row + static_cast<std::ptrdiff_t>(images.width));
    }
  }
  return out;
}

std::array<double, 2> RingMixture::center(std::size_t mode) const {
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(mode) / static_cast<double>(modes);
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

double RingMixture::logpdf(std::span<const double> x) const {
  if (x.size() != dim()) throw ShapeError("RingMixture::logpdf: wrong dimensionality");
  const double log_norm = -std::log(2.0 * std::numbers::pi * sigma * sigma) -
                          std::log(static_cast<double>(modes));
  std::vector<double> terms(modes);
  double total = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    for (std::size_t m = 0; m < modes; ++m) {
      const auto c = center(m);
      const double dx = x[2 * p] - c[0], dy = x[2 * p + 1] - c[1];
      terms[m] = log_norm - 0.5 * (dx * dx + dy * dy) / (sigma * sigma);
    }
    total += log_sum_exp(terms);
  }
  return total;
}

double Dataset::oracle_mean_logpdf() const {
  if (!oracle) throw InvalidArgument("dataset has no oracle density");
  double acc = 0;
  for (std::size_t i = 0; i < size(); ++i) acc += oracle->logpdf(examples.row(i));
  return acc / static_cast<double>(size());
}

Dataset synth_ring(std::size_t n, const RingMixture& mixture, std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("synth_ring: n must be at least 1");
  if (!(mixture.sigma > 0) || mixture.modes < 1 || mixture.pairs < 1) {
    throw InvalidArgument("synth_ring: need sigma > 0, modes >= 1, pairs >= 1");
  }
  Rng rng(seed);
  Dataset out;
  out.origin = Origin::synth2d;
  out.oracle = mixture;
  out.examples = Tensor<double>::matrix(n, mixture.dim());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < mixture.pairs; ++p) {
      const auto c = mixture.center(rng.index(mixture.modes));
      out.examples(i, 2 * p) = c[0] + mixture.sigma * rng.normal();
      out.examples(i, 2 * p + 1) = c[1] + mixture.sigma * rng.normal();
    }
  }
  return out;
}

Dataset image_dataset(const IntBatch& pixels, const PreprocessSpec& spec) {
  if (pixels.cols != spec.dim) {
    throw ShapeError("image_dataset: images have " + std::to_string(pixels.cols) +
                     " dims, spec says " + std::to_string(spec.dim));
  }
  if (spec.intensity_levels != kIntensityLevels) {
    throw InvalidArgument("only 256 intensity levels are supported");
  }
  Rng noise(spec.noise_seed);
  Dataset out;
  out.origin = Origin::idx_images;
  out.examples = scale_to_unit(dequantize<double>(pixels, noise)).z1;
  out.pixels = pixels;
  return out;
}

Splits split_and_augment(const Dataset& all, std::array<double, 3> ratios, bool flip_augment,
                         std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(ratios[0] > 0 && ratios[1] > 0 && ratios[2] > 0) || std::abs(total - 1.0) > 1e-9) {
    throw InvalidArgument("split ratios must be positive and sum to 1");
  }
  const std::size_t n = all.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng.engine());

  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto n_valid = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n)));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= n) {
    throw InvalidArgument("split produces an empty subset for n=" + std::to_string(n));
  }
  std::span<const std::size_t> p(perm);
  Splits out{subset(all, p.subspan(0, n_train), Split::train),
             subset(all, p.subspan(n_train, n_valid), Split::valid),
             subset(all, p.subspan(n_train + n_valid), Split::test)};

  if (flip_augment && all.origin == Origin::idx_images && out.train.pixels) {
    const IntBatch flipped = flip_horizontal(*out.train.pixels);
    // Flipping the dequantized examples keeps their noise paired with the source pixels.
    Tensor<double> ex_flipped = out.train.examples;
    for (std::size_t r = 0; r < ex_flipped.rows(); ++r) {
      for (std::size_t y = 0; y < flipped.height; ++y) {
        auto row = ex_flipped.row(r).subspan(y * flipped.width, flipped.width);
        std::reverse(row.begin(), row.end());
      }
    }
    IntBatch& px = *out.train.pixels;
    px.values.insert(px.values.end(), flipped.values.begin(), flipped.values.end());
    px.rows *= 2;
    out.train.examples = stack_rows(out.train.examples, ex_flipped);
  }
  return out;
}

template <typename T>
Tensor<T> draw_batch(const Dataset& data, std::size_t n, Rng& index_rng, Rng& noise) {
  if (data.size() == 0) throw InvalidArgument("draw_batch: empty dataset");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = index_rng.index(data.size());
  if (data.pixels) {
    IntBatch sel;
    sel.rows = n;
    sel.cols = data.pixels->cols;
    sel.height = data.pixels->height;
    sel.width = data.pixels->width;
    sel.values.resize(n * sel.cols);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(data.pixels->values.begin() + static_cast<std::ptrdiff_t>(idx[i] * sel.cols),
                  sel.cols, sel.values.begin() + static_cast<std::ptrdiff_t>(i * sel.cols));
    }
    return scale_to_unit(dequantize<T>(sel, noise)).z1;
  }
  return gather_rows(data.examples, idx).template cast<T>();
}

void save_fc2d(const std::filesystem::path& path, const Tensor<double>& examples) {
  if (examples.rank() != 2) throw ShapeError("save_fc2d: need a rank-2 tensor");
  std::vector<unsigned char> out{'F', 'C', '2', 'D'};
  put_le32(out, static_cast<std::uint32_t>(examples.rows()));
  put_le32(out, static_cast<std::uint32_t>(examples.cols()));
  put_le32(out, 0);
  for (double v : examples.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw IoError("write failed: " + path.string(), errno);
}

Tensor<double> load_fc2d(const std::filesystem::path& path) {
  const auto b = read_file(path);
  if (b.size() < 16) throw TruncatedError("FC2D header truncated");
  if (std::memcmp(b.data(), "FC2D", 4) != 0) throw FormatError("bad FC2D magic");
  const std::uint64_t n = get_le32(b, 4), d = get_le32(b, 8);
  if (n == 0 || d == 0) throw FormatError("FC2D with zero extent");
  if (b.size() - 16 != n * d * 8) throw TruncatedError("FC2D payload size mismatch");
  Tensor<double> t = Tensor<double>::matrix(n, d);
  for (std::size_t i = 0; i < n * d; ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t{b[16 + 8 * i + k]} << (8 * k);
    t[i] = std::bit_cast<double>(bits);
  }
  return t;
}

template Tensor<float> dequantize(const IntBatch&, Rng&);
template Tensor<double> dequantize(const IntBatch&, Rng&);
template Scaled<float> scale_to_unit(const Tensor<float>&);
template Scaled<double> scale_to_unit(const Tensor<double>&);
template Tensor<float> draw_batch(const Dataset&, std::size_t, Rng&, Rng&);
template Tensor<double> draw_batch(const Dataset&, std::size_t, Rng&, Rng&);

}  // namespace flowcritic
