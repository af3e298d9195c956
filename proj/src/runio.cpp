#include "flowcritic/runio.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fcntl.h>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace flowcritic {

namespace {

constexpr std::uint64_t kDataSeed = 7;

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename I>
I parse_int(std::string_view key, std::string_view v) {
  I out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(std::string(key), "expected an integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  errno = 0;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(out)) {
    throw ConfigError(std::string(key), "expected a finite number, got '" + s + "'");
  }
  return out;
}

}  // namespace

int RunConfig::effective_n_critic() const {
  if (n_critic) return *n_critic;
  return objective == Objective::wgan_fast ? 2 : 5;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.objective = objective;
  t.batch_size = batch_size;
  t.clip_c = clip_c;
  t.n_critic = effective_n_critic();
  t.total_generator_steps = total_steps;
  t.combined_lambda = lambda;
  t.seed = seed;
  t.precision = precision;
  t.eval_interval = eval_interval;
  return t;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  const std::string k(key);
  if (key == "dataset") {
    if (value.empty()) throw ConfigError(k, "must not be empty");
    cfg.dataset = std::string(value);
  } else if (key == "levels") {
    cfg.levels = parse_int<int>(key, value);
    if (cfg.levels < 1 || cfg.levels > 3) throw ConfigError(k, "must be 1, 2 or 3");
  } else if (key == "hidden_width") {
    cfg.hidden_width = parse_int<std::size_t>(key, value);
    if (cfg.hidden_width < 1) throw ConfigError(k, "must be positive");
  } else if (key == "objective") {
    try {
      cfg.objective = parse_objective(std::string(value));
    } catch (const InvalidArgument& e) {
      throw ConfigError(k, e.what());
    }
  } else if (key == "lambda") {
    cfg.lambda = parse_real(key, value);
    if (cfg.lambda < 0) throw ConfigError(k, "must be non-negative");
  } else if (key == "n_critic") {
    cfg.n_critic = parse_int<int>(key, value);
    if (*cfg.n_critic < 1) throw ConfigError(k, "must be positive");
  } else if (key == "total_steps") {
    cfg.total_steps = parse_int<std::uint64_t>(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "precision") {
    if (value == "f32") {
      cfg.precision = DType::f32;
    } else if (value == "f64") {
      cfg.precision = DType::f64;
    } else {
      throw ConfigError(k, "must be f32 or f64");
    }
  } else if (key == "out_dir") {
    if (value.empty()) throw ConfigError(k, "must not be empty");
    cfg.out_dir = std::string(value);
  } else if (key == "clip_c") {
    cfg.clip_c = parse_real(key, value);
    if (cfg.clip_c <= 0) throw ConfigError(k, "must be positive");
  } else if (key == "batch_size") {
    cfg.batch_size = parse_int<std::size_t>(key, value);
    if (cfg.batch_size < 1) throw ConfigError(k, "must be positive");
  } else if (key == "eval_interval") {
    cfg.eval_interval = parse_int<std::uint64_t>(key, value);
    if (cfg.eval_interval < 1) throw ConfigError(k, "must be positive");
  } else {
    throw ConfigError(k, "unknown key");
  }
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected key=value");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

RingMixture ring_mixture(std::size_t pairs) { return RingMixture{8, 3.0, 0.5, pairs}; }

Splits load_dataset(const std::string& spec) {
  if (spec == "synth_ring" || spec == "synth_ring8") {
    const RingMixture m = ring_mixture(spec == "synth_ring" ? 1 : 4);
    const Dataset all = synth_ring(12000, m, kDataSeed);
    return split_and_augment(all, {10000.0 / 12000.0, 1000.0 / 12000.0, 1000.0 / 12000.0}, false,
                             kDataSeed);
  }
  if (spec.starts_with("fc2d:")) {
    Dataset all;
    all.origin = Origin::synth2d;
    all.examples = load_fc2d(spec.substr(5));
    return split_and_augment(all, {0.8, 0.1, 0.1}, false, kDataSeed);
  }
  if (spec.starts_with("idx:")) {
    const IntBatch pixels = load_idx(spec.substr(4), 8);
    PreprocessSpec pre;
    pre.dim = pixels.cols;
    pre.noise_seed = kDataSeed;
    return split_and_augment(image_dataset(pixels, pre), {0.8, 0.1, 0.1}, false, kDataSeed);
  }
  throw ConfigError("dataset", "unknown dataset '" + spec + "'");
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::string_view header, bool append)
    : path_(path) {
  const bool fresh = !append || !std::filesystem::exists(path);
  file_ = std::fopen(path.c_str(), fresh ? "wb" : "ab");
  if (!file_) throw IoError("cannot open " + path.string(), errno);
  if (fresh) write(std::string(header) + "\r\n");
}

CsvWriter::~CsvWriter() {
  if (file_) std::fclose(file_);
}

void CsvWriter::write(const std::string& s) {
  if (std::fwrite(s.data(), 1, s.size(), file_) != s.size() || std::fflush(file_) != 0) {
    throw IoError("write failed for " + path_.string(), errno ? errno : EIO);
  }
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  std::string line;
  bool first = true;
  for (const auto& f : fields) {
    if (!first) line += ',';
    line += csv_field(f);
    first = false;
  }
  write(line + "\r\n");
}

MetricsFile::MetricsFile(const std::filesystem::path& dir, bool append)
    : metrics_(dir / "metrics.csv", "step,metric,value,split", append),
      timing_(dir / "timing.csv", "step,metric,wall_ms", append) {}

void MetricsFile::write(const MetricsRow& row) {
  metrics_.row({std::to_string(row.step), row.metric, format_double(row.value), row.split});
  timing_.row({std::to_string(row.step), row.metric, format_double(row.wall_ms)});
}

void write_pgm_grid(const std::filesystem::path& path, const Tensor<double>& images,
                    std::size_t side, std::size_t columns) {
  if (side < 1 || columns < 1) throw InvalidArgument("pgm: side and columns must be positive");
  if (images.cols() != side * side) throw ShapeError("pgm: rows are not side x side images");
  const std::size_t n = images.rows();
  const std::size_t grid_rows = (n + columns - 1) / columns;
  const std::size_t w = columns * side, h = grid_rows * side;
  std::vector<unsigned char> pixels(w * h, 0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t oy = (k / columns) * side, ox = (k % columns) * side;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double v = std::floor(images(k, y * side + x) * 256.0);
        pixels[(oy + y) * w + ox + x] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open " + path.string(), errno);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bool ok = std::fwrite(header.data(), 1, header.size(), f) == header.size() &&
            std::fwrite(pixels.data(), 1, pixels.size(), f) == pixels.size();
  const int err = ok ? 0 : errno;
  ok = (std::fclose(f) == 0) && ok;
  if (!ok) throw IoError("write failed for " + path.string(), err ? err : EIO);
}

DirLock::DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw LockHeld("another writer holds " + path_.string());
    throw IoError("cannot create " + path_.string(), errno);
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

}  // namespace flowcritic
