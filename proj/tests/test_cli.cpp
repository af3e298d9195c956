#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowcritic/checkpoint.hpp"
#include "flowcritic/commands.hpp"

using namespace flowcritic;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "flowcritic_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < s.size()) {
    const auto end = s.find("\r\n", start);
    REQUIRE(end != std::string::npos);
    out.push_back(s.substr(start, end - start));
    start = end + 2;
  }
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FLOWCRITIC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

void be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>(v >> s));
}

// 28x28 images whose pixel values vary with position and index.
fs::path write_images(const fs::path& dir, std::uint32_t n) {
  std::string b;
  be32(b, 0x00000803);
  be32(b, n);
  be32(b, 28);
  be32(b, 28);
  for (std::uint32_t k = 0; k < n; ++k) {
    for (int i = 0; i < 28 * 28; ++i) b.push_back(static_cast<char>((i * 7 + k * 31) % 256));
  }
  const fs::path p = dir / "images.idx";
  spit(p, b);
  return p;
}

RunConfig quick_config(const fs::path& out, std::uint64_t steps) {
  RunConfig cfg;
  cfg.out_dir = out.string();
  cfg.total_steps = steps;
  cfg.hidden_width = 8;
  cfg.eval_interval = 25;
  cfg.seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing, defaults and errors") {
  const RunConfig d = parse_config("");
  CHECK(d.dataset == "synth_ring");
  CHECK(d.levels == 1);
  CHECK(d.objective == Objective::mle);
  CHECK(d.effective_n_critic() == 5);

  const RunConfig c = parse_config(
      "# comment\n\nobjective = wgan_fast\nlevels=3\nseed=11\nprecision=f64\nlambda=0.5\r\n");
  CHECK(c.objective == Objective::wgan_fast);
  CHECK(c.levels == 3);
  CHECK(c.seed == 11);
  CHECK(c.precision == DType::f64);
  CHECK(c.lambda == 0.5);
  // The fast critic defaults to two updates per generator step.
  CHECK(c.effective_n_critic() == 2);
  CHECK(c.train_config().n_critic == 2);
  CHECK(parse_config("objective=wgan_fast\nn_critic=4").effective_n_critic() == 4);

  auto key_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("(none)");
  };
  CHECK(key_of("colour=blue") == "colour");
  CHECK(key_of("levels=4") == "levels");
  CHECK(key_of("levels=two") == "levels");
  CHECK(key_of("objective=gan") == "objective");
  CHECK(key_of("lambda=-1") == "lambda");
  CHECK(key_of("clip_c=0") == "clip_c");
  CHECK(key_of("precision=f16") == "precision");
  CHECK(key_of("seed=3\njunk") == "line 2");
  CHECK_THROWS_AS(load_config("/nonexistent/flowcritic.cfg"), ConfigError);
}

TEST_CASE("CSV quoting and float format") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(std::strtod(format_double(M_PI).c_str(), nullptr) == M_PI);

  const fs::path dir = fresh_dir("csv");
  {
    CsvWriter w(dir / "t.csv", "a,b");
    w.row({"1", "x,y"});
  }
  {
    CsvWriter w(dir / "t.csv", "a,b", true);
    w.row({"2", "z"});
  }
  CHECK(slurp(dir / "t.csv") == "a,b\r\n1,\"x,y\"\r\n2,z\r\n");
}

TEST_CASE("PGM grid layout") {
  const fs::path dir = fresh_dir("pgm");
  Tensor<double> img = Tensor<double>::matrix(3, 4);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 4; ++i) img(k, i) = (static_cast<double>(k * 4 + i) + 0.5) / 16.0;
  }
  write_pgm_grid(dir / "g.pgm", img, 2, 2);
  const std::string bytes = slurp(dir / "g.pgm");
  const std::string header = "P5\n4 4\n255\n";
  REQUIRE(bytes.size() == header.size() + 16);
  CHECK(bytes.substr(0, header.size()) == header);
  auto px = [&](std::size_t y, std::size_t x) {
    return static_cast<unsigned char>(bytes[header.size() + y * 4 + x]);
  };
  // Value (j + 0.5) / 16 maps to floor(256 v) = 16 j + 8.
  CHECK(px(0, 0) == 8);
  CHECK(px(0, 3) == 16 * 5 + 8);
  CHECK(px(1, 2) == 16 * 6 + 8);
  CHECK(px(3, 1) == 16 * 11 + 8);
  CHECK(px(2, 2) == 0);  // empty cell
  CHECK_THROWS_AS(write_pgm_grid(dir / "bad.pgm", img, 3, 2), ShapeError);
}

TEST_CASE("lock file excludes a second writer") {
  const fs::path dir = fresh_dir("lock");
  {
    DirLock a(dir);
    CHECK(fs::exists(dir / ".lock"));
    CHECK_THROWS_AS(DirLock{dir}, LockHeld);
    std::ostringstream log;
    CHECK(cmd_train(TrainOptions{quick_config(dir, 5), std::nullopt}, log) == kExitBadConfig);
  }
  CHECK(!fs::exists(dir / ".lock"));
}

TEST_CASE("checkpoint round trip and format errors") {
  Checkpoint c;
  c.dtype = DType::f64;
  c.step = 123456789012ULL;
  c.seed = 42;
  Tensor<double> a = Tensor<double>::matrix(2, 3);
  for (std::size_t i = 0; i < 6; ++i) a[i] = std::ldexp(1.0, -static_cast<int>(i)) / 3.0;
  c.arrays.emplace("alpha", a);
  c.arrays.emplace("beta", Tensor<double>(Shape{4}, {1, -2, 3, -4}));
  const auto bytes = encode_checkpoint(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RNVP");
  CHECK(decode_checkpoint(bytes) == c);

  // Empty parameter set.
  Checkpoint empty;
  CHECK(decode_checkpoint(encode_checkpoint(empty)) == empty);

  // f32 checkpoints hold float values exactly.
  Checkpoint f = c;
  f.dtype = DType::f32;
  for (auto& [n, t] : f.arrays) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
  CHECK(decode_checkpoint(encode_checkpoint(f)) == f);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(flipped), ChecksumError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK_THROWS_AS(decode_checkpoint(truncated), ChecksumError);
  auto magic = bytes;
  magic[0] = 'X';
  try {
    decode_checkpoint(magic);
    FAIL("bad magic accepted");
  } catch (const ChecksumError&) {
    FAIL("bad magic reported as checksum");
  } catch (const VersionError&) {
    FAIL("bad magic reported as version");
  } catch (const FormatError&) {
  }
  auto version = bytes;
  version[4] = 2;
  CHECK_THROWS_AS(decode_checkpoint(version), VersionError);

  const fs::path dir = fresh_dir("ckpt");
  save_checkpoint(dir / "c.rnvp", c);
  CHECK(load_checkpoint(dir / "c.rnvp") == c);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.rnvp"), IoError);
}

TEST_CASE("integer packing is exact") {
  const std::vector<std::uint64_t> words{0, 1, 0xFFFFFFFFFFFFFFFFULL, 0x0123456789ABCDEFULL};
  const auto packed = pack_words(words);
  for (double v : packed.data()) CHECK(v == static_cast<double>(static_cast<float>(v)));
  CHECK(unpack_words(packed) == words);
  const std::vector<double> d{0.1, -1e300, 5e-324};
  CHECK(unpack_doubles(pack_doubles(d)) == d);
}

TEST_CASE("model checkpoints restore the same flow") {
  auto m = build_nvp<float>(2, 4, 8, 3);
  Rng rng(5);
  for (auto& [n, p] : m.params()) {
    for (auto& v : p.data()) v += static_cast<float>(0.1 * rng.normal());
  }
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(model_checkpoint(m, ModelKind::nvp, 3)));
  const ModelMeta meta = read_meta(ck);
  CHECK(meta.dim == 4);
  CHECK(meta.levels == 2);
  CHECK(meta.hidden == 8);
  const auto back = model_from_checkpoint<float>(ck);
  CHECK(back.params() == m.params());
  const auto z = rng.normal_matrix<float>(5, 4);
  CHECK(forward(back, z).value == forward(m, z).value);
}

TEST_CASE("train writes metrics and checkpoints, and repeats byte for byte") {
  const fs::path a = fresh_dir("train_a"), b = fresh_dir("train_b");
  std::ostringstream log;
  CHECK(cmd_train(TrainOptions{quick_config(a, 100), std::nullopt}, log) == kExitOk);
  CHECK(cmd_train(TrainOptions{quick_config(b, 100), std::nullopt}, log) == kExitOk);
  const std::string metrics = slurp(a / "metrics.csv");
  CHECK(metrics == slurp(b / "metrics.csv"));
  const auto rows = lines(metrics);
  CHECK(rows.front() == "step,metric,value,split");
  bool nll_train = false, nll_valid = false;
  for (const auto& r : rows) {
    nll_train |= r.starts_with("100,nll,") && r.ends_with(",train");
    nll_valid |= r.starts_with("100,nll,") && r.ends_with(",valid");
  }
  CHECK(nll_train);
  CHECK(nll_valid);
  CHECK(fs::exists(a / "timing.csv"));
  CHECK(fs::exists(a / "ckpt_00000025.rnvp"));
  CHECK(fs::exists(a / "ckpt_00000100.rnvp"));
  CHECK(fs::exists(a / "final.rnvp"));
  CHECK(!fs::exists(a / ".lock"));
  CHECK(slurp(a / "final.rnvp") == slurp(b / "final.rnvp"));
}

TEST_CASE("resumed training matches an uninterrupted run") {
  const fs::path full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  std::ostringstream log;
  RunConfig cfg = quick_config(full, 100);
  cfg.objective = Objective::wgan;
  CHECK(cmd_train(TrainOptions{cfg, std::nullopt}, log) == kExitOk);
  cfg.out_dir = part.string();
  cfg.total_steps = 50;
  CHECK(cmd_train(TrainOptions{cfg, std::nullopt}, log) == kExitOk);
  cfg.total_steps = 100;
  CHECK(cmd_train(TrainOptions{cfg, part / "ckpt_00000050.rnvp"}, log) == kExitOk);
  CHECK(slurp(part / "metrics.csv") == slurp(full / "metrics.csv"));
  CHECK(slurp(part / "final.rnvp") == slurp(full / "final.rnvp"));
}

TEST_CASE("eval reports on an identity checkpoint") {
  const fs::path dir = fresh_dir("eval_identity");
  save_checkpoint(dir / "id.rnvp", model_checkpoint(FlowModel<double>::identity(2), ModelKind::identity, 0));
  EvalOptions opts;
  opts.config.out_dir = dir.string();
  opts.checkpoint = dir / "id.rnvp";
  opts.kinds = {"jrank", "wdist", "bpd", "latents", "nllhist", "klgap"};
  opts.critic_budget = 300;
  opts.samples = 2000;
  std::ostringstream log;
  REQUIRE(cmd_eval(opts, log) == kExitOk);
  const auto sv = lines(slurp(dir / "eval_jrank.csv"));
  CHECK(sv.size() == 1 + 5 * 2);
  for (std::size_t i = 1; i < sv.size(); ++i) CHECK(sv[i].ends_with(",1"));
  const auto w = lines(slurp(dir / "eval_wdist.csv"));
  REQUIRE(w.size() == 5);
  CHECK(w[4].starts_with("valid_self,"));
  const auto self = w[4].substr(w[4].find(',') + 1);
  const double value = std::strtod(self.c_str(), nullptr);
  const double sd = std::strtod(self.substr(self.find(',') + 1).c_str(), nullptr);
  CHECK(std::abs(value) < 3 * sd);
  CHECK(lines(slurp(dir / "eval_bpd.csv")).size() == 4);
  for (const char* f : {"eval_latents.csv", "eval_latents_grid.csv", "eval_nllhist.csv", "eval_klgap.csv"}) {
    CHECK(fs::exists(dir / f));
  }

  opts.kinds = {"wdist", "pictures"};
  CHECK(cmd_eval(opts, log) == kExitBadConfig);
}

TEST_CASE("uniform stub reports 8 bits per dimension") {
  const fs::path dir = fresh_dir("eval_stub");
  const fs::path idx = write_images(dir, 40);
  save_checkpoint(dir / "stub.rnvp", uniform_stub_checkpoint(64));
  EvalOptions opts;
  opts.config.out_dir = dir.string();
  opts.config.dataset = "idx:" + idx.string();
  opts.checkpoint = dir / "stub.rnvp";
  opts.kinds = {"bpd"};
  std::ostringstream log;
  REQUIRE(cmd_eval(opts, log) == kExitOk);
  const auto rows = lines(slurp(dir / "eval_bpd.csv"));
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double bpd = std::strtod(rows[i].substr(rows[i].rfind(',') + 1).c_str(), nullptr);
    CHECK(bpd == 8.0);
  }
}

TEST_CASE("corrupted checkpoints exit with the checksum code") {
  const fs::path dir = fresh_dir("eval_crc");
  save_checkpoint(dir / "id.rnvp", model_checkpoint(FlowModel<double>::identity(2), ModelKind::identity, 0));
  std::string bytes = slurp(dir / "id.rnvp");
  bytes[bytes.size() - 6] ^= 0x01;
  spit(dir / "bad.rnvp", bytes);
  EvalOptions opts;
  opts.config.out_dir = dir.string();
  opts.checkpoint = dir / "bad.rnvp";
  opts.kinds = {"jrank"};
  std::ostringstream log;
  CHECK(cmd_eval(opts, log) == kExitChecksum);
  spit(dir / "short.rnvp", bytes.substr(0, bytes.size() / 2));
  opts.checkpoint = dir / "short.rnvp";
  CHECK(cmd_eval(opts, log) == kExitChecksum);
}

TEST_CASE("sample command outputs") {
  const fs::path dir = fresh_dir("sample");
  auto m = build_nvp<double>(1, 2, 8, 1);
  save_checkpoint(dir / "m.rnvp", model_checkpoint(m, ModelKind::nvp, 1));
  SampleOptions opts;
  opts.checkpoint = dir / "m.rnvp";
  opts.out_dir = dir / "a";
  opts.n = 10;
  opts.seed = 3;
  std::ostringstream log;
  REQUIRE(cmd_sample(opts, log) == kExitOk);
  const auto rows = lines(slurp(dir / "a" / "samples.csv"));
  CHECK(rows.size() == 11);
  CHECK(rows[0] == "x,y,logprob");
  opts.out_dir = dir / "b";
  REQUIRE(cmd_sample(opts, log) == kExitOk);
  CHECK(slurp(dir / "a" / "samples.csv") == slurp(dir / "b" / "samples.csv"));

  opts.mode = SampleMode::partial_first;
  CHECK(cmd_sample(opts, log) == kExitBadConfig);
  save_fc2d(dir / "in.fc2d", sample(m, 6, 9).x);
  opts.input = dir / "in.fc2d";
  opts.out_dir = dir / "c";
  CHECK(cmd_sample(opts, log) == kExitOk);
  CHECK(lines(slurp(dir / "c" / "samples.csv")).size() == 7);
  CHECK_THROWS_AS(parse_sample_mode("half"), ConfigError);
}

TEST_CASE("image samples go to a PGM grid") {
  const fs::path dir = fresh_dir("sample_pgm");
  auto m = build_nvp<double>(1, 16, 4, 2);
  save_checkpoint(dir / "m.rnvp", model_checkpoint(m, ModelKind::nvp, 2, 4));
  SampleOptions opts;
  opts.checkpoint = dir / "m.rnvp";
  opts.n = 9;
  opts.seed = 1;
  opts.out_dir = dir / "a";
  std::ostringstream log;
  REQUIRE(cmd_sample(opts, log) == kExitOk);
  opts.out_dir = dir / "b";
  REQUIRE(cmd_sample(opts, log) == kExitOk);
  const std::string pgm = slurp(dir / "a" / "samples.pgm");
  CHECK(pgm.starts_with("P5\n12 12\n255\n"));
  CHECK(pgm == slurp(dir / "b" / "samples.pgm"));
  CHECK(lines(slurp(dir / "a" / "samples_logprob.csv")).size() == 10);
}

TEST_CASE("non-finite training exits with the abort code") {
  const fs::path dir = fresh_dir("nan");
  Tensor<double> rows = Tensor<double>::matrix(50, 2);
  for (auto& v : rows.data()) v = 1e30;
  save_fc2d(dir / "huge.fc2d", rows);
  RunConfig cfg = quick_config(dir / "out", 10);
  cfg.dataset = "fc2d:" + (dir / "huge.fc2d").string();
  std::ostringstream log;
  CHECK(cmd_train(TrainOptions{cfg, std::nullopt}, log) == kExitNanAbort);
  CHECK(log.str().find("last good checkpoint") != std::string::npos);
}

TEST_CASE("full disk exits with the disk code") {
  if (!fs::exists("/dev/full")) return;
  const fs::path dir = fresh_dir("full");
  fs::create_symlink("/dev/full", dir / "metrics.csv");
  std::ostringstream log;
  CHECK(cmd_train(TrainOptions{quick_config(dir, 10), std::nullopt}, log) == kExitDiskFull);
}

TEST_CASE("command line front end") {
  const fs::path dir = fresh_dir("binary");
  spit(dir / "run.cfg", "total_steps=20\nhidden_width=4\neval_interval=10\n");
  const std::string cfg = (dir / "run.cfg").string();
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "a").string() + " --seed 2") == 0);
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "b").string() + " --seed 2") == 0);
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
  CHECK(run_cli("train --config " + cfg + " --out " + (dir / "c").string() + " --levels 7") == 1);
  CHECK(run_cli("train --objective nonsense --out " + (dir / "d").string()) == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("eval --checkpoint " + (dir / "a" / "final.rnvp").string() + " --kinds jrank --out " +
                (dir / "e").string()) == 0);
  std::string bytes = slurp(dir / "a" / "final.rnvp");
  bytes[bytes.size() - 5] ^= 0x40;
  spit(dir / "bad.rnvp", bytes);
  CHECK(run_cli("eval --checkpoint " + (dir / "bad.rnvp").string() + " --kinds jrank --out " +
                (dir / "f").string()) == 4);
  CHECK(run_cli("sample --checkpoint " + (dir / "a" / "final.rnvp").string() +
                " --mode partial_second --out " + (dir / "g").string()) == 1);
}
