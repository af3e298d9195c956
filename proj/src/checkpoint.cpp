#include "flowcritic/checkpoint.hpp"

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace flowcritic {

namespace {

constexpr unsigned char kMagic[4] = {'R', 'N', 'V', 'P'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 1 + 8 + 8;

void put(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(std::span<const unsigned char> bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw FormatError("checkpoint: array section ends mid-record");
  }

  std::span<const unsigned char> bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void put_tensor_map(Checkpoint& ckpt, const std::string& prefix, const TensorMap<T>& m) {
  for (const auto& [name, t] : m) ckpt.arrays[prefix + name] = t.template cast<double>();
}

template <typename T>
TensorMap<T> take_tensor_map(const Checkpoint& ckpt, const std::string& prefix) {
  TensorMap<T> out;
  for (auto it = ckpt.arrays.lower_bound(prefix);
       it != ckpt.arrays.end() && it->first.starts_with(prefix); ++it) {
    out.emplace(it->first.substr(prefix.size()), it->second.template cast<T>());
  }
  return out;
}

template <typename T>
void put_opt(Checkpoint& ckpt, const std::string& tag, const OptState<T>& s) {
  put_tensor_map(ckpt, "opt." + tag + ".m/", s.first);
  put_tensor_map(ckpt, "opt." + tag + ".v/", s.second);
  const std::uint64_t step[1] = {s.step};
  ckpt.arrays["opt." + tag + ".step"] = pack_words(step);
}

template <typename T>
OptState<T> take_opt(const Checkpoint& ckpt, const std::string& tag) {
  OptState<T> s;
  s.first = take_tensor_map<T>(ckpt, "opt." + tag + ".m/");
  s.second = take_tensor_map<T>(ckpt, "opt." + tag + ".v/");
  const auto it = ckpt.arrays.find("opt." + tag + ".step");
  if (it == ckpt.arrays.end()) throw FormatError("checkpoint: missing opt." + tag + ".step");
  s.step = unpack_words(it->second).at(0);
  return s;
}

const Tensor<double>& array_at(const Checkpoint& ckpt, const std::string& name) {
  const auto it = ckpt.arrays.find(name);
  if (it == ckpt.arrays.end()) throw FormatError("checkpoint: missing array '" + name + "'");
  return it->second;
}

// Replaces every tensor of `dst` with the checkpoint's `prefix`-named array.
template <typename T>
void load_params(ParamStore<T>& dst, const Checkpoint& ckpt) {
  ParamStore<T> next;
  for (const auto& [name, t] : dst) {
    const Tensor<double>& src = array_at(ckpt, name);
    if (src.shape() != t.shape()) {
      throw FormatError("checkpoint: '" + name + "' has shape " + shape_string(src.shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    next.emplace(name, src.template cast<T>());
  }
  dst = std::move(next);
}

Rng take_rng(const Checkpoint& ckpt, const std::string& name) {
  Rng r;
  r.set_state(unpack_words(array_at(ckpt, name)));
  return r;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put(out, kCheckpointVersion, 4);
  put(out, static_cast<std::uint8_t>(ckpt.dtype), 1);
  put(out, ckpt.step, 8);
  put(out, ckpt.seed, 8);
  const std::size_t section = out.size();
  for (const auto& [name, t] : ckpt.arrays) {
    if (name.size() > 0xFFFF) throw InvalidArgument("checkpoint: array name too long");
    if (t.rank() > 0xFF) throw InvalidArgument("checkpoint: too many dims");
    put(out, name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    put(out, t.rank(), 1);
    for (std::size_t e : t.shape()) {
      if (e > 0xFFFFFFFFu) throw InvalidArgument("checkpoint: extent too large");
      put(out, e, 4);
    }
    for (double v : t.data()) {
      if (ckpt.dtype == DType::f32) {
        put(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      } else {
        put(out, std::bit_cast<std::uint64_t>(v), 8);
      }
    }
  }
  put(out, crc_of(std::span(out).subspan(section)), 4);
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (bytes.size() < kHeaderBytes + 4) throw ChecksumError("checkpoint: file truncated");
  Reader header(bytes, kHeaderBytes);
  header.seek(4);
  const auto version = static_cast<std::uint32_t>(header.get(4));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto dtype = header.get(1);
  if (dtype > 1) throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype));
  ckpt.dtype = static_cast<DType>(dtype);
  ckpt.step = header.get(8);
  ckpt.seed = header.get(8);

  const std::size_t end = bytes.size() - 4;
  Reader tail(bytes, bytes.size());
  tail.seek(end);
  const auto stored = static_cast<std::uint32_t>(tail.get(4));
  if (stored != crc_of(bytes.subspan(kHeaderBytes, end - kHeaderBytes))) {
    throw ChecksumError("checkpoint: CRC mismatch");
  }

  Reader r(bytes, end);
  r.seek(kHeaderBytes);
  const std::size_t width = ckpt.dtype == DType::f32 ? 4 : 8;
  while (!r.done()) {
    std::string name = r.text(static_cast<std::size_t>(r.get(2)));
    const auto ndim = static_cast<std::size_t>(r.get(1));
    Shape shape(ndim);
    std::size_t count = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(r.get(4));
      if (e == 0) throw FormatError("checkpoint: zero extent in '" + name + "'");
      if (count > (end - r.pos()) / e) throw FormatError("checkpoint: '" + name + "' overruns file");
      count *= e;
    }
    if (count * width > end - r.pos()) throw FormatError("checkpoint: '" + name + "' overruns file");
    std::vector<double> data(count);
    for (auto& v : data) {
      v = width == 4 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4))))
                     : std::bit_cast<double>(r.get(8));
    }
    if (!ckpt.arrays.emplace(name, Tensor<double>(std::move(shape), std::move(data))).second) {
      throw FormatError("checkpoint: duplicate array '" + name + "'");
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::filesystem::path tmp = path.string() + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) throw IoError("cannot open " + tmp.string() + " for writing", errno);
  const bool wrote = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  int err = wrote ? 0 : errno;
  if (std::fflush(f) != 0 && !err) err = errno;
  if (std::fclose(f) != 0 && !err) err = errno;
  if (!wrote || err) {
    std::remove(tmp.c_str());
    throw IoError("write failed for " + path.string(), err ? err : EIO);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename checkpoint to " + path.string(), ec.value());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string(), errno);
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Tensor<double> pack_words(std::span<const std::uint64_t> words) {
  if (words.empty()) throw InvalidArgument("pack_words: nothing to pack");
  Tensor<double> t = Tensor<double>::matrix(1, 4 * words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      t[4 * i + k] = static_cast<double>((words[i] >> (16 * k)) & 0xFFFF);
    }
  }
  return t;
}

std::vector<std::uint64_t> unpack_words(const Tensor<double>& packed) {
  if (packed.size() % 4 != 0) throw FormatError("packed integers: length not a multiple of 4");
  std::vector<std::uint64_t> words(packed.size() / 4);
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint64_t w = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const double c = packed[4 * i + k];
      if (!(c >= 0 && c <= 65535 && c == std::floor(c))) {
        throw FormatError("packed integers: chunk out of range");
      }
      w |= static_cast<std::uint64_t>(c) << (16 * k);
    }
    words[i] = w;
  }
  return words;
}

Tensor<double> pack_doubles(std::span<const double> values) {
  std::vector<std::uint64_t> bits(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) bits[i] = std::bit_cast<std::uint64_t>(values[i]);
  return pack_words(bits);
}

std::vector<double> unpack_doubles(const Tensor<double>& packed) {
  const auto bits = unpack_words(packed);
  std::vector<double> out(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) out[i] = std::bit_cast<double>(bits[i]);
  return out;
}

ModelMeta read_meta(const Checkpoint& ckpt) {
  const Tensor<double>& m = array_at(ckpt, "meta.model");
  if (m.size() != 6) throw FormatError("checkpoint: meta.model must hold 6 values");
  for (double v : m.data()) {
    if (!(v >= 0 && v == std::floor(v) && v < 1e9)) throw FormatError("checkpoint: bad meta.model");
  }
  ModelMeta meta;
  if (m[0] > 2) throw FormatError("checkpoint: unknown model kind");
  if (m[4] > 3) throw FormatError("checkpoint: unknown objective");
  meta.kind = static_cast<ModelKind>(static_cast<int>(m[0]));
  meta.dim = static_cast<std::size_t>(m[1]);
  meta.levels = static_cast<int>(m[2]);
  meta.hidden = static_cast<std::size_t>(m[3]);
  meta.objective = static_cast<Objective>(static_cast<int>(m[4]));
  meta.image_side = static_cast<std::size_t>(m[5]);
  if (meta.image_side && meta.image_side * meta.image_side != meta.dim) {
    throw FormatError("checkpoint: image side does not match dim");
  }
  if (meta.dim < 1) throw FormatError("checkpoint: model dim must be positive");
  return meta;
}

void write_meta(Checkpoint& ckpt, const ModelMeta& meta) {
  ckpt.arrays["meta.model"] = Tensor<double>(
      Shape{1, 6}, std::vector<double>{static_cast<double>(meta.kind), static_cast<double>(meta.dim),
                                       static_cast<double>(meta.levels),
                                       static_cast<double>(meta.hidden),
                                       static_cast<double>(meta.objective),
                                       static_cast<double>(meta.image_side)});
}

template <typename T>
Checkpoint model_checkpoint(const FlowModel<T>& model, ModelKind kind, std::uint64_t seed,
                            std::size_t image_side) {
  if (kind == ModelKind::identity && !model.layers().empty()) {
    throw InvalidArgument("identity checkpoint needs a zero-layer model");
  }
  Checkpoint ckpt;
  ckpt.dtype = dtype_of<T>;
  ckpt.seed = seed;
  write_meta(ckpt,
             {kind, model.dim(), model.levels(), model.hidden_width(), Objective::mle, image_side});
  put_tensor_map(ckpt, "", model.params());
  return ckpt;
}

Checkpoint uniform_stub_checkpoint(std::size_t dim) {
  Checkpoint ckpt;
  write_meta(ckpt, {ModelKind::uniform_stub, dim, 1, 0, Objective::mle});
  return ckpt;
}

template <typename T>
FlowModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelMeta meta = read_meta(ckpt);
  switch (meta.kind) {
    case ModelKind::identity:
      return FlowModel<T>::identity(meta.dim);
    case ModelKind::uniform_stub:
      throw InvalidArgument("checkpoint holds the uniform stub, not a flow");
    case ModelKind::nvp:
      break;
  }
  FlowModel<T> model = build_nvp<T>(meta.levels, meta.dim, meta.hidden, 0);
  load_params(model.params(), ckpt);
  return model;
}

template <typename T>
Checkpoint snapshot(const Trainer<T>& trainer) {
  const auto& gen = trainer.generator();
  const auto& st = trainer.state();
  Checkpoint ckpt = model_checkpoint(gen, ModelKind::nvp, trainer.config().seed);
  ckpt.step = st.step;
  std::size_t side = 0;
  if (trainer.train_data().origin == Origin::idx_images) {
    side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(gen.dim()))));
    if (side * side != gen.dim()) side = 0;
  }
  write_meta(ckpt, {ModelKind::nvp, gen.dim(), gen.levels(), gen.hidden_width(),
                    trainer.config().objective, side});
  if (trainer.has_critic()) put_tensor_map(ckpt, "", trainer.critic().params());
  if (trainer.is_fast()) put_tensor_map(ckpt, "", trainer.fast_critic().embed_params());
  put_opt(ckpt, "gen", st.gen_opt);
  put_opt(ckpt, "critic", st.critic_opt);
  put_opt(ckpt, "embed", st.embed_opt);
  ckpt.arrays["rng.data"] = pack_words(st.data_rng.state());
  ckpt.arrays["rng.noise"] = pack_words(st.noise_rng.state());
  ckpt.arrays["rng.dequant"] = pack_words(st.dequant_rng.state());
  const double acc[2] = {st.interval_loss_sum, st.last_critic_w};
  ckpt.arrays["run.accum"] = pack_doubles(acc);
  const std::uint64_t count[1] = {st.interval_loss_count};
  ckpt.arrays["run.count"] = pack_words(count);
  return ckpt;
}

template <typename T>
void restore(Trainer<T>& trainer, const Checkpoint& ckpt) {
  if (ckpt.dtype != dtype_of<T>) throw FormatError("checkpoint: precision does not match run");
  const ModelMeta meta = read_meta(ckpt);
  const auto& gen = trainer.generator();
  if (meta.kind != ModelKind::nvp || meta.dim != gen.dim() || meta.levels != gen.levels() ||
      meta.hidden != gen.hidden_width() || meta.objective != trainer.config().objective) {
    throw FormatError("checkpoint: model structure does not match run configuration");
  }
  // Parse everything before touching the trainer.
  FlowModel<T> next_gen = gen;
  load_params(next_gen.params(), ckpt);
  std::optional<ParamStore<T>> critic, embed;
  if (trainer.has_critic()) {
    critic = trainer.critic().params();
    load_params(*critic, ckpt);
  }
  if (trainer.is_fast()) {
    embed = trainer.fast_critic().embed_params();
    load_params(*embed, ckpt);
  }
  RunState<T> st;
  st.step = ckpt.step;
  st.gen_opt = take_opt<T>(ckpt, "gen");
  st.critic_opt = take_opt<T>(ckpt, "critic");
  st.embed_opt = take_opt<T>(ckpt, "embed");
  st.data_rng = take_rng(ckpt, "rng.data");
  st.noise_rng = take_rng(ckpt, "rng.noise");
  st.dequant_rng = take_rng(ckpt, "rng.dequant");
  const auto acc = unpack_doubles(array_at(ckpt, "run.accum"));
  const auto count = unpack_words(array_at(ckpt, "run.count"));
  if (acc.size() != 2 || count.size() != 1) throw FormatError("checkpoint: bad run counters");
  st.interval_loss_sum = acc[0];
  st.last_critic_w = acc[1];
  st.interval_loss_count = count[0];

  trainer.generator().params() = std::move(next_gen.params());
  if (critic) trainer.critic_params() = std::move(*critic);
  if (embed) trainer.embed_params() = std::move(*embed);
  trainer.state() = std::move(st);
}

#define FLOWCRITIC_INSTANTIATE(T)                                                       \
  template Checkpoint model_checkpoint(const FlowModel<T>&, ModelKind, std::uint64_t,       \
                                      std::size_t);                                      \
  template FlowModel<T> model_from_checkpoint<T>(const Checkpoint&);                   \
  template Checkpoint snapshot(const Trainer<T>&);                                      \
  template void restore(Trainer<T>&, const Checkpoint&);

FLOWCRITIC_INSTANTIATE(float)
FLOWCRITIC_INSTANTIATE(double)
#undef FLOWCRITIC_INSTANTIATE

}  // namespace flowcritic
