#include "cbswr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cbswr/errors.hpp"

namespace cbswr {

namespace {

constexpr char kMagic[8] = {'C', 'B', 'S', 'W', 'R', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void group(const ParamGroup& g) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(g.params.size()));
    for (const auto& p : g.params) {
      str(p.name);
      pod<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
      for (auto d : p.shape) pod<std::uint64_t>(d);
      for (double v : p.value) pod<double>(v);
    }
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : in_(bytes) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  // Reads a group and checks it against the freshly initialized layout in `expected`.
  void group_into(ParamGroup& expected) {
    const auto count = pod<std::uint32_t>();
    if (count != expected.params.size()) throw CheckpointError("checkpoint: group " + expected.name + " layout mismatch");
    for (auto& p : expected.params) {
      if (str() != p.name) throw CheckpointError("checkpoint: unexpected parameter in group " + expected.name);
      const auto rank = pod<std::uint32_t>();
      Shape shape(rank);
      for (auto& d : shape) d = pod<std::uint64_t>();
      if (shape != p.shape) throw CheckpointError("checkpoint: shape mismatch for " + expected.name + "." + p.name);
      for (double& v : p.value) v = pod<double>();
    }
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint: truncated file");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_model_config(Writer& w, const ModelConfig& c) {
  for (std::size_t v : {c.channels, c.height, c.width, c.conv1_channels, c.conv2_channels, c.rep_dim, c.embed_dim,
                        c.num_clusters}) {
    w.pod<std::uint64_t>(v);
  }
  w.pod<std::uint8_t>(c.embed_bias ? 1 : 0);
  w.pod<std::uint64_t>(c.init_seed);
  w.pod<double>(c.head_init_scale);
}

ModelConfig read_model_config(Reader& r) {
  ModelConfig c;
  for (std::size_t* f : {&c.channels, &c.height, &c.width, &c.conv1_channels, &c.conv2_channels, &c.rep_dim,
                         &c.embed_dim, &c.num_clusters}) {
    *f = static_cast<std::size_t>(r.pod<std::uint64_t>());
  }
  c.embed_bias = r.pod<std::uint8_t>() != 0;
  c.init_seed = r.pod<std::uint64_t>();
  c.head_init_scale = r.pod<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint64_t>(ckpt.model.config.hash());
  write_model_config(w, ckpt.model.config);
  w.str(ckpt.run_config);
  for (const ParamGroup* g : ckpt.model.groups()) w.group(*g);
  w.pod<std::uint8_t>(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    w.pod<std::uint64_t>(ckpt.optimizer->epoch);
    w.pod<std::uint64_t>(ckpt.optimizer->step);
    for (const ParamGroup* g : ckpt.optimizer->momentum.groups()) w.group(*g);
  }
  const std::uint64_t sum = fnv1a(w.bytes());
  w.pod<std::uint64_t>(sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file: " + path.string());
  }
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  const std::string body = bytes.substr(0, bytes.size() - 8);
  if (fnv1a(body) != stored_sum) throw CheckpointError("checkpoint checksum mismatch: " + path.string());

  Reader r(body);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hash = r.pod<std::uint64_t>();
  ModelConfig config = read_model_config(r);
  if (config.hash() != hash) throw CheckpointError("checkpoint config hash does not match its stored config");
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.model = ModelBundle::initialize(config);
  ckpt.run_config = r.str();
  for (ParamGroup* g : ckpt.model.groups()) r.group_into(*g);
  if (r.pod<std::uint8_t>() != 0) {
    OptimizerState opt;
    opt.epoch = r.pod<std::uint64_t>();
    opt.step = r.pod<std::uint64_t>();
    opt.momentum = ckpt.model.zeros_like();
    for (ParamGroup* g : opt.momentum.groups()) r.group_into(*g);
    ckpt.optimizer = std::move(opt);
  }
  if (r.pos() != body.size()) throw CheckpointError("checkpoint has trailing bytes");
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.model.config.hash() != expected.hash()) {
    throw CheckpointError("checkpoint config hash " + std::to_string(ckpt.model.config.hash()) +
                          " differs from the configured model (" + std::to_string(expected.hash()) + ")");
  }
  return ckpt;
}

}  // namespace cbswr
