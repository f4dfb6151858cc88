#include "eupe/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "eupe/error.hpp"

namespace eupe {

namespace {

constexpr char kMagic[8] = {'E', 'U', 'P', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF32 = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    uint(u);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw TruncatedError("checkpoint ends early at byte " + std::to_string(in_.size()));
  }
  template <typename T>
  T uint() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  float f32() {
    const auto u = uint<std::uint32_t>();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::put(const std::string& name, const Tensor& t) {
  for (auto& [n, existing] : tensors) {
    if (n == name) {
      existing = t;
      return;
    }
  }
  tensors.emplace_back(name, t);
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint has no entry '" + key + "'");
  return it->second;
}

std::string Checkpoint::get_or(const std::string& key, const std::string& fallback) const {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : it->second;
}

std::uint64_t Checkpoint::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint entry '" + key + "' is not an integer: " + v);
  }
}

double Checkpoint::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint entry '" + key + "' is not a number: " + v);
  }
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::string text;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("checkpoint entry '" + k + "' cannot be stored");
    }
    text += k + "=" + v + "\n";
  }
  Writer w;
  w.bytes(kMagic, 8);
  w.uint<std::uint32_t>((std::uint32_t{kCheckpointMajor} << 16) | kCheckpointMinor);
  w.uint<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (!t.defined()) throw FormatError("checkpoint tensor '" + name + "' is undefined");
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.uint<std::uint8_t>(kDtypeF32);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.uint<std::uint64_t>(d);
    for (float v : t.data()) w.f32(v);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not a checkpoint (bad magic)");
  r.str(8);
  const auto version = r.uint<std::uint32_t>();
  if ((version >> 16) != kCheckpointMajor) {
    throw VersionError("checkpoint major version " + std::to_string(version >> 16) + ", expected " +
                       std::to_string(kCheckpointMajor));
  }
  Checkpoint ckpt;
  const auto text_len = r.uint<std::uint64_t>();
  std::istringstream text(r.str(static_cast<std::size_t>(text_len)));
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("malformed checkpoint entry: " + line);
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str(r.uint<std::uint32_t>());
    if (r.uint<std::uint8_t>() != kDtypeF32) throw FormatError("tensor '" + name + "' has an unknown dtype");
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.uint<std::uint64_t>());
      numel *= d;
    }
    r.need(numel * 4);
    Tensor t(shape);
    for (float& v : t.mutable_data()) v = r.f32();
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void store_vit_config(Checkpoint& ckpt, const std::string& prefix, const ViTConfig& c) {
  ckpt.meta[prefix + ".image_size"] = std::to_string(c.image_size);
  ckpt.meta[prefix + ".patch_size"] = std::to_string(c.patch_size);
  ckpt.meta[prefix + ".dim"] = std::to_string(c.dim);
  ckpt.meta[prefix + ".depth"] = std::to_string(c.depth);
  ckpt.meta[prefix + ".heads"] = std::to_string(c.heads);
  ckpt.meta[prefix + ".num_registers"] = std::to_string(c.num_registers);
  std::ostringstream ratio;
  ratio.precision(9);
  ratio << c.mlp_ratio;
  ckpt.meta[prefix + ".mlp_ratio"] = ratio.str();
}

ViTConfig read_vit_config(const Checkpoint& ckpt, const std::string& prefix) {
  ViTConfig c;
  c.image_size = ckpt.get_u64(prefix + ".image_size");
  c.patch_size = ckpt.get_u64(prefix + ".patch_size");
  c.dim = ckpt.get_u64(prefix + ".dim");
  c.depth = ckpt.get_u64(prefix + ".depth");
  c.heads = ckpt.get_u64(prefix + ".heads");
  c.num_registers = ckpt.get_u64(prefix + ".num_registers");
  c.mlp_ratio = static_cast<float>(ckpt.get_double(prefix + ".mlp_ratio"));
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("stored encoder config is invalid: ") + e.what());
  }
  return c;
}

void store_encoder(Checkpoint& ckpt, const std::string& prefix, const EncoderParams& params) {
  store_vit_config(ckpt, prefix + ".config", params.config);
  for (const auto& [name, t] : params.named_tensors()) ckpt.put(prefix + "." + name, t);
}

EncoderParams load_encoder(const Checkpoint& ckpt, const std::string& prefix, const ViTConfig* expected) {
  const ViTConfig stored = read_vit_config(ckpt, prefix + ".config");
  if (expected != nullptr && !(stored == *expected)) {
    throw ShapeMismatchError("checkpoint encoder '" + prefix + "' has dim " + std::to_string(stored.dim) + ", depth " +
                             std::to_string(stored.depth) + ", patch " + std::to_string(stored.patch_size) +
                             "; expected dim " + std::to_string(expected->dim) + ", depth " +
                             std::to_string(expected->depth) + ", patch " + std::to_string(expected->patch_size));
  }
  EncoderParams params = init_params(stored, 0);
  for (auto& [name, t] : params.named_tensors()) {
    const Tensor& src = ckpt.tensor(prefix + "." + name);
    if (src.shape() != t.shape()) {
      throw ShapeMismatchError("tensor '" + prefix + "." + name + "' has shape " + shape_str(src.shape()) +
                               ", expected " + shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  return params;
}

}  // namespace eupe
