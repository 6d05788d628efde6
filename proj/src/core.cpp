#include "semiuf/core.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace semiuf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian float32");

// ---------------------------------------------------------------------------
// Configuration

void NetConfig::validate() const {
  for (int i = 0; i < 5; ++i) {
    if (embed_dims[i] <= 0 || depths[i] <= 0 || num_heads[i] <= 0)
      throw ConfigError("embed_dims, depths and num_heads must be positive");
    if (embed_dims[i] % num_heads[i] != 0)
      throw ConfigError("embed_dims[" + std::to_string(i) + "]=" + std::to_string(embed_dims[i]) +
                        " not divisible by num_heads[" + std::to_string(i) +
                        "]=" + std::to_string(num_heads[i]));
  }
  if (window_size <= 0) throw ConfigError("window_size must be positive");
  if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
  if (kl_tap_stage < 0 || kl_tap_stage > 4) throw ConfigError("kl_tap_stage must be in [0,4]");
}

int NetConfig::mlp_hidden(int stage) const {
  return std::max(1, static_cast<int>(std::lround(mlp_ratio * embed_dims[stage])));
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::array<int, 5> parse_int5(const std::string& key, const std::string& v) {
  std::array<int, 5> out{};
  std::stringstream ss(v);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',')) {
    if (i >= 5) throw ConfigError(key + ": expected exactly 5 values");
    try {
      out[i++] = std::stoi(trim(tok));
    } catch (const std::exception&) {
      throw ConfigError(key + ": bad integer '" + tok + "'");
    }
  }
  if (i != 5) throw ConfigError(key + ": expected exactly 5 values");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": bad number '" + v + "'");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long d = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": bad integer '" + v + "'");
  }
}

std::string join5(const std::array<int, 5>& a) {
  std::string s;
  for (int i = 0; i < 5; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto& net = cfg.net;
    auto& w = cfg.weights;
    if (key == "embed_dims") net.embed_dims = parse_int5(key, v);
    else if (key == "depths") net.depths = parse_int5(key, v);
    else if (key == "num_heads") net.num_heads = parse_int5(key, v);
    else if (key == "window_size") net.window_size = static_cast<int>(parse_long(key, v));
    else if (key == "mlp_ratio") net.mlp_ratio = parse_double(key, v);
    else if (key == "kl_tap_stage") net.kl_tap_stage = static_cast<int>(parse_long(key, v));
    else if (key == "use_mdb_fusion") net.use_mdb_fusion = parse_bool(key, v);
    else if (key == "global_skip") net.global_skip = parse_bool(key, v);
    else if (key == "ueb_input") {
      if (v == "decoder") net.ueb_input = UebInput::decoder;
      else if (v == "image") net.ueb_input = UebInput::image;
      else throw ConfigError("ueb_input: expected decoder or image");
    }
    else if (key == "lambda1") w.lambda1 = parse_double(key, v);
    else if (key == "lambda2") w.lambda2 = parse_double(key, v);
    else if (key == "lambda3") w.lambda3 = parse_double(key, v);
    else if (key == "lambda4") w.lambda4 = parse_double(key, v);
    else if (key == "lambda5") w.lambda5 = parse_double(key, v);
    else if (key == "lambda6") w.lambda6 = parse_double(key, v);
    else if (key == "lr") cfg.lr = parse_double(key, v);
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_long(key, v));
    else if (key == "epochs_teacher") cfg.epochs_teacher = static_cast<int>(parse_long(key, v));
    else if (key == "epochs_student") cfg.epochs_student = static_cast<int>(parse_long(key, v));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_long(key, v));
    else if (key == "max_steps") cfg.max_steps = parse_long(key, v);
    else if (key == "base_l1") cfg.base_l1 = parse_bool(key, v);
    else if (key == "ugu_pseudo_label") cfg.ugu_pseudo_label = parse_bool(key, v);
    else if (key == "identity_on_pseudo") cfg.identity_on_pseudo = parse_bool(key, v);
    else if (key == "kl_temperature") cfg.kl_temperature = parse_double(key, v);
    else if (key == "use_uncertainty") cfg.use_uncertainty = parse_bool(key, v);
    else if (key == "use_kl") cfg.use_kl = parse_bool(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  for (double l : {cfg.weights.lambda1, cfg.weights.lambda2, cfg.weights.lambda3,
                   cfg.weights.lambda4, cfg.weights.lambda5, cfg.weights.lambda6})
    if (!(l >= 0)) throw ConfigError("loss weights must be non-negative");
  if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be positive");
  if (!(cfg.kl_temperature > 0)) throw ConfigError("kl_temperature must be positive");
  cfg.net.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string net_config_to_text(const NetConfig& n) {
  std::ostringstream os;
  os << "embed_dims=" << join5(n.embed_dims) << "\n"
     << "depths=" << join5(n.depths) << "\n"
     << "num_heads=" << join5(n.num_heads) << "\n"
     << "window_size=" << n.window_size << "\n"
     << "mlp_ratio=" << fmt_double(n.mlp_ratio) << "\n"
     << "kl_tap_stage=" << n.kl_tap_stage << "\n"
     << "use_mdb_fusion=" << (n.use_mdb_fusion ? "true" : "false") << "\n"
     << "global_skip=" << (n.global_skip ? "true" : "false") << "\n"
     << "ueb_input=" << (n.ueb_input == UebInput::decoder ? "decoder" : "image") << "\n";
  return os.str();
}

NetConfig net_config_from_text(const std::string& text) { return parse_config_text(text).net; }

std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  os << net_config_to_text(c.net);
  const auto& w = c.weights;
  os << "lambda1=" << fmt_double(w.lambda1) << "\n"
     << "lambda2=" << fmt_double(w.lambda2) << "\n"
     << "lambda3=" << fmt_double(w.lambda3) << "\n"
     << "lambda4=" << fmt_double(w.lambda4) << "\n"
     << "lambda5=" << fmt_double(w.lambda5) << "\n"
     << "lambda6=" << fmt_double(w.lambda6) << "\n"
     << "lr=" << fmt_double(c.lr) << "\n"
     << "batch_size=" << c.batch_size << "\n"
     << "epochs_teacher=" << c.epochs_teacher << "\n"
     << "epochs_student=" << c.epochs_student << "\n"
     << "seed=" << c.seed << "\n"
     << "max_steps=" << c.max_steps << "\n"
     << "base_l1=" << (c.base_l1 ? "true" : "false") << "\n"
     << "ugu_pseudo_label=" << (c.ugu_pseudo_label ? "true" : "false") << "\n"
     << "identity_on_pseudo=" << (c.identity_on_pseudo ? "true" : "false") << "\n"
     << "kl_temperature=" << fmt_double(c.kl_temperature) << "\n"
     << "use_uncertainty=" << (c.use_uncertainty ? "true" : "false") << "\n"
     << "use_kl=" << (c.use_kl ? "true" : "false") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Randomness

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

std::uint64_t Rng::child_seed(std::uint64_t parent, std::uint64_t index) {
  return splitmix64(parent ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::string Rng::state() const {
  std::ostringstream os;
  os << seed_ << ' ' << engine_;
  return os.str();
}

void Rng::set_state(const std::string& bytes) {
  std::istringstream is(bytes);
  is >> seed_ >> engine_;
  if (!is) throw CheckpointError("corrupt rng state");
}

Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

// ---------------------------------------------------------------------------
// Images

ImageBatch::ImageBatch(Tensor<float> data) : data_(std::move(data)) {
  if (data_.rank() != 4 || data_.dim(1) != 3)
    throw ShapeError("ImageBatch expects [B,3,H,W], got " + shape_str(data_.shape()));
  for (float v : data_.vec())
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
      throw std::domain_error("ImageBatch values must be finite and within [0,1]");
}

ImageBatch ImageBatch::item(int n) const {
  const std::size_t per = data_.size() / data_.dim(0);
  std::vector<float> v(data_.vec().begin() + n * per, data_.vec().begin() + (n + 1) * per);
  return ImageBatch(Tensor<float>({1, 3, height(), width()}, std::move(v)));
}

ImageBatch ImageBatch::stack(const std::vector<ImageBatch>& items) {
  if (items.empty()) throw ShapeError("stack of zero images");
  const int h = items[0].height(), w = items[0].width();
  int b = 0;
  std::vector<float> v;
  for (const auto& it : items) {
    if (it.height() != h || it.width() != w) throw ShapeError("stack: image sizes differ");
    b += it.batch();
    v.insert(v.end(), it.tensor().vec().begin(), it.tensor().vec().end());
  }
  return ImageBatch(Tensor<float>({b, 3, h, w}, std::move(v)));
}

void ImageBatch::require_divisible(int multiple) const {
  if (height() % multiple != 0 || width() % multiple != 0)
    throw ShapeError("image size " + std::to_string(height()) + "x" + std::to_string(width()) +
                     " is not a multiple of " + std::to_string(multiple) +
                     " (window_size x 4)");
}

Tensor<float> reflect_pad(const Tensor<float>& img, int multiple) {
  if (img.rank() != 4) throw ShapeError("reflect_pad expects [B,C,H,W], got " + shape_str(img.shape()));
  if (multiple <= 0) throw std::invalid_argument("reflect_pad: multiple must be positive");
  const int b = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  const int ho = (h + multiple - 1) / multiple * multiple;
  const int wo = (w + multiple - 1) / multiple * multiple;
  if (ho - h >= h || wo - w >= w)
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " too small to reflect-pad to a multiple of " + std::to_string(multiple));
  auto mirror = [](int i, int n) { return i < n ? i : 2 * (n - 1) - i; };
  Tensor<float> out({b, c, ho, wo});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) out.at(n, ch, y, x) = img.at(n, ch, mirror(y, h), mirror(x, w));
  return out;
}

Tensor<float> crop(const Tensor<float>& img, int height, int width) {
  if (img.rank() != 4 || height > img.dim(2) || width > img.dim(3) || height <= 0 || width <= 0)
    throw ShapeError("cannot crop " + shape_str(img.shape()) + " to " + std::to_string(height) + "x" +
                     std::to_string(width));
  const int b = img.dim(0), c = img.dim(1);
  Tensor<float> out({b, c, height, width});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) out.at(n, ch, y, x) = img.at(n, ch, y, x);
  return out;
}

LogUncertaintyMap::LogUncertaintyMap(Tensor<float> data) : data_(std::move(data)) {
  if (data_.rank() != 4 || data_.dim(1) != 1)
    throw ShapeError("LogUncertaintyMap expects [B,1,H,W], got " + shape_str(data_.shape()));
  for (float v : data_.vec())
    if (!std::isfinite(v) || v < kMin || v > kMax)
      throw std::domain_error("log-uncertainty values must be finite and within [-8,8]");
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string role_name(Role r) {
  switch (r) {
    case Role::teacher: return "teacher";
    case Role::student: return "student";
    case Role::discriminator: return "discriminator";
  }
  return "unknown";
}

std::uint32_t crc32_of(const void* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

namespace {

constexpr char kMagic[4] = {'S', 'U', 'F', 'C'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string buf) : buf_(std::move(buf)) {}
  void raw(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::string str(std::size_t limit) {
    const std::uint32_t n = u32();
    if (n > limit || pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(ckpt.version);
  w.u8(static_cast<std::uint8_t>(ckpt.role));
  w.str(net_config_to_text(ckpt.config));
  w.str(ckpt.rng_state);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (shape_numel(t.shape) != t.data.size())
      throw CheckpointError("tensor '" + name + "' payload does not match its shape");
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    const std::size_t nbytes = t.data.size() * sizeof(float);
    w.u32(crc32_of(t.data.data(), nbytes));
    w.raw(t.data.data(), nbytes);
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw CheckpointError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " +
                          ec.message());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());

  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.version));
  const auto role = r.u8();
  if (role > 2) throw CheckpointError("unknown checkpoint role");
  ck.role = static_cast<Role>(role);
  try {
    ck.config = net_config_from_text(r.str(1 << 16));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt embedded config: ") + e.what());
  }
  ck.rng_state = r.str(1 << 20);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
    NamedTensor t;
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<int>(r.u32()));
    const std::uint32_t crc = r.u32();
    const std::size_t n = shape_numel(t.shape);
    if (n > (std::size_t{1} << 32)) throw CheckpointError("tensor '" + name + "' too large");
    t.data.resize(n);
    r.raw(t.data.data(), n * sizeof(float));
    if (crc32_of(t.data.data(), n * sizeof(float)) != crc)
      throw CheckpointError("checksum mismatch in tensor '" + name + "'");
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const NetConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.config == expected))
    throw CheckpointError("checkpoint config mismatch:\n--- stored\n" +
                          net_config_to_text(ck.config) + "--- expected\n" +
                          net_config_to_text(expected));
  return ck;
}

namespace {

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(d[i]);
  return os.str();
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx_, p, n); }
  std::string hexdigest() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    return hex(md, len);
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string payload_sha256(const Checkpoint& ckpt) {
  Sha256 h;
  for (const auto& [name, t] : ckpt.tensors) {
    h.update(name.data(), name.size() + 1);
    for (int d : t.shape) h.update(&d, sizeof d);
    h.update(t.data.data(), t.data.size() * sizeof(float));
  }
  return h.hexdigest();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hexdigest();
}

}  // namespace semiuf
