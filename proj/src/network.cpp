#include "semiuf/network.hpp"

#include <cmath>

#include "semiuf/ops.hpp"

namespace semiuf {

// ---------------------------------------------------------------------------
// ParamStore

template <class T>
Var<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
  return params_.emplace(name, Var<T>::leaf(std::move(init), true)).first->second;
}

template <class T>
const Var<T>& ParamStore<T>::operator[](const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <class T>
Var<T>& ParamStore<T>::operator[](const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

template <class T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

template <class T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : params_) n += v.value().size();
  return n;
}

template <class T>
void ParamStore<T>::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& [k, v] : params_)
    if (k.compare(0, prefix.size(), prefix) == 0) v.set_requires_grad(!frozen);
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& [k, v] : params_) v.zero_grad();
}

template <class T>
std::map<std::string, NamedTensor> ParamStore<T>::export_tensors() const {
  std::map<std::string, NamedTensor> out;
  for (const auto& [k, v] : params_) {
    NamedTensor t;
    t.shape = v.shape();
    t.data.assign(v.value().vec().begin(), v.value().vec().end());
    out.emplace(k, std::move(t));
  }
  return out;
}

template <class T>
void ParamStore<T>::import_tensors(const std::map<std::string, NamedTensor>& tensors) {
  if (tensors.size() != params_.size())
    throw CheckpointError("parameter set mismatch: expected " + std::to_string(params_.size()) +
                          " tensors, got " + std::to_string(tensors.size()));
  for (auto& [k, v] : params_) {
    auto it = tensors.find(k);
    if (it == tensors.end()) throw CheckpointError("missing tensor " + k);
    if (it->second.shape != v.shape())
      throw CheckpointError("tensor " + k + " has shape " + shape_str(it->second.shape) +
                            ", expected " + shape_str(v.shape()));
    auto& dst = v.mutable_value().vec();
    std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Initialisation

template <class T>
void add_conv_params(ParamStore<T>& ps, const std::string& name, int out_ch, int in_ch, int k,
                     Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
  Tensor<T> w({out_ch, in_ch, k, k});
  for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> b({out_ch});
  for (auto& v : b.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", std::move(b));
}

template <class T>
void add_block_params(ParamStore<T>& ps, const std::string& p, int c, int hidden, int heads,
                      int window, Rng& rng) {
  ps.add(p + ".norm1.gamma", Tensor<T>({c}, T(1)));
  ps.add(p + ".norm1.beta", Tensor<T>({c}, T(0)));
  add_conv_params(ps, p + ".attn.qkv", 3 * c, c, 1, rng);
  const int side = 2 * window - 1;
  Tensor<T> rb({heads, side * side});
  for (auto& v : rb.vec()) v = static_cast<T>(std::clamp(rng.normal(0.0, 0.02), -0.04, 0.04));
  ps.add(p + ".attn.rel_bias", std::move(rb));
  add_conv_params(ps, p + ".attn.vconv", c, c, 3, rng);
  add_conv_params(ps, p + ".attn.proj", c, c, 1, rng);
  ps.add(p + ".norm2.gamma", Tensor<T>({c}, T(1)));
  ps.add(p + ".norm2.beta", Tensor<T>({c}, T(0)));
  add_conv_params(ps, p + ".mlp.fc1", hidden, c, 1, rng);
  add_conv_params(ps, p + ".mlp.fc2", c, hidden, 1, rng);
}

template <class T>
void add_mdb_params(ParamStore<T>& ps, const std::string& p, int c, int depth, int hidden,
                    int heads, int window, bool fusion, Rng& rng) {
  for (int j = 0; j < depth; ++j)
    add_block_params(ps, p + ".block" + std::to_string(j), c, hidden, heads, window, rng);
  if (fusion) {
    add_conv_params(ps, p + ".rb.conv1", c, c, 3, rng);
    add_conv_params(ps, p + ".rb.conv2", c, c, 3, rng);
  }
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
Var<T> conv_layer(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int stride,
                  int pad) {
  return ops::conv2d(x, ps[name + ".weight"], ps[name + ".bias"], stride, pad);
}

template <class T>
Var<T> shallow_extract(const ParamStore<T>& ps, const Var<T>& img) {
  if (img.value().rank() != 4 || img.dim(1) != 3)
    throw ShapeError("shallow_extract expects [B,3,H,W], got " + shape_str(img.shape()));
  return conv_layer(ps, "shallow", img, 1, 1);
}

template <class T>
Var<T> w_mhsa_pc(const ParamStore<T>& ps, const std::string& p, const Var<T>& x, int window,
                 int heads, bool shift) {
  const int c = x.dim(1);
  Var<T> qkv = conv_layer(ps, p + ".qkv", x, 1, 0);
  Var<T> attn = ops::window_attention(qkv, ps[p + ".rel_bias"], heads, window, shift);
  Var<T> vconv = conv_layer(ps, p + ".vconv", ops::channel_slice(qkv, 2 * c, c), 1, 1);
  return conv_layer(ps, p + ".proj", ops::add(attn, vconv), 1, 0);
}

template <class T>
Var<T> dehazeformer_block(const ParamStore<T>& ps, const std::string& p, const Var<T>& x,
                          int window, int heads, bool shift) {
  Var<T> h = ops::layer_norm_channels(x, ps[p + ".norm1.gamma"], ps[p + ".norm1.beta"]);
  Var<T> y = ops::add(x, w_mhsa_pc(ps, p + ".attn", h, window, heads, shift));
  h = ops::layer_norm_channels(y, ps[p + ".norm2.gamma"], ps[p + ".norm2.beta"]);
  h = conv_layer(ps, p + ".mlp.fc2", ops::gelu(conv_layer(ps, p + ".mlp.fc1", h, 1, 0)), 1, 0);
  return ops::add(y, h);
}

template <class T>
Var<T> mix_dehazeformer_block(const ParamStore<T>& ps, const std::string& p, const Var<T>& x,
                              int depth, int window, int heads, bool fusion) {
  if (depth < 1) throw std::invalid_argument("MDB depth must be >= 1");
  Var<T> y = x;
  for (int j = 0; j < depth; ++j)
    y = dehazeformer_block(ps, p + ".block" + std::to_string(j), y, window, heads, j % 2 == 1);
  if (!fusion) return y;
  Var<T> r = conv_layer(ps, p + ".rb.conv2", ops::relu(conv_layer(ps, p + ".rb.conv1", y, 1, 1)),
                        1, 1);
  return ops::add(r, y);
}

template <class T>
Var<T> ueb_head(const ParamStore<T>& ps, const Var<T>& features) {
  Var<T> h = ops::relu(conv_layer(ps, "ueb.conv1", features, 1, 1));
  return ops::clamp(conv_layer(ps, "ueb.conv2", h, 1, 1), T(LogUncertaintyMap::kMin),
                    T(LogUncertaintyMap::kMax));
}

// ---------------------------------------------------------------------------
// Generator

template <class T>
DehazeNet<T>::DehazeNet(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& e = cfg_.embed_dims;
  const int ws = cfg_.window_size;
  add_conv_params(params_, "shallow", e[0], 3, 3, rng);
  for (int i = 0; i < 5; ++i)
    add_mdb_params(params_, "stage" + std::to_string(i), e[i], cfg_.depths[i], cfg_.mlp_hidden(i),
                   cfg_.num_heads[i], ws, cfg_.use_mdb_fusion, rng);
  add_conv_params(params_, "down0", e[1], e[0], 3, rng);
  add_conv_params(params_, "down1", e[2], e[1], 3, rng);
  add_conv_params(params_, "up0", 4 * e[3], e[2], 3, rng);
  add_conv_params(params_, "up1", 4 * e[4], e[3], 3, rng);
  add_conv_params(params_, "fuse0", e[3], e[3] + e[1], 1, rng);
  add_conv_params(params_, "fuse1", e[4], e[4] + e[0], 1, rng);
  add_conv_params(params_, "tail.down", e[4], e[4], 3, rng);
  add_conv_params(params_, "tail.conv", 12, e[4], 3, rng);
  const int ueb_in = cfg_.ueb_input == UebInput::decoder ? e[4] : 3;
  add_conv_params(params_, "ueb.conv1", e[4], ueb_in, 3, rng);
  add_conv_params(params_, "ueb.conv2", 1, e[4], 3, rng);
}

template <class T>
typename DehazeNet<T>::Output DehazeNet<T>::forward(const Var<T>& img, bool want_uncertainty) const {
  const Shape& s = img.shape();
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("forward expects [B,3,H,W], got " + shape_str(s));
  const int m = cfg_.size_multiple();
  if (s[2] % m != 0 || s[3] % m != 0)
    throw ShapeError("image size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " is not a multiple of " + std::to_string(m) + " (window_size x 4)");
  const int ws = cfg_.window_size;
  auto stage = [&](int i, const Var<T>& x) {
    return mix_dehazeformer_block(params_, "stage" + std::to_string(i), x, cfg_.depths[i], ws,
                                  cfg_.num_heads[i], cfg_.use_mdb_fusion);
  };
  std::array<Var<T>, 5> out;
  out[0] = stage(0, shallow_extract(params_, img));
  out[1] = stage(1, conv_layer(params_, "down0", out[0], 2, 1));
  out[2] = stage(2, conv_layer(params_, "down1", out[1], 2, 1));
  Var<T> up = ops::pixel_shuffle(conv_layer(params_, "up0", out[2], 1, 1), 2);
  out[3] = stage(3, conv_layer(params_, "fuse0", ops::concat_channels(up, out[1]), 1, 0));
  up = ops::pixel_shuffle(conv_layer(params_, "up1", out[3], 1, 1), 2);
  out[4] = stage(4, conv_layer(params_, "fuse1", ops::concat_channels(up, out[0]), 1, 0));

  Var<T> tail = conv_layer(params_, "tail.down", out[4], 2, 1);
  Var<T> recon = ops::pixel_shuffle(conv_layer(params_, "tail.conv", tail, 1, 1), 2);
  if (cfg_.global_skip) recon = ops::add(recon, img);

  Output o;
  // Straight-through so that pixels outside [0,1] still receive a gradient.
  o.dehazed = ops::clamp(recon, T(0), T(1), true);
  o.decoder_features = out[4];
  o.kl_embedding = ops::global_avg_pool(out[cfg_.kl_tap_stage]);
  if (want_uncertainty)
    o.log_theta = ueb_head(params_, cfg_.ueb_input == UebInput::decoder ? out[4] : o.dehazed);
  return o;
}

template <class T>
Checkpoint DehazeNet<T>::to_checkpoint(Role role, const std::string& rng_state) const {
  Checkpoint ck;
  ck.role = role;
  ck.config = cfg_;
  ck.rng_state = rng_state;
  ck.tensors = params_.export_tensors();
  return ck;
}

template <class T>
void DehazeNet<T>::load(const Checkpoint& ckpt) {
  if (ckpt.role == Role::discriminator)
    throw CheckpointError("cannot load a discriminator checkpoint into a generator");
  if (!(ckpt.config == cfg_))
    throw CheckpointError("checkpoint config mismatch:\n--- stored\n" +
                          net_config_to_text(ckpt.config) + "--- expected\n" +
                          net_config_to_text(cfg_));
  params_.import_tensors(ckpt.tensors);
}

std::size_t expected_parameter_count(const NetConfig& cfg) {
  auto conv = [](std::size_t co, std::size_t ci, std::size_t k) { return co * ci * k * k + co; };
  const auto& e = cfg.embed_dims;
  const std::size_t side = 2 * cfg.window_size - 1;
  std::size_t n = conv(e[0], 3, 3);
  for (int i = 0; i < 5; ++i) {
    const std::size_t c = e[i], m = cfg.mlp_hidden(i), h = cfg.num_heads[i];
    const std::size_t block = 4 * c                 // two layer norms
                              + conv(3 * c, c, 1)   // qkv
                              + h * side * side     // relative bias
                              + conv(c, c, 3)       // parallel conv on V
                              + conv(c, c, 1)       // output projection
                              + conv(m, c, 1) + conv(c, m, 1);
    n += block * cfg.depths[i];
    if (cfg.use_mdb_fusion) n += 2 * conv(c, c, 3);
  }
  n += conv(e[1], e[0], 3) + conv(e[2], e[1], 3);
  n += conv(4 * e[3], e[2], 3) + conv(4 * e[4], e[3], 3);
  n += conv(e[3], e[3] + e[1], 1) + conv(e[4], e[4] + e[0], 1);
  n += conv(e[4], e[4], 3) + conv(12, e[4], 3);
  n += conv(e[4], cfg.ueb_input == UebInput::decoder ? e[4] : 3, 3) + conv(1, e[4], 3);
  return n;
}

ForwardOutput forward(const DehazeNet<float>& net, const ImageBatch& img, bool want_uncertainty) {
  img.require_divisible(net.config().size_multiple());
  NoGradGuard guard;
  auto o = net.forward(Var<float>::leaf(img.tensor()), want_uncertainty);
  ForwardOutput out{ImageBatch(o.dehazed.value()), std::nullopt, o.kl_embedding.value()};
  if (want_uncertainty) out.log_theta = LogUncertaintyMap(o.log_theta.value());
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator

template <class T>
Discriminator<T>::Discriminator(std::uint64_t seed) {
  Rng rng(seed);
  int in = 3;
  for (int i = 0; i < 4; ++i) {
    add_conv_params(params_, "disc.l" + std::to_string(i), kChannels[i], in, 4, rng);
    in = kChannels[i];
  }
}

template <class T>
Var<T> Discriminator<T>::forward(const Var<T>& img) const {
  Var<T> h = img;
  for (int i = 0; i < 4; ++i) {
    h = conv_layer(params_, "disc.l" + std::to_string(i), h, 2, 1);
    if (i < 3) h = ops::leaky_relu(h, T(0.2));
  }
  return h;
}

template <class T>
Checkpoint Discriminator<T>::to_checkpoint(const std::string& rng_state) const {
  Checkpoint ck;
  ck.role = Role::discriminator;
  ck.rng_state = rng_state;
  ck.tensors = params_.export_tensors();
  return ck;
}

template <class T>
void Discriminator<T>::load(const Checkpoint& ckpt) {
  if (ckpt.role != Role::discriminator)
    throw CheckpointError("expected a discriminator checkpoint, got " + role_name(ckpt.role));
  params_.import_tensors(ckpt.tensors);
}

#define SEMIUF_INSTANTIATE(T)                                                                     \
  template class ParamStore<T>;                                                                   \
  template class DehazeNet<T>;                                                                    \
  template class Discriminator<T>;                                                                \
  template void add_conv_params(ParamStore<T>&, const std::string&, int, int, int, Rng&);         \
  template void add_block_params(ParamStore<T>&, const std::string&, int, int, int, int, Rng&);   \
  template void add_mdb_params(ParamStore<T>&, const std::string&, int, int, int, int, int, bool, \
                               Rng&);                                                             \
  template Var<T> conv_layer(const ParamStore<T>&, const std::string&, const Var<T>&, int, int);  \
  template Var<T> shallow_extract(const ParamStore<T>&, const Var<T>&);                           \
  template Var<T> w_mhsa_pc(const ParamStore<T>&, const std::string&, const Var<T>&, int, int,    \
                            bool);                                                                \
  template Var<T> dehazeformer_block(const ParamStore<T>&, const std::string&, const Var<T>&,     \
                                     int, int, bool);                                             \
  template Var<T> mix_dehazeformer_block(const ParamStore<T>&, const std::string&, const Var<T>&, \
                                         int, int, int, bool);                                    \
  template Var<T> ueb_head(const ParamStore<T>&, const Var<T>&);

SEMIUF_INSTANTIATE(float)
SEMIUF_INSTANTIATE(double)
#undef SEMIUF_INSTANTIATE

}  // namespace semiuf
