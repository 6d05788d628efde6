#pragma once

// Transformer U-Net dehazing generator, its uncertainty head, and the
// PatchGAN discriminator used by the adversarial term.
//
// Parameter naming is documented in docs/MANIFEST.md.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "semiuf/autograd.hpp"
#include "semiuf/core.hpp"

namespace semiuf {

template <class T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> init);
  const Var<T>& operator[](const std::string& name) const;
  Var<T>& operator[](const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t parameter_count() const;

  // Freezes (or unfreezes) every parameter whose name starts with prefix.
  void set_frozen(const std::string& prefix, bool frozen);
  bool is_frozen(const std::string& name) const { return !(*this)[name].requires_grad(); }
  void zero_grad();

  std::map<std::string, NamedTensor> export_tensors() const;
  // Replaces values; names and shapes must match exactly.
  void import_tensors(const std::map<std::string, NamedTensor>& tensors);

  template <class U>
  void copy_values_from(const ParamStore<U>& other) {
    import_tensors(other.export_tensors());
  }

  std::map<std::string, Var<T>>& items() { return params_; }
  const std::map<std::string, Var<T>>& items() const { return params_; }

 private:
  std::map<std::string, Var<T>> params_;
};

// PyTorch-style uniform(+-1/sqrt(fan_in)) initialisation of "<name>.weight" and "<name>.bias".
template <class T>
void add_conv_params(ParamStore<T>& ps, const std::string& name, int out_ch, int in_ch, int k,
                     Rng& rng);

template <class T>
void add_block_params(ParamStore<T>& ps, const std::string& prefix, int channels, int hidden,
                      int heads, int window, Rng& rng);

template <class T>
void add_mdb_params(ParamStore<T>& ps, const std::string& prefix, int channels, int depth,
                    int hidden, int heads, int window, bool fusion, Rng& rng);

// --- layers --------------------------------------------------------------

template <class T>
Var<T> conv_layer(const ParamStore<T>& ps, const std::string& name, const Var<T>& x, int stride,
                  int pad);

// Single 3x3 convolution, stride 1, padding 1, no nonlinearity.
template <class T>
Var<T> shallow_extract(const ParamStore<T>& ps, const Var<T>& img);

// Window (optionally shifted) multi-head self-attention with a parallel 3x3
// convolution on V, summed before the output projection.
template <class T>
Var<T> w_mhsa_pc(const ParamStore<T>& ps, const std::string& prefix, const Var<T>& x, int window,
                 int heads, bool shift);

// x + attn(LN(x)), then x + MLP(LN(x)).
template <class T>
Var<T> dehazeformer_block(const ParamStore<T>& ps, const std::string& prefix, const Var<T>& x,
                          int window, int heads, bool shift);

// depth Dehazeformer blocks (shift on odd indices), then RB(y) + y when fusion is on.
template <class T>
Var<T> mix_dehazeformer_block(const ParamStore<T>& ps, const std::string& prefix,
                              const Var<T>& x, int depth, int window, int heads, bool fusion);

// conv3x3 -> ReLU -> conv3x3 (1 channel) -> clamp to [-8, 8]; output is ln(theta).
template <class T>
Var<T> ueb_head(const ParamStore<T>& ps, const Var<T>& features);

// --- generator ----------------------------------------------------------

template <class T>
class DehazeNet {
 public:
  struct Output {
    Var<T> dehazed;           // [B,3,H,W], clamped to [0,1]
    Var<T> log_theta;         // [B,1,H,W] when requested
    Var<T> kl_embedding;      // [B, embed_dims[kl_tap_stage]]
    Var<T> decoder_features;  // final decoder stage output
  };

  explicit DehazeNet(NetConfig cfg, std::uint64_t seed = 0);

  const NetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  Output forward(const Var<T>& img, bool want_uncertainty) const;

  // Freezes the uncertainty head only.
  void freeze_uncertainty_head(bool frozen) { params_.set_frozen("ueb.", frozen); }
  void freeze_all(bool frozen) { params_.set_frozen("", frozen); }

  Checkpoint to_checkpoint(Role role, const std::string& rng_state = {}) const;
  // Rejects checkpoints built for a different NetConfig.
  void load(const Checkpoint& ckpt);

 private:
  NetConfig cfg_;
  ParamStore<T> params_;
};

// Closed-form parameter count, independent of how the net is assembled.
std::size_t expected_parameter_count(const NetConfig& cfg);

struct ForwardOutput {
  ImageBatch dehazed;
  std::optional<LogUncertaintyMap> log_theta;
  Tensor<float> kl_embedding;  // [B, C]
};

// Inference entry point: validates shapes and runs without recording gradients.
ForwardOutput forward(const DehazeNet<float>& net, const ImageBatch& img, bool want_uncertainty);

// --- discriminator ------------------------------------------------------

// Four stride-2 4x4 convolutions (3->16->32->64->1), LeakyReLU(0.2) between.
template <class T>
class Discriminator {
 public:
  static constexpr std::array<int, 4> kChannels{16, 32, 64, 1};

  explicit Discriminator(std::uint64_t seed = 0);

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // [B,3,H,W] -> [B,1,H/16,W/16] patch scores.
  Var<T> forward(const Var<T>& img) const;

  Checkpoint to_checkpoint(const std::string& rng_state = {}) const;
  void load(const Checkpoint& ckpt);

 private:
  ParamStore<T> params_;
};

}  // namespace semiuf
