#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "semiuf/tensor.hpp"

namespace semiuf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Where the uncertainty head reads from.
enum class UebInput { decoder, image };

struct NetConfig {
  std::array<int, 5> embed_dims{16, 32, 64, 32, 16};
  std::array<int, 5> depths{1, 1, 2, 1, 1};
  std::array<int, 5> num_heads{1, 2, 4, 2, 1};
  int window_size = 4;
  double mlp_ratio = 2.0;
  int kl_tap_stage = 2;
  bool use_mdb_fusion = true;  // residual conv fusion after each Dehazeformer stack
  bool global_skip = false;    // adds the hazy input to the reconstruction
  UebInput ueb_input = UebInput::decoder;

  // Throws ConfigError when any invariant is violated.
  void validate() const;
  // Spatial sizes must be multiples of this.
  int size_multiple() const { return window_size * 4; }
  int mlp_hidden(int stage) const;

  bool operator==(const NetConfig&) const = default;
};

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1e-2;
  double lambda3 = 2.0;
  double lambda4 = 1e-2;
  double lambda5 = 1e-5;
  double lambda6 = 1e-6;

  bool operator==(const LossWeights&) const = default;
};

// Everything a config file may set. Unknown keys are rejected.
struct RunConfig {
  NetConfig net;
  LossWeights weights;
  double lr = 1e-4;
  int batch_size = 2;
  int epochs_teacher = 100;
  int epochs_student = 60;
  std::uint64_t seed = 0;
  // Optional step cap overriding the epoch-derived total (0 = none).
  long max_steps = 0;
  // Loss-reading switches.
  bool base_l1 = false;
  bool ugu_pseudo_label = false;      // ||J - G2(I_real)|| instead of ||J - G2(J)||
  bool identity_on_pseudo = false;    // L_ide on teacher pseudo-clean reals instead of clean synthetics
  double kl_temperature = 1.0;
  bool use_uncertainty = true;
  bool use_kl = true;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_text(const RunConfig& cfg);
std::string net_config_to_text(const NetConfig& cfg);
NetConfig net_config_from_text(const std::string& text);

// Deterministic random stream. Children derive from (seed, index) so that
// parallel work gets independent, reproducible streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  Rng split(std::uint64_t index) const { return Rng(child_seed(seed_, index)); }
  static std::uint64_t child_seed(std::uint64_t parent, std::uint64_t index);

  std::string state() const;
  void set_state(const std::string& bytes);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Rng seeded_rng(std::uint64_t seed);

// [B, 3, H, W] images in [0, 1].
class ImageBatch {
 public:
  ImageBatch() = default;
  explicit ImageBatch(Tensor<float> data);

  const Tensor<float>& tensor() const { return data_; }
  int batch() const { return data_.dim(0); }
  int height() const { return data_.dim(2); }
  int width() const { return data_.dim(3); }
  // Single image as a [1, 3, H, W] batch.
  ImageBatch item(int n) const;
  static ImageBatch stack(const std::vector<ImageBatch>& items);

  // Throws ShapeError unless H and W are multiples of `multiple`.
  void require_divisible(int multiple) const;

 private:
  Tensor<float> data_;
};

// Mirror-pads (without repeating the edge) H and W up to the next multiple.
// Requires pad < size along each axis.
Tensor<float> reflect_pad(const Tensor<float>& img, int multiple);
// Keeps the top-left height x width window of every plane.
Tensor<float> crop(const Tensor<float>& img, int height, int width);

// [B, 1, H, W] natural-log uncertainty, finite and within [-8, 8].
class LogUncertaintyMap {
 public:
  static constexpr float kMin = -8.0f;
  static constexpr float kMax = 8.0f;

  LogUncertaintyMap() = default;
  explicit LogUncertaintyMap(Tensor<float> data);

  const Tensor<float>& tensor() const { return data_; }

 private:
  Tensor<float> data_;
};

enum class Role : std::uint8_t { teacher = 0, student = 1, discriminator = 2 };
std::string role_name(Role r);

struct NamedTensor {
  Shape shape;
  std::vector<float> data;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  Role role = Role::teacher;
  std::map<std::string, NamedTensor> tensors;
  NetConfig config;
  std::string rng_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Loads and rejects a checkpoint whose NetConfig differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const NetConfig& expected);

// SHA-256 over tensor names, shapes and payloads, as lowercase hex.
std::string payload_sha256(const Checkpoint& ckpt);
std::string file_sha256(const std::filesystem::path& path);

std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace semiuf
