#pragma once

// Procedural stand-in for paired synthetic and unpaired real hazy corpora.
// Haze follows the atmospheric scattering model I = J t + A (1 - t),
// t = exp(-beta * depth).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "semiuf/core.hpp"

namespace semiuf {

struct HazeParams {
  double airlight = 0.85;                            // scalar A
  std::optional<std::array<double, 3>> airlight_rgb;  // per-channel A, overrides the scalar
  double beta = 1.0;
  Tensor<float> depth;  // [H, W], non-negative
};

// [1,3,H,W] scene: smooth colour ramps, rectangles and disks, thin strokes.
ImageBatch make_clean_image(Rng& rng, int height, int width);

// [H,W] smooth field normalised to [0, 3].
Tensor<float> make_depth_field(Rng& rng, int height, int width);

// Applies the scattering model per pixel and channel.
ImageBatch synthesize_haze(const ImageBatch& clean, const HazeParams& params);

struct RealDomainShift {
  double noise_sigma = 0.01;
  double gamma = 0.8;
  double beta_lo = 1.2;
  double beta_hi = 2.5;
  double airlight_jitter = 0.05;
};

struct DatasetSpec {
  int n_paired = 256;
  int n_unpaired_real = 64;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
  RealDomainShift real_domain_shift;
};

struct PairedSample {
  ImageBatch hazy;
  ImageBatch clean;
  double airlight = 0;
  double beta = 0;
  std::uint64_t seed = 0;
};

struct RealSample {
  ImageBatch hazy;
  double airlight = 0;
  double beta = 0;
  std::uint64_t seed = 0;
};

struct PairedBatch {
  ImageBatch hazy;
  ImageBatch clean;
};

struct UnpairedBatch {
  ImageBatch hazy;
};

// Walks a split in per-epoch shuffled order; reshuffles (seeded by epoch)
// when a pass completes. The final batch of an epoch may be short.
template <class Sample, class Batch>
class SplitIterator {
 public:
  SplitIterator(const std::vector<Sample>* items, int batch_size, std::uint64_t seed);

  Batch next();
  int epoch() const { return epoch_; }
  int batches_per_epoch() const;

 private:
  void reshuffle();

  const std::vector<Sample>* items_;
  int batch_size_;
  std::uint64_t seed_;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

using PairedIterator = SplitIterator<PairedSample, PairedBatch>;
using UnpairedIterator = SplitIterator<RealSample, UnpairedBatch>;

class Dataset {
 public:
  static Dataset build(const DatasetSpec& spec);
  // Reads a directory written by save().
  static Dataset load(const std::filesystem::path& dir);
  // PNG files plus manifest.tsv; clean counterparts of the real split go
  // under heldout/.
  void save(const std::filesystem::path& dir) const;

  const std::vector<PairedSample>& paired() const { return paired_; }
  const std::vector<RealSample>& real() const { return real_; }
  int height() const;
  int width() const;

  PairedIterator paired_iterator(int batch_size, std::uint64_t seed) const {
    return PairedIterator(&paired_, batch_size, seed);
  }
  UnpairedIterator unpaired_iterator(int batch_size, std::uint64_t seed) const {
    return UnpairedIterator(&real_, batch_size, seed);
  }

  // Evaluation-only ground truth for the real split; never fed to training.
  const ImageBatch& heldout_clean(std::size_t index) const { return heldout_.at(index); }
  std::size_t heldout_size() const { return heldout_.size(); }

 private:
  std::vector<PairedSample> paired_;
  std::vector<RealSample> real_;
  std::vector<ImageBatch> heldout_;
};

}  // namespace semiuf
