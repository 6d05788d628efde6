#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "semiuf/core.hpp"
#include "semiuf/network.hpp"

namespace semiuf {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(1 / MSE) over every element; kPsnrCap when the images are identical.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Gaussian-windowed SSIM with dynamic range 1, evaluated on the valid region
// of each channel and averaged over positions and channels. Inputs are
// [1,C,H,W] or [C,H,W].
double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& opt = {});

// Rounds to the nearest 1/255 level, for matching 8-bit evaluation conventions.
Tensor<float> quantize8(const Tensor<float>& img);

struct EvalRow {
  std::string name;
  double psnr = 0;
  double ssim = 0;
};

struct EvalReport {
  std::vector<EvalRow> per_image;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::string config_echo;

  // Tab-separated: header, one row per image, AGGREGATE row.
  std::string to_tsv() const;
};

struct EvalItem {
  std::string name;
  ImageBatch hazy;
  ImageBatch clean;
};

using Dehazer = std::function<ImageBatch(const ImageBatch&)>;

// Runs the dehazer on every item in order and writes the report to `out`
// when `out` is non-empty.
EvalReport evaluate(const Dehazer& dehaze, const std::vector<EvalItem>& items,
                    const std::filesystem::path& out = {}, bool quantize = false,
                    const std::string& config_echo = {});

EvalReport evaluate(const DehazeNet<float>& net, const std::vector<EvalItem>& items,
                    const std::filesystem::path& out = {}, bool quantize = false);

}  // namespace semiuf
