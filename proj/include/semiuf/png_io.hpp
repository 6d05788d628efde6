#pragma once

#include <filesystem>

#include "semiuf/tensor.hpp"

namespace semiuf {

// Reads an 8-bit PNG as a [1,3,H,W] tensor in [0,1] (grey and alpha are
// converted to RGB).
Tensor<float> read_png(const std::filesystem::path& path);

// Writes a [1,C,H,W] tensor (C = 1 or 3) as 8-bit PNG, rounding v*255.
void write_png(const std::filesystem::path& path, const Tensor<float>& img);

}  // namespace semiuf
