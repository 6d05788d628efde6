#include "semiuf/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace semiuf {

Tensor<float> read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor<float> out({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(0, c, y, x) = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.rank() != 4 || img.dim(0) != 1 || (img.dim(1) != 1 && img.dim(1) != 3))
    throw std::invalid_argument("write_png expects [1,1|3,H,W], got " + shape_str(img.shape()));
  const int c = img.dim(1), h = img.dim(2), w = img.dim(3);
  std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const float v = std::clamp(img.at(0, ch, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * w + x) * c + ch] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace semiuf
