#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "multipod/core.hpp"

namespace multipod {

/// Real-valued raster, interleaved row-major (row, column, channel).
/// Intensities live in the canonical range [0, 255].
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> data;

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 0 || w < 0 || c < 1) throw Error("invalid image dimensions");
  }

  bool empty() const { return height == 0 || width == 0; }
  std::size_t size() const { return data.size(); }

  float& at(int r, int c, int ch = 0) {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  float at(int r, int c, int ch = 0) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }

  bool same_shape(const ImageBuffer& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const ImageBuffer& a, const ImageBuffer& b) {
    return a.same_shape(b) && a.data == b.data;
  }
};

inline std::string shape_string(const ImageBuffer& img) {
  return std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
         std::to_string(img.channels);
}

inline float mean_intensity(const ImageBuffer& img) {
  if (img.data.empty()) return 0.0f;
  double s = 0.0;
  for (float v : img.data) s += v;
  return static_cast<float>(s / static_cast<double>(img.data.size()));
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

/// Reads any PNG and converts it to a single-channel 8-bit-valued buffer.
inline ImageBuffer read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw Error("cannot read image '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error("cannot decode image '" + path.string() + "': " + msg);
  }
  ImageBuffer out(static_cast<int>(image.height), static_cast<int>(image.width), 1);
  std::transform(bytes.begin(), bytes.end(), out.data.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b); });
  return out;
}

/// Writes channel `channel` of `img` as an 8-bit grayscale PNG (rounded,
/// clamped to [0, 255]). Output bytes depend only on the pixel values.
inline void write_png(const std::filesystem::path& path, const ImageBuffer& img,
                      int channel = 0) {
  if (img.empty()) throw Error("cannot write empty image '" + path.string() + "'");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(img.height) * img.width);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      bytes[static_cast<std::size_t>(r) * img.width + c] = to_byte(img.at(r, c, channel));
    }
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0,
                               nullptr)) {
    throw Error("cannot write image '" + path.string() + "': " + image.message);
  }
}

}  // namespace multipod
