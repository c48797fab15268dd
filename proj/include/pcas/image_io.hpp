#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pcas/tensor.hpp"

namespace pcas {

// Per-pixel class-index map. 0 is background, 255 is the ignore index
// (excluded from losses and metrics).
struct SemanticMask {
  static constexpr uint8_t kBackground = 0;
  static constexpr uint8_t kIgnore = 255;

  int h = 0, w = 0;
  std::vector<uint8_t> data;

  SemanticMask() = default;
  SemanticMask(int height, int width, uint8_t fill = kBackground)
      : h(height), w(width), data(static_cast<size_t>(height) * width, fill) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
};

// Images are 3xHxW tensors with values in [0,1].

// Binary portable pixmap (P6), 8-bit.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

// Binary portable graymap (P5), 8-bit; stores class indices verbatim.
void write_pgm(const std::filesystem::path& path, const SemanticMask& mask);
SemanticMask read_pgm(const std::filesystem::path& path);

// 16-bit PCM mono little-endian WAV.
void write_wav(const std::filesystem::path& path, const std::vector<double>& samples,
               int sample_rate);
std::vector<double> read_wav(const std::filesystem::path& path, int* sample_rate = nullptr);

// Bilinear resample (align_corners=false), 3xHxW -> 3 x out_h x out_w.
Tensor bilinear_resize(const Tensor& image, int out_h, int out_w);

// Pixel-space crop; box must lie inside the image.
Tensor crop_image(const Tensor& image, int x0, int y0, int w, int h);

}  // namespace pcas
