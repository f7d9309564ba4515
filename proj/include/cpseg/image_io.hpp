#pragma once

// 8-bit PNG input/output and visualizations (flow color wheel, mask palette).

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "cpseg/tensor.hpp"

namespace cpseg {

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Image8 {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int channels = 3;           // 1 (gray) or 3 (rgb)
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

void write_png(const std::filesystem::path& path, const Image8& image);
// Always returns 3 channels; gray and alpha inputs are converted.
Image8 read_png(const std::filesystem::path& path);

// (3, H, W) in [0, 1] -> interleaved RGB with round-to-nearest quantization.
Image8 to_image8(const Tensor& chw);
// Interleaved RGB -> (1, 3, H, W) in [0, 1].
Tensor from_image8(const Image8& image, DType dtype = DType::f32);

inline std::uint8_t quantize(double v) {
  const double c = v < 0 ? 0 : (v > 1 ? 1 : v);
  return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}

// Bilinear resize of (N, C, H, W) with pixel-center alignment.
Tensor resize_bilinear(const Tensor& images, std::int64_t height, std::int64_t width);

// Displacement color wheel: hue = direction, saturation = magnitude / max_magnitude
// (the largest displacement when max_magnitude <= 0). flow is (2, H, W) absolute coordinates.
Image8 flow_to_color(const Tensor& flow, double max_magnitude = 0);
// (H, W) or (1, H, W) values in [0, 1] -> grayscale.
Image8 gray_image(const Tensor& values);

// Fixed palette; the last entry is used for the background channel.
std::array<std::uint8_t, 3> part_color(int part, int num_parts);
// Hard argmax of (K+1, H, W) soft masks rendered with the palette.
Image8 mask_image(const Tensor& masks);
// Frame blended with the palette colors of the foreground parts, weighted by mask.
Image8 mask_overlay(const Tensor& frame, const Tensor& masks, double alpha = 0.5);

}  // namespace cpseg
