#pragma once

// U-Net segmentation module. From one frame it predicts K+1 soft part masks
// (the last channel is background), K anchor keypoints and K 2x2 affine
// matrices describing each part's local motion frame.

#include <vector>

#include "cpseg/nn.hpp"

namespace cpseg {

struct SegNetConfig {
  int num_parts = 10;
  std::int64_t height = 64;
  std::int64_t width = 64;
  // Encoder block widths; the decoder mirrors them.
  std::vector<std::int64_t> channels{32, 64, 128, 256, 512};
  double head_init_std = 1e-4;

  std::int64_t head_channels() const { return 6 * num_parts + 1; }

  static SegNetConfig full(int num_parts);
  static SegNetConfig tiny(int num_parts);
};

struct SegmentationOutput {
  Tensor masks;       // Y: (N, K+1, H', W'), channel-softmax normalized
  Tensor keypoints;   // p: (N, K, 2) pixel coordinates (x, y)
  Tensor affine;      // A: (N, K, 2, 2)
  Tensor confidence;  // (N, K, H', W'), each map sums to 1
  Tensor head;        // raw (N, 6K+1, H', W') head output

  int num_parts() const { return static_cast<int>(keypoints.dim(1)); }
};

// A^k[i][j] = sum_z conf^k(z) * coeff^{4k + 2i + j}(z).
Tensor affine_head(const Tensor& coeff_maps, const Tensor& confidence);

// Splits raw head logits into the segmentation output bundle.
SegmentationOutput decode_head(const Tensor& head, int num_parts);

// Downscales (N, C, H, W) frames by repeated 2x2 averaging, which equals
// half-pixel bilinear downscaling at each factor-of-two step.
Tensor resize_down(const Tensor& frames, std::int64_t height, std::int64_t width);

class SegmentationNet {
public:
  SegmentationNet(SegNetConfig config, ParamStore& store, Rng& rng, DType dtype = DType::f32,
                  std::string prefix = "seg");

  // frames: (N, 3, H, W) in [0, 1]; resized to H' x W' internally.
  SegmentationOutput forward(const Tensor& frames, const nn::Mode& mode) const;

  const SegNetConfig& config() const { return config_; }

private:
  SegNetConfig config_;
  ParamStore* store_;
  std::string prefix_;
};

}  // namespace cpseg
