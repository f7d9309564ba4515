#pragma once

// Segment motion -> dense backward flow and background visibility.
//
// Flows hold absolute source-frame pixel coordinates for every target pixel,
// channel 0 = x (column), channel 1 = y (row), pixel centers at integers.

#include <utility>

#include "cpseg/segnet.hpp"

namespace cpseg {

struct MotionOptions {
  // Added to A_T before inversion.
  double ridge = 0.0;
  // Lower bound on |det| of the matrix being inverted.
  double det_floor = 1e-6;
};

struct SegmentMotion {
  Tensor source_keypoints;  // p_S (N, K, 2)
  Tensor source_affine;     // A_S (N, K, 2, 2)
  Tensor target_keypoints;  // p_T (N, K, 2)
  Tensor target_affine;     // A_T (N, K, 2, 2)

  static SegmentMotion from(const SegmentationOutput& source, const SegmentationOutput& target);
  // Same anchors, identity matrices: the translation-only motion model.
  SegmentMotion shift_only() const;
};

// F^k(z) = p_S^k + A_S^k (A_T^k)^-1 (z - p_T^k) for every k: (N, K, 2, H, W).
Tensor part_flows(const SegmentMotion& motion, std::int64_t height, std::int64_t width,
                  const MotionOptions& options = {});

// Sum_k Y_T^k F^k + Y_T^{K+1} z: (N, 2, H, W).
Tensor compose_flow(const Tensor& target_masks, const Tensor& flows);

// V = 1 - Y_T^{K+1} * sum_{k<=K} Y_S^k, (N, 1, H, W). With stop_gradient the
// target background channel is detached; the source term always keeps its gradient.
Tensor visibility_mask(const Tensor& source_masks, const Tensor& target_masks, bool stop_gradient);

// Resamples flow and mask by factors of two to (height, width). The flow is
// resampled as a displacement and rescaled, so it stays a valid absolute
// coordinate field at the new resolution.
std::pair<Tensor, Tensor> resample_flow_and_mask(const Tensor& flow, const Tensor& mask, std::int64_t height,
                                                 std::int64_t width);

// Flow-only variant of the above.
Tensor resample_flow(const Tensor& flow, std::int64_t height, std::int64_t width);

}  // namespace cpseg
