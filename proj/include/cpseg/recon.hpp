#pragma once

// Reconstruction module: an encoder-decoder generator (two down-sampling
// blocks, six residual blocks, two up-sampling blocks) whose bottleneck
// features are back-warped by the composed flow and masked by the background
// visibility map before decoding.

#include <string>
#include <vector>

#include "cpseg/motion.hpp"

namespace cpseg {

enum class Variant { naive, shift_only, affine_only, v_backprop, full };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();

struct GeneratorConfig {
  int num_parts = 10;
  // Widths at full, half and quarter (bottleneck) resolution.
  std::int64_t full_channels = 16;
  std::int64_t half_channels = 32;
  std::int64_t bottleneck_channels = 64;
  int residual_blocks = 6;

  static GeneratorConfig full(int num_parts);
  static GeneratorConfig tiny(int num_parts);
};

class Generator {
public:
  Generator(GeneratorConfig config, ParamStore& store, Rng& rng, DType dtype = DType::f32,
            std::string prefix = "gen");

  // (N, 3, H, W) -> (N, C, H/4, W/4)
  Tensor encode(const Tensor& frames, const nn::Mode& mode) const;
  // Bottleneck residual stack, up-sampling and a sigmoid output in [0, 1].
  Tensor decode(const Tensor& features, const nn::Mode& mode) const;
  // Naive variant: concatenates the target masks onto the features (C + K + 1
  // channels) and projects back to C.
  Tensor inject_masks(const Tensor& features, const Tensor& target_masks) const;

  const GeneratorConfig& config() const { return config_; }

private:
  GeneratorConfig config_;
  ParamStore* store_;
  std::string prefix_;
};

// xi' = V * W(xi, F), V broadcast over channels. Flow and mask must already
// be at the feature resolution.
Tensor deform(const Tensor& features, const Tensor& flow, const Tensor& visibility);

struct Reconstruction {
  Tensor image;       // (N, 3, H, W)
  Tensor flow;        // (N, 2, H', W'); undefined for the naive variant
  Tensor visibility;  // (N, 1, H', W'); undefined when the variant uses none
  Tensor bottleneck;  // features entering the residual stack
};

// Flow and visibility mask at segmentation resolution for a variant; the mask
// is undefined for variants without one.
std::pair<Tensor, Tensor> variant_flow(const SegmentationOutput& source, const SegmentationOutput& target,
                                       Variant variant, const MotionOptions& options);

Reconstruction reconstruct(const Generator& generator, const Tensor& source_frames,
                           const SegmentationOutput& source, const SegmentationOutput& target, Variant variant,
                           const nn::Mode& mode, const MotionOptions& options = {});

// Transfers the appearance of the segments in swap_set (0-based part indices)
// from the source frame into the target frame. Features outside the blend
// mask follow the target's own self-reconstruction path.
Tensor part_swap(const Generator& generator, const Tensor& source_frames, const Tensor& target_frames,
                 const SegmentationOutput& source, const SegmentationOutput& target,
                 const std::vector<int>& swap_set, Variant variant, const nn::Mode& mode,
                 const MotionOptions& options = {});

}  // namespace cpseg
