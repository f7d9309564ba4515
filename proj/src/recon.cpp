#include "cpseg/recon.hpp"

#include <algorithm>
#include <stdexcept>

namespace cpseg {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::naive: return "naive";
    case Variant::shift_only: return "shift-only";
    case Variant::affine_only: return "affine-only";
    case Variant::v_backprop: return "v-backprop";
    case Variant::full: return "full";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected naive, shift-only, affine-only, v-backprop or full)");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::naive, Variant::shift_only, Variant::affine_only,
                                      Variant::v_backprop, Variant::full};
  return v;
}

GeneratorConfig GeneratorConfig::full(int num_parts) {
  GeneratorConfig c;
  c.num_parts = num_parts;
  return c;
}

GeneratorConfig GeneratorConfig::tiny(int num_parts) {
  GeneratorConfig c;
  c.num_parts = num_parts;
  c.full_channels = 8;
  c.half_channels = 16;
  c.bottleneck_channels = 32;
  return c;
}

Generator::Generator(GeneratorConfig config, ParamStore& store, Rng& rng, DType dtype, std::string prefix)
    : config_(std::move(config)), store_(&store), prefix_(std::move(prefix)) {
  const auto c0 = config_.full_channels, c1 = config_.half_channels, cb = config_.bottleneck_channels;
  nn::add_conv_bn(store, rng, prefix_ + ".in", 3, c0, 3, dtype);
  nn::add_conv_bn(store, rng, prefix_ + ".down0", c0, c1, 3, dtype);
  nn::add_conv_bn(store, rng, prefix_ + ".down1", c1, cb, 3, dtype);
  nn::add_conv(store, rng, prefix_ + ".inject", cb + config_.num_parts + 1, cb, 1, dtype);
  for (int r = 0; r < config_.residual_blocks; ++r) {
    const std::string name = prefix_ + ".res" + std::to_string(r);
    nn::add_conv_bn(store, rng, name + ".a", cb, cb, 3, dtype);
    nn::add_conv_bn(store, rng, name + ".b", cb, cb, 3, dtype);
  }
  nn::add_conv_bn(store, rng, prefix_ + ".up0", cb, c1, 3, dtype);
  nn::add_conv_bn(store, rng, prefix_ + ".up1", c1, c0, 3, dtype);
  nn::add_conv(store, rng, prefix_ + ".out", c0, 3, 3, dtype);
}

Tensor Generator::encode(const Tensor& frames, const nn::Mode& mode) const {
  Tensor x = nn::conv_bn_relu(*store_, prefix_ + ".in", frames, mode);
  x = nn::conv_bn_relu(*store_, prefix_ + ".down0", x, mode, 2);
  return nn::conv_bn_relu(*store_, prefix_ + ".down1", x, mode, 2);
}

Tensor Generator::inject_masks(const Tensor& features, const Tensor& target_masks) const {
  Tensor masks = resize_down(target_masks, features.dim(2), features.dim(3));
  return nn::conv(*store_, prefix_ + ".inject", concat({features, masks}, 1));
}

Tensor Generator::decode(const Tensor& features, const nn::Mode& mode) const {
  Tensor x = features;
  for (int r = 0; r < config_.residual_blocks; ++r) {
    const std::string name = prefix_ + ".res" + std::to_string(r);
    Tensor y = nn::conv_bn_relu(*store_, name + ".a", x, mode);
    y = nn::bn(*store_, name + ".b.bn", nn::conv(*store_, name + ".b.conv", y), mode);
    x = add(x, y);
  }
  x = nn::conv_bn_relu(*store_, prefix_ + ".up0", upsample2(x, UpsampleMode::nearest), mode);
  x = nn::conv_bn_relu(*store_, prefix_ + ".up1", upsample2(x, UpsampleMode::nearest), mode);
  return sigmoid(nn::conv(*store_, prefix_ + ".out", x));
}

Tensor deform(const Tensor& features, const Tensor& flow, const Tensor& visibility) {
  const auto h = features.dim(2), w = features.dim(3);
  if (flow.dim(2) != h || flow.dim(3) != w) {
    throw ShapeError("deform: flow resolution " + to_string(flow.shape()) + " does not match features " +
                     to_string(features.shape()));
  }
  Tensor warped = grid_sample_bilinear(features, flow);
  if (!visibility.defined()) return warped;
  if (visibility.dim(2) != h || visibility.dim(3) != w) {
    throw ShapeError("deform: visibility resolution " + to_string(visibility.shape()) +
                     " does not match features " + to_string(features.shape()));
  }
  return mul(warped, visibility);
}

std::pair<Tensor, Tensor> variant_flow(const SegmentationOutput& source, const SegmentationOutput& target,
                                       Variant variant, const MotionOptions& options) {
  if (variant == Variant::naive) throw std::invalid_argument("the naive variant has no flow");
  const auto h = target.masks.dim(2), w = target.masks.dim(3);
  SegmentMotion motion = SegmentMotion::from(source, target);
  if (variant == Variant::shift_only) motion = motion.shift_only();
  Tensor flow = compose_flow(target.masks, part_flows(motion, h, w, options));
  Tensor visibility;
  if (variant == Variant::v_backprop || variant == Variant::full) {
    visibility = visibility_mask(source.masks, target.masks, variant == Variant::full);
  }
  return {flow, visibility};
}

namespace {

// Warps (and masks) features to the target pose at the feature resolution.
Tensor deform_to_target(const Tensor& features, const Tensor& flow, const Tensor& visibility) {
  const auto h = features.dim(2), w = features.dim(3);
  Tensor f = resample_flow(flow, h, w);
  Tensor v;
  if (visibility.defined()) v = resample_flow_and_mask(flow, visibility, h, w).second;
  return deform(features, f, v);
}

}  // namespace

Reconstruction reconstruct(const Generator& generator, const Tensor& source_frames,
                           const SegmentationOutput& source, const SegmentationOutput& target, Variant variant,
                           const nn::Mode& mode, const MotionOptions& options) {
  Reconstruction out;
  Tensor features = generator.encode(source_frames, mode);
  if (variant == Variant::naive) {
    out.bottleneck = generator.inject_masks(features, target.masks);
  } else {
    auto [flow, visibility] = variant_flow(source, target, variant, options);
    out.flow = flow;
    out.visibility = visibility;
    out.bottleneck = deform_to_target(features, flow, visibility);
  }
  out.image = generator.decode(out.bottleneck, mode);
  return out;
}

Tensor part_swap(const Generator& generator, const Tensor& source_frames, const Tensor& target_frames,
                 const SegmentationOutput& source, const SegmentationOutput& target,
                 const std::vector<int>& swap_set, Variant variant, const nn::Mode& mode,
                 const MotionOptions& options) {
  if (variant == Variant::naive) throw std::invalid_argument("part swap needs a flow-based variant");
  const int k = target.num_parts();
  for (int part : swap_set) {
    if (part < 0 || part >= k) {
      throw std::out_of_range("swap segment " + std::to_string(part) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  // Target features along its own reconstruction path.
  Tensor target_features = generator.encode(target_frames, mode);
  auto [self_flow, self_vis] = variant_flow(target, target, variant, options);
  Tensor target_path = deform_to_target(target_features, self_flow, self_vis);
  if (swap_set.empty()) return generator.decode(target_path, mode);

  auto [flow, visibility] = variant_flow(source, target, variant, options);
  Tensor source_path = deform_to_target(generator.encode(source_frames, mode), flow, visibility);

  std::vector<int> parts = swap_set;
  std::sort(parts.begin(), parts.end());
  parts.erase(std::unique(parts.begin(), parts.end()), parts.end());
  Tensor blend;
  for (int part : parts) {
    Tensor m = narrow(target.masks, 1, part, 1);
    blend = blend.defined() ? add(blend, m) : m;
  }
  blend = resize_down(blend, target_path.dim(2), target_path.dim(3));
  Tensor mixed = add(mul(blend, source_path), mul(add_scalar(neg(blend), 1.0), target_path));
  return generator.decode(mixed, mode);
}

}  // namespace cpseg
