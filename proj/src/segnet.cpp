#include "cpseg/segnet.hpp"

#include <cmath>

namespace cpseg {

SegNetConfig SegNetConfig::full(int num_parts) {
  SegNetConfig c;
  c.num_parts = num_parts;
  return c;
}

SegNetConfig SegNetConfig::tiny(int num_parts) {
  SegNetConfig c;
  c.num_parts = num_parts;
  c.channels = {8, 16, 32, 64, 64};
  return c;
}

Tensor affine_head(const Tensor& coeff_maps, const Tensor& confidence) {
  const std::int64_t n = confidence.dim(0), k = confidence.dim(1);
  const std::int64_t hw = confidence.dim(2) * confidence.dim(3);
  if (coeff_maps.ndim() != 4 || coeff_maps.dim(0) != n || coeff_maps.dim(1) != 4 * k ||
      coeff_maps.dim(2) * coeff_maps.dim(3) != hw) {
    throw ShapeError("affine_head: coefficient maps " + to_string(coeff_maps.shape()) +
                     " incompatible with confidence " + to_string(confidence.shape()));
  }
  Tensor weighted = matmul(reshape(coeff_maps, {n, k, 4, hw}), reshape(confidence, {n, k, hw, 1}));
  return reshape(weighted, {n, k, 2, 2});
}

SegmentationOutput decode_head(const Tensor& head, int num_parts) {
  const std::int64_t k = num_parts;
  if (head.ndim() != 4 || head.dim(1) != 6 * k + 1) {
    throw ShapeError("decode_head: expected 6K+1 = " + std::to_string(6 * k + 1) + " channels, got shape " +
                     to_string(head.shape()));
  }
  SegmentationOutput out;
  out.head = head;
  out.masks = channel_softmax(narrow(head, 1, 0, k + 1));
  SoftArgmax kp = soft_argmax2d(narrow(head, 1, k + 1, k));
  out.keypoints = kp.coords;
  out.confidence = kp.conf;
  out.affine = affine_head(narrow(head, 1, 2 * k + 1, 4 * k), kp.conf);
  return out;
}

Tensor resize_down(const Tensor& frames, std::int64_t height, std::int64_t width) {
  Tensor x = frames;
  while (x.dim(2) >= 2 * height && x.dim(3) >= 2 * width) x = avg_pool2(x);
  if (x.dim(2) != height || x.dim(3) != width) {
    throw ShapeError("resize_down: cannot reach " + std::to_string(height) + "x" + std::to_string(width) +
                     " from " + to_string(frames.shape()) + " by factor-of-two steps");
  }
  return x;
}

SegmentationNet::SegmentationNet(SegNetConfig config, ParamStore& store, Rng& rng, DType dtype, std::string prefix)
    : config_(std::move(config)), store_(&store), prefix_(std::move(prefix)) {
  const auto& ch = config_.channels;
  const std::size_t depth = ch.size();
  std::int64_t in = 3;
  for (std::size_t i = 0; i < depth; ++i) {
    nn::add_conv_bn(store, rng, prefix_ + ".down" + std::to_string(i), in, ch[i], 3, dtype);
    in = ch[i];
  }
  // Decoder block i brings resolution from level i+1 back to level i.
  for (std::size_t i = depth; i-- > 0;) {
    const std::int64_t dec_in = (i + 1 == depth) ? ch[i] : 2 * ch[i];
    const std::int64_t dec_out = i == 0 ? ch[0] : ch[i - 1];
    nn::add_conv_bn(store, rng, prefix_ + ".up" + std::to_string(i), dec_in, dec_out, 3, dtype);
  }
  const std::int64_t k = config_.num_parts;
  const std::int64_t final_features = ch[0] + 3;
  store.add(prefix_ + ".head.w",
            normal_tensor(rng, {config_.head_channels(), final_features, 3, 3}, config_.head_init_std, dtype));
  // Affine coefficient maps start at the identity so A^k begins invertible.
  Tensor bias = Tensor::zeros({config_.head_channels()}, dtype);
  for (std::int64_t part = 0; part < k; ++part) {
    const auto base = static_cast<std::size_t>(2 * k + 1 + 4 * part);
    bias.mutable_buffer().set(base, 1.0);
    bias.mutable_buffer().set(base + 3, 1.0);
  }
  store.add(prefix_ + ".head.b", bias);
}

SegmentationOutput SegmentationNet::forward(const Tensor& frames, const nn::Mode& mode) const {
  if (frames.ndim() != 4 || frames.dim(1) != 3) {
    throw ShapeError("segmentation forward expects (N, 3, H, W) frames, got " + to_string(frames.shape()));
  }
  check_finite(frames.buffer(), "segmentation input");
  Tensor x = resize_down(frames, config_.height, config_.width);
  const std::size_t depth = config_.channels.size();

  std::vector<Tensor> skips{x};
  Tensor h = x;
  for (std::size_t i = 0; i < depth; ++i) {
    h = avg_pool2(nn::conv_bn_relu(*store_, prefix_ + ".down" + std::to_string(i), h, mode));
    skips.push_back(h);
  }
  // skips[i] has the resolution of decoder output i.
  for (std::size_t i = depth; i-- > 0;) {
    Tensor up = upsample2(h, UpsampleMode::nearest);
    up = nn::conv_bn_relu(*store_, prefix_ + ".up" + std::to_string(i), up, mode);
    h = concat({up, skips[i]}, 1);
  }
  Tensor head = conv2d(h, store_->get(prefix_ + ".head.w"), store_->get(prefix_ + ".head.b"), 1, 1);
  return decode_head(head, config_.num_parts);
}

}  // namespace cpseg
