#include "cpseg/losses.hpp"

#include <cmath>
#include <numbers>

#include "cpseg/params.hpp"

namespace cpseg {

FeatureExtractor::FeatureExtractor(ExtractorConfig config, DType dtype) : config_(std::move(config)) {
  if (config_.mode == ExtractorMode::raw_pixels) return;
  Rng rng(config_.seed);
  std::int64_t in = 3;
  for (auto out : config_.channels) {
    weights_.push_back(he_normal(rng, {out, in, 3, 3}, dtype));
    biases_.push_back(Tensor::zeros({out}, dtype));
    in = out;
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& images) const {
  if (config_.mode == ExtractorMode::raw_pixels) return {images};
  std::vector<Tensor> taps;
  Tensor x = add_scalar(images, -0.5);
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    x = relu(conv2d(x, weights_[i], biases_[i], 1, 1));
    taps.push_back(x);
  }
  return taps;
}

Tensor reconstruction_loss(const Tensor& prediction, const Tensor& target, const FeatureExtractor& extractor,
                           const std::vector<std::int64_t>& scales) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("reconstruction_loss: prediction " + to_string(prediction.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  if (scales.empty()) throw std::invalid_argument("reconstruction_loss: no scales");
  Tensor total;
  for (auto s : scales) {
    if (prediction.dim(2) % s != 0) {
      throw ShapeError("reconstruction_loss: scale " + std::to_string(s) + " does not divide frame size");
    }
    Tensor p = resize_down(prediction, s, s * prediction.dim(3) / prediction.dim(2));
    Tensor t = resize_down(target, s, s * target.dim(3) / target.dim(2));
    auto fp = extractor.features(p);
    std::vector<Tensor> ft;
    {
      NoGradGuard guard;
      ft = extractor.features(t);
    }
    for (std::size_t i = 0; i < fp.size(); ++i) {
      Tensor term = mean(abs(sub(fp[i], ft[i])));
      total = total.defined() ? add(total, term) : term;
    }
  }
  return total;
}

std::array<double, 2> GeometricTransform::apply(double x, double y) const {
  return {linear[0] * x + linear[1] * y + offset[0], linear[2] * x + linear[3] * y + offset[1]};
}

GeometricTransform GeometricTransform::inverse() const {
  const double d = det();
  GeometricTransform inv;
  inv.linear = {linear[3] / d, -linear[1] / d, -linear[2] / d, linear[0] / d};
  inv.offset = {-(inv.linear[0] * offset[0] + inv.linear[1] * offset[1]),
                -(inv.linear[2] * offset[0] + inv.linear[3] * offset[1])};
  return inv;
}

GeometricTransform GeometricTransform::translation(double dx, double dy) {
  GeometricTransform g;
  g.offset = {dx, dy};
  return g;
}

GeometricTransform GeometricTransform::compose(double rotation_rad, double log_scale, double shear, double tx,
                                               double ty, double center_x, double center_y) {
  const double s = std::exp(log_scale);
  const double c = std::cos(rotation_rad), sn = std::sin(rotation_rad);
  // R * s * [[1, shear], [0, 1]]
  GeometricTransform g;
  g.linear = {s * c, s * (c * shear - sn), s * sn, s * (sn * shear + c)};
  // g(z) = M (z - center) + center + t
  g.offset = {center_x + tx - (g.linear[0] * center_x + g.linear[1] * center_y),
              center_y + ty - (g.linear[2] * center_x + g.linear[3] * center_y)};
  return g;
}

GeometricTransform sample_transform(Rng& rng, const TransformRanges& r, std::int64_t height, std::int64_t width) {
  const double theta = rng.uniform(-r.rotation_deg, r.rotation_deg) * std::numbers::pi / 180.0;
  const double log_s = rng.uniform(-r.log_scale, r.log_scale);
  const double unit = static_cast<double>(std::max(height, width)) / r.reference_size;
  const double tx = rng.uniform(-r.translation, r.translation) * unit;
  const double ty = rng.uniform(-r.translation, r.translation) * unit;
  const double shear = rng.uniform(-r.shear, r.shear);
  return GeometricTransform::compose(theta, log_s, shear, tx, ty, 0.5 * static_cast<double>(width - 1),
                                     0.5 * static_cast<double>(height - 1));
}

Tensor warp_frame(const Tensor& frames, const std::vector<GeometricTransform>& transforms) {
  const std::int64_t n = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
  if (static_cast<std::int64_t>(transforms.size()) != n) {
    throw ShapeError("warp_frame: need one transform per batch item");
  }
  Buffer grid(frames.dtype(), static_cast<std::size_t>(n * 2 * h * w));
  for (std::int64_t b = 0; b < n; ++b) {
    const GeometricTransform inv = transforms[static_cast<std::size_t>(b)].inverse();
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const auto src = inv.apply(static_cast<double>(x), static_cast<double>(y));
        grid.set(static_cast<std::size_t>(((b * 2) * h + y) * w + x), src[0]);
        grid.set(static_cast<std::size_t>(((b * 2 + 1) * h + y) * w + x), src[1]);
      }
    }
  }
  return grid_sample_bilinear(frames, Tensor::from_buffer({n, 2, h, w}, std::move(grid)));
}

EquivarianceTerms equivariance_loss(const SegmentationOutput& original, const SegmentationOutput& transformed,
                                    const std::vector<GeometricTransform>& transforms,
                                    const MotionOptions& options) {
  const Tensor& p = original.keypoints;
  const std::int64_t n = p.dim(0), k = p.dim(1);
  if (static_cast<std::int64_t>(transforms.size()) != n) {
    throw ShapeError("equivariance_loss: need one transform per batch item");
  }
  const DType dt = p.dtype();
  Buffer lin(dt, static_cast<std::size_t>(n * k * 4));
  Buffer off(dt, static_cast<std::size_t>(n * k * 2));
  for (std::int64_t b = 0; b < n; ++b) {
    const auto& g = transforms[static_cast<std::size_t>(b)];
    for (std::int64_t j = 0; j < k; ++j) {
      for (std::size_t e = 0; e < 4; ++e) lin.set(static_cast<std::size_t>((b * k + j) * 4) + e, g.linear[e]);
      for (std::size_t e = 0; e < 2; ++e) off.set(static_cast<std::size_t>((b * k + j) * 2) + e, g.offset[e]);
    }
  }
  Tensor jac = Tensor::from_buffer({n, k, 2, 2}, std::move(lin));
  Tensor offset = Tensor::from_buffer({n, k, 2}, std::move(off));

  const double h = static_cast<double>(original.masks.dim(2));
  const double w = static_cast<double>(original.masks.dim(3));
  Tensor mapped = add(reshape(matmul(jac, reshape(transformed.keypoints, {n, k, 2, 1})), {n, k, 2}), offset);
  Tensor unit = Tensor::from_buffer({1, 1, 2}, dt == DType::f32 ? Buffer(std::vector<float>{float(2 / w), float(2 / h)})
                                                                : Buffer(std::vector<double>{2 / w, 2 / h}));
  EquivarianceTerms terms;
  terms.keypoint = mean(abs(mul(sub(p, mapped), unit)));

  Tensor predicted = matmul(jac, transformed.affine);
  // I - A P^-1 written as (P - A) P^-1 so that consistent predictions give exactly zero
  Tensor residual = matmul(sub(predicted, original.affine), inverse2x2(predicted, options.ridge, options.det_floor));
  terms.jacobian = mean(abs(residual));
  return terms;
}

LossBreakdown total_loss(const Tensor& reconstruction, const EquivarianceTerms& eq, const LossWeights& weights) {
  LossBreakdown out;
  out.total = reconstruction;
  out.reconstruction = reconstruction.item();
  if (eq.keypoint.defined()) {
    out.keypoint = eq.keypoint.item();
    out.total = add(out.total, scale(eq.keypoint, weights.keypoint));
  }
  if (eq.jacobian.defined()) {
    out.jacobian = eq.jacobian.item();
    out.total = add(out.total, scale(eq.jacobian, weights.jacobian));
  }
  return out;
}

}  // namespace cpseg
