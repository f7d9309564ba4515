#pragma once

#include <array>
#include <vector>

#include "cpseg/motion.hpp"

namespace cpseg {

enum class ExtractorMode { raw_pixels, random_conv };

struct ExtractorConfig {
  ExtractorMode mode = ExtractorMode::random_conv;
  std::vector<std::int64_t> channels{8, 8, 8};
  std::uint64_t seed = 1234;
};

// Frozen feature stack standing in for a pretrained perceptual network. In
// random_conv mode each tap is the output of one seeded conv3x3 + relu layer
// applied to the centered image; in raw_pixels mode the single tap is the image.
class FeatureExtractor {
public:
  explicit FeatureExtractor(ExtractorConfig config, DType dtype = DType::f32);

  std::vector<Tensor> features(const Tensor& images) const;
  const ExtractorConfig& config() const { return config_; }
  std::vector<Tensor>& weights() { return weights_; }

private:
  ExtractorConfig config_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// Sum over scales and taps of the mean absolute feature difference. Each scale
// is a target resolution reached from the input by 2x2 averaging.
Tensor reconstruction_loss(const Tensor& prediction, const Tensor& target, const FeatureExtractor& extractor,
                           const std::vector<std::int64_t>& scales);

struct TransformRanges {
  double rotation_deg = 15.0;
  double log_scale = 0.13976194237515863;  // log(1.15); the sampled range is symmetric
  double translation = 8.0;                // pixels at the reference size below
  double shear = 0.1;
  double reference_size = 64.0;

  static TransformRanges none() { return {0, 0, 0, 0, 64.0}; }
};

// g(z) = M z + t with M = R(theta) * s * [[1, shear], [0, 1]] acting about the
// image center.
struct GeometricTransform {
  std::array<double, 4> linear{1, 0, 0, 1};  // row-major 2x2
  std::array<double, 2> offset{0, 0};

  std::array<double, 2> apply(double x, double y) const;
  GeometricTransform inverse() const;
  double det() const { return linear[0] * linear[3] - linear[1] * linear[2]; }

  static GeometricTransform identity() { return {}; }
  static GeometricTransform translation(double dx, double dy);
  static GeometricTransform compose(double rotation_rad, double log_scale, double shear, double tx, double ty,
                                    double center_x, double center_y);
};

// theta ~ U(-r, r), log s ~ U(-l, l), t ~ U(-T, T) scaled to the frame, shear ~ U(-h, h).
GeometricTransform sample_transform(Rng& rng, const TransformRanges& ranges, std::int64_t height,
                                    std::int64_t width);

// Moves the content at z to g(z): out(w) = frame(g^-1(w)), clamp-to-edge.
// One transform per batch item.
Tensor warp_frame(const Tensor& frames, const std::vector<GeometricTransform>& transforms);

struct EquivarianceTerms {
  Tensor keypoint;  // mean |p - g(p~)| in normalized coordinates (2 / size per pixel)
  Tensor jacobian;  // mean |I - A (J_g A~)^-1|
};

// `transformed` holds predictions on frames whose content satisfies
// warped(z) = frame(g(z)), i.e. warp_frame(frame, g^-1); consistent
// predictions then satisfy p = g(p~) and A = J_g A~.
EquivarianceTerms equivariance_loss(const SegmentationOutput& original, const SegmentationOutput& transformed,
                                    const std::vector<GeometricTransform>& transforms,
                                    const MotionOptions& options = {});

struct LossWeights {
  double keypoint = 10.0;
  double jacobian = 10.0;
};

struct LossBreakdown {
  Tensor total;
  double reconstruction = 0;
  double keypoint = 0;
  double jacobian = 0;
};

// L_rec + w_kp * L_eq_kp + w_A * L_eq_A. Either equivariance term may be undefined.
LossBreakdown total_loss(const Tensor& reconstruction, const EquivarianceTerms& eq, const LossWeights& weights);

}  // namespace cpseg
