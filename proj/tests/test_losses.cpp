#include <doctest.h>

#include <numbers>

#include "cpseg/losses.hpp"
#include "helpers.hpp"

using namespace cpseg;

namespace {

ExtractorConfig raw() {
  ExtractorConfig c;
  c.mode = ExtractorMode::raw_pixels;
  return c;
}

SegmentationOutput seg(std::int64_t size, std::vector<double> kp, std::vector<double> aff) {
  SegmentationOutput s;
  const auto k = static_cast<std::int64_t>(kp.size() / 2);
  s.masks = Tensor::full({1, k + 1, size, size}, 1.0 / double(k + 1), DType::f64);
  s.keypoints = Tensor::from({1, k, 2}, kp);
  s.affine = Tensor::from({1, k, 2, 2}, aff);
  return s;
}

}  // namespace

TEST_CASE("reconstruction loss") {
  Rng rng(1);
  Tensor a = testing::uniform(rng, {2, 3, 4, 4}, 0, 1), b = testing::uniform(rng, {2, 3, 4, 4}, 0, 1);
  SUBCASE("identical images give zero") {
    FeatureExtractor conv_fx(ExtractorConfig{}, DType::f64);
    CHECK(reconstruction_loss(a, a, conv_fx, {4, 2}).item() == 0.0);
  }
  SUBCASE("raw-pixel pyramid oracle") {
    FeatureExtractor fx(raw(), DType::f64);
    double fine = 0, coarse = 0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < 4; ++y)
          for (std::int64_t x = 0; x < 4; ++x) fine += std::abs(a.at({n, c, y, x}) - b.at({n, c, y, x}));
        for (std::int64_t y = 0; y < 2; ++y)
          for (std::int64_t x = 0; x < 2; ++x) {
            double d = 0;
            for (std::int64_t dy = 0; dy < 2; ++dy)
              for (std::int64_t dx = 0; dx < 2; ++dx)
                d += a.at({n, c, 2 * y + dy, 2 * x + dx}) - b.at({n, c, 2 * y + dy, 2 * x + dx});
            coarse += std::abs(d / 4);
          }
      }
    const double expect = fine / 96 + coarse / 24;
    CHECK(std::abs(reconstruction_loss(a, b, fx, {4, 2}).item() - expect) < 1e-12);
    CHECK_THROWS_AS(reconstruction_loss(a, b, fx, {3}), ShapeError);
  }
  SUBCASE("the extractor is frozen") {
    FeatureExtractor fx(ExtractorConfig{}, DType::f64);
    std::vector<Tensor> before;
    for (auto& w : fx.weights()) before.push_back(w.clone());
    Tensor p = a.clone();
    p.set_requires_grad();
    reconstruction_loss(p, b, fx, {4, 2}).backward();
    CHECK(testing::grad_norm(p) > 0);
    for (std::size_t i = 0; i < before.size(); ++i) {
      CHECK(!fx.weights()[i].requires_grad());
      CHECK(testing::bitwise_equal(before[i], fx.weights()[i]));
    }
  }
}

TEST_CASE("sample_transform") {
  Rng rng(2);
  SUBCASE("zero ranges give the identity") {
    for (int i = 0; i < 10; ++i) {
      GeometricTransform g = sample_transform(rng, TransformRanges::none(), 64, 64);
      CHECK(g.linear == GeometricTransform::identity().linear);
      CHECK(g.offset == GeometricTransform::identity().offset);
    }
  }
  SUBCASE("seeded draws repeat") {
    Rng r1(9), r2(9);
    for (int i = 0; i < 20; ++i) {
      auto g1 = sample_transform(r1, {}, 64, 64), g2 = sample_transform(r2, {}, 64, 64);
      CHECK(g1.linear == g2.linear);
      CHECK(g1.offset == g2.offset);
    }
  }
  SUBCASE("rotation angles are uniform on the configured range") {
    TransformRanges r = TransformRanges::none();
    r.rotation_deg = 15;
    const int n = 10000;
    double m1 = 0, m2 = 0, lo = 1e9, hi = -1e9;
    for (int i = 0; i < n; ++i) {
      auto g = sample_transform(rng, r, 64, 64);
      CHECK(std::abs(g.det() - 1) < 1e-12);
      const double deg = std::atan2(g.linear[2], g.linear[0]) * 180 / std::numbers::pi;
      m1 += deg;
      m2 += deg * deg;
      lo = std::min(lo, deg);
      hi = std::max(hi, deg);
    }
    m1 /= n;
    m2 /= n;
    CHECK(std::abs(m1) < 0.3);                     // sd of the mean is 15 / sqrt(3n) = 0.087
    CHECK(std::abs(m2 / (225.0 / 3) - 1) < 0.05);  // variance of U(-15, 15)
    CHECK(lo >= -15);
    CHECK(hi <= 15);
    CHECK(lo < -14.5);
    CHECK(hi > 14.5);
  }
  SUBCASE("translations scale with the frame and keep the center's displacement in range") {
    TransformRanges r = TransformRanges::none();
    r.translation = 8;
    double hi = 0;
    for (int i = 0; i < 2000; ++i) {
      auto g = sample_transform(rng, r, 128, 128);
      auto c = g.apply(63.5, 63.5);
      hi = std::max({hi, std::abs(c[0] - 63.5), std::abs(c[1] - 63.5)});
    }
    CHECK(hi <= 16);
    CHECK(hi > 15);
  }
  SUBCASE("inverse composes to the identity") {
    for (int i = 0; i < 20; ++i) {
      auto g = sample_transform(rng, {}, 64, 64);
      auto z = g.inverse().apply(g.apply(12.5, -3.0)[0], g.apply(12.5, -3.0)[1]);
      CHECK(std::abs(z[0] - 12.5) < 1e-9);
      CHECK(std::abs(z[1] + 3.0) < 1e-9);
    }
  }
}

TEST_CASE("warp_frame") {
  Rng rng(3);
  Tensor frames = testing::uniform(rng, {2, 3, 16, 16}, 0, 1);
  SUBCASE("identity") {
    Tensor out = warp_frame(frames, {GeometricTransform::identity(), GeometricTransform::identity()});
    CHECK(testing::max_abs_diff(out, frames) < 1e-12);
  }
  SUBCASE("a delta moves by the translation") {
    Tensor delta = Tensor::zeros({1, 1, 16, 16}, DType::f64);
    delta.mutable_data<double>()[3 * 16 + 4] = 1.0;
    Tensor out = warp_frame(delta, {GeometricTransform::translation(5, 2)});
    for (std::int64_t y = 0; y < 16; ++y)
      for (std::int64_t x = 0; x < 16; ++x) CHECK(out.at({0, 0, y, x}) == ((y == 5 && x == 9) ? 1.0 : 0.0));
  }
  SUBCASE("a constant frame stays constant") {
    Tensor c = Tensor::full({1, 3, 16, 16}, 0.3, DType::f64);
    for (double v : warp_frame(c, {sample_transform(rng, {}, 16, 16)}).to_vector()) CHECK(std::abs(v - 0.3) < 1e-12);
  }
  SUBCASE("one transform per item") {
    CHECK_THROWS(warp_frame(frames, {GeometricTransform::identity()}));
  }
}

TEST_CASE("equivariance loss") {
  SUBCASE("identity transform with self-consistent predictions gives exactly zero") {
    Rng rng(4);
    SegmentationOutput s = seg(32, {3.5, 7.25, 20, 11}, {1.2, 0.3, -0.1, 0.9, 0.7, 0, 0.2, 1.1});
    auto eq = equivariance_loss(s, s, {GeometricTransform::identity()});
    CHECK(eq.keypoint.item() == 0.0);
    CHECK(eq.jacobian.item() == 0.0);
  }
  SUBCASE("consistent predictions under a general transform") {
    auto g = GeometricTransform::compose(0.2, 0.1, 0.05, 2, -1, 31.5, 31.5);
    auto q = g.apply(10, 20);
    // A = J_g * A~
    const double at[4] = {1.1, 0.2, -0.3, 0.8};
    const auto& m = g.linear;
    std::vector<double> a{m[0] * at[0] + m[1] * at[2], m[0] * at[1] + m[1] * at[3], m[2] * at[0] + m[3] * at[2],
                          m[2] * at[1] + m[3] * at[3]};
    auto eq = equivariance_loss(seg(64, {q[0], q[1]}, a), seg(64, {10, 20}, {at[0], at[1], at[2], at[3]}), {g});
    CHECK(eq.keypoint.item() < 1e-12);
    CHECK(eq.jacobian.item() < 1e-12);
  }
  SUBCASE("hand-computed values") {
    auto eq = equivariance_loss(seg(64, {10, 20}, {1, 0, 0, 1}), seg(64, {7, 18}, {2, 0, 0, 2}),
                                {GeometricTransform::translation(2, 1)});
    // Keypoint residual of one pixel on each axis, in units of 2/64.
    CHECK(std::abs(eq.keypoint.item() - 1.0 / 32) < 1e-12);
    // I - I * (2I)^-1 = I / 2
    CHECK(std::abs(eq.jacobian.item() - 0.25) < 1e-12);
  }
}

TEST_CASE("total loss decomposition") {
  Tensor rec = Tensor::scalar(0.5, DType::f64);
  EquivarianceTerms eq{Tensor::scalar(0.25, DType::f64), Tensor::scalar(0.125, DType::f64)};
  LossBreakdown b = total_loss(rec, eq, {});
  CHECK(b.total.item() == 0.5 + 10 * 0.25 + 10 * 0.125);
  CHECK(b.reconstruction == 0.5);
  CHECK(b.keypoint == 0.25);
  CHECK(b.jacobian == 0.125);
  LossBreakdown w = total_loss(rec, eq, {2, 0});
  CHECK(w.total.item() == 1.0);
  LossBreakdown only = total_loss(rec, {}, {});
  CHECK(only.total.item() == 0.5);
}
