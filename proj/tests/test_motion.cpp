#include <doctest.h>

#include <numbers>

#include "cpseg/motion.hpp"
#include "cpseg/synth.hpp"
#include "helpers.hpp"

using namespace cpseg;

namespace {

SegmentMotion single(std::vector<double> ps, std::vector<double> as, std::vector<double> pt, std::vector<double> at) {
  return {Tensor::from({1, 1, 2}, ps), Tensor::from({1, 1, 2, 2}, as), Tensor::from({1, 1, 2}, pt),
          Tensor::from({1, 1, 2, 2}, at)};
}

Tensor grid(std::int64_t h, std::int64_t w) { return reshape(coordinate_grid(h, w, DType::f64), {1, 2, h, w}); }

}  // namespace

TEST_CASE("part_flow") {
  SUBCASE("identity motion") {
    Tensor f = part_flows(single({3, 2}, {1, 0, 0, 1}, {3, 2}, {1, 0, 0, 1}), 4, 5);
    CHECK(testing::max_abs_diff(reshape(f, {1, 2, 4, 5}), grid(4, 5)) == 0.0);
  }
  SUBCASE("pure shift") {
    Tensor f = reshape(part_flows(single({2, 3}, {1, 0, 0, 1}, {0, 0}, {1, 0, 0, 1}), 4, 5), {2, 4, 5});
    for (std::int64_t y = 0; y < 4; ++y)
      for (std::int64_t x = 0; x < 5; ++x) {
        CHECK(f.at({0, y, x}) == x + 2.0);
        CHECK(f.at({1, y, x}) == y + 3.0);
      }
  }
  SUBCASE("rotated source frame") {
    const double c = std::cos(std::numbers::pi / 6), s = std::sin(std::numbers::pi / 6);
    Tensor f = reshape(part_flows(single({0, 0}, {c, -s, s, c}, {0, 0}, {1, 0, 0, 1}), 1, 2), {2, 1, 2});
    CHECK(std::abs(f.at({0, 0, 1}) - 0.8660254) < 1e-6);
    CHECK(std::abs(f.at({1, 0, 1}) - 0.5) < 1e-12);
  }
  SUBCASE("singular target matrix stays finite") {
    Tensor f = part_flows(single({1, 1}, {1, 0, 0, 1}, {1, 1}, {0, 0, 0, 0}), 3, 3);
    for (double v : f.to_vector()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("compose_flow") {
  const std::int64_t h = 3, w = 4;
  Rng rng(1);
  Tensor flows = testing::randn(rng, {1, 2, 2, h, w}, DType::f64, 5.0);
  SUBCASE("background everywhere gives the identity grid") {
    Tensor y = concat({Tensor::zeros({1, 2, h, w}, DType::f64), Tensor::full({1, 1, h, w}, 1.0, DType::f64)}, 1);
    CHECK(testing::max_abs_diff(compose_flow(y, flows), grid(h, w)) == 0.0);
  }
  SUBCASE("hard assignment picks the part flow") {
    std::vector<double> y(static_cast<std::size_t>(3 * h * w), 0.0);
    for (std::int64_t i = 0; i < h * w; ++i) y[static_cast<std::size_t>((i % 3) * h * w + i)] = 1.0;
    Tensor f = compose_flow(Tensor::from({1, 3, h, w}, y), flows);
    for (std::int64_t i = 0; i < h * w; ++i) {
      const auto yy = i / w, xx = i % w;
      for (std::int64_t c = 0; c < 2; ++c) {
        const double expect = i % 3 == 2 ? (c == 0 ? xx : yy) : flows.at({0, i % 3, c, yy, xx});
        CHECK(f.at({0, c, yy, xx}) == expect);
      }
    }
  }
  SUBCASE("half and half blend") {
    Tensor g = reshape(grid(h, w), {1, 1, 2, h, w});
    Tensor f2 = concat({add(g, Tensor::from({1, 1, 2, 1, 1}, std::vector<double>{1, 0})),
                        add(g, Tensor::from({1, 1, 2, 1, 1}, std::vector<double>{0, 1}))},
                       1);
    Tensor y = concat({Tensor::full({1, 2, h, w}, 0.5, DType::f64), Tensor::zeros({1, 1, h, w}, DType::f64)}, 1);
    Tensor f = compose_flow(y, f2);
    CHECK(testing::max_abs_diff(f, add(grid(h, w), Tensor::full({1, 2, 1, 1}, 0.5, DType::f64))) < 1e-12);
  }
  SUBCASE("convexity: each component lies within the candidate range") {
    Tensor y = channel_softmax(testing::randn(rng, {1, 3, h, w}, DType::f64, 2.0));
    Tensor f = compose_flow(y, flows);
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t yy = 0; yy < h; ++yy)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          double lo = c == 0 ? xx : yy, hi = lo;
          for (std::int64_t k = 0; k < 2; ++k) {
            lo = std::min(lo, flows.at({0, k, c, yy, xx}));
            hi = std::max(hi, flows.at({0, k, c, yy, xx}));
          }
          const double v = f.at({0, c, yy, xx});
          CHECK(v >= lo - 1e-12);
          CHECK(v <= hi + 1e-12);
        }
  }
}

TEST_CASE("visibility_mask") {
  const std::int64_t h = 4, w = 4;
  Rng rng(2);
  Tensor ys = channel_softmax(testing::randn(rng, {1, 3, h, w}));
  Tensor yt = channel_softmax(testing::randn(rng, {1, 3, h, w}));
  SUBCASE("no source foreground") {
    Tensor s = concat({Tensor::zeros({1, 2, h, w}, DType::f64), Tensor::full({1, 1, h, w}, 1.0, DType::f64)}, 1);
    for (double v : visibility_mask(s, yt, true).to_vector()) CHECK(v == 1.0);
  }
  SUBCASE("no target background") {
    Tensor t = concat({Tensor::full({1, 2, h, w}, 0.5, DType::f64), Tensor::zeros({1, 1, h, w}, DType::f64)}, 1);
    for (double v : visibility_mask(ys, t, false).to_vector()) CHECK(v == 1.0);
  }
  SUBCASE("quadrant product") {
    std::vector<double> s(static_cast<std::size_t>(3 * h * w), 0.0), t(static_cast<std::size_t>(3 * h * w), 0.0);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto i = static_cast<std::size_t>(y * w + x);
        s[(y < h / 2 ? 0 : 2) * h * w + i] = 1.0;  // source foreground on the top half
        t[(x < w / 2 ? 2 : 1) * h * w + i] = 1.0;  // target background on the left half
      }
    Tensor v = visibility_mask(Tensor::from({1, 3, h, w}, s), Tensor::from({1, 3, h, w}, t), true);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) CHECK(v.at({0, 0, y, x}) == ((y < h / 2 && x < w / 2) ? 0.0 : 1.0));
  }
  SUBCASE("values in [0, 1] and elementwise oracle") {
    Tensor v = visibility_mask(ys, yt, false);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double expect = 1 - yt.at({0, 2, y, x}) * (ys.at({0, 0, y, x}) + ys.at({0, 1, y, x}));
        CHECK(std::abs(v.at({0, 0, y, x}) - expect) < 1e-12);
        CHECK(v.at({0, 0, y, x}) >= 0);
        CHECK(v.at({0, 0, y, x}) <= 1);
      }
  }
  SUBCASE("stop-gradient blocks only the target side") {
    for (bool stop : {true, false}) {
      Tensor ls = testing::randn(rng, {1, 3, h, w}), lt = testing::randn(rng, {1, 3, h, w});
      ls.set_requires_grad();
      lt.set_requires_grad();
      Tensor v = visibility_mask(channel_softmax(ls), channel_softmax(lt), stop);
      sum(square(v)).backward();
      CAPTURE(stop);
      CHECK(testing::grad_norm(ls) > 0);
      if (stop) {
        for (double g : lt.grad().to_vector()) CHECK(g == 0.0);
      } else {
        CHECK(testing::grad_norm(lt) > 0);
      }
    }
  }
}

TEST_CASE("flow resampling keeps absolute coordinates valid") {
  SUBCASE("identity stays identity") {
    Tensor up = resample_flow(grid(64, 64), 128, 128);
    CHECK(testing::max_abs_diff(up, grid(128, 128)) < 1e-4);
    Tensor down = resample_flow(grid(64, 64), 16, 16);
    CHECK(testing::max_abs_diff(down, grid(16, 16)) < 1e-12);
  }
  SUBCASE("constant shift scales with resolution") {
    Tensor shift = add(grid(64, 64), Tensor::from({1, 2, 1, 1}, std::vector<double>{2, 0}));
    Tensor up = resample_flow(shift, 128, 128);
    CHECK(testing::max_abs_diff(up, add(grid(128, 128), Tensor::from({1, 2, 1, 1}, std::vector<double>{4, 0}))) < 1e-9);
    Tensor down = resample_flow(shift, 32, 32);
    CHECK(testing::max_abs_diff(down, add(grid(32, 32), Tensor::from({1, 2, 1, 1}, std::vector<double>{1, 0}))) < 1e-9);
  }
  SUBCASE("random flow matches bilinear upsampling then coordinate rescaling in the interior") {
    Rng rng(3);
    const std::int64_t h = 6, w = 5;
    Tensor flow = add(grid(h, w), testing::randn(rng, {1, 2, h, w}));
    Tensor up = resample_flow(flow, 2 * h, 2 * w);
    Tensor naive = add_scalar(scale(upsample2(flow, UpsampleMode::bilinear), 2.0), 0.5);
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t y = 1; y < 2 * h - 1; ++y)
        for (std::int64_t x = 1; x < 2 * w - 1; ++x) CHECK(std::abs(up.at({0, c, y, x}) - naive.at({0, c, y, x})) < 1e-9);
  }
  SUBCASE("mask follows along") {
    Tensor mask = Tensor::full({1, 1, 8, 8}, 0.25, DType::f64);
    auto [f, m] = resample_flow_and_mask(grid(8, 8), mask, 4, 4);
    CHECK(m.shape() == Shape{1, 1, 4, 4});
    for (double v : m.to_vector()) CHECK(v == 0.25);
  }
}

TEST_CASE("ground-truth masks and motions reproduce the analytic flow") {
  SceneConfig cfg;
  cfg.num_parts = 3;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Video v = render_video(sample_scene(cfg, seed));
    const SyntheticSample s = make_sample(v, 1, 12);
    auto [ps, as] = pose_motion(s.source_poses);
    auto [pt, at] = pose_motion(s.target_poses);
    SegmentMotion m{ps, as, pt, at};
    Tensor flow = compose_flow(s.target_masks.to(DType::f64), part_flows(m, cfg.height, cfg.width));
    for (std::int64_t y = 1; y + 1 < cfg.height; ++y)
      for (std::int64_t x = 1; x + 1 < cfg.width; ++x) {
        const double dx = flow.at({0, 0, y, x}) - s.flow.at({0, y, x});
        const double dy = flow.at({0, 1, y, x}) - s.flow.at({1, y, x});
        worst = std::max(worst, std::hypot(dx, dy));
      }
  }
  CHECK(worst < 1e-4);
}
