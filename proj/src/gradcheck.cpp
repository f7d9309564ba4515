#include "cpseg/gradcheck.hpp"

#include <cmath>

#include "cpseg/losses.hpp"
#include "cpseg/recon.hpp"

namespace cpseg {

GradCheckOptions default_gradcheck_options(DType dtype) {
  if (dtype == DType::f64) return {1e-4, 1e-6};
  return {1e-4, 1e-3};
}

namespace {

Tensor leaf_copy(const Tensor& t) {
  Tensor c = Tensor::from_buffer(t.shape(), t.buffer());
  return c;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double gradient_relative_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, double eps,
                               const std::vector<std::size_t>& check) {
  return gradient_relative_error(fn, inputs, fn, inputs, eps, check);
}

double gradient_relative_error(const ScalarFn& fn, const std::vector<Tensor>& inputs, const ScalarFn& reference,
                               const std::vector<Tensor>& reference_inputs, double eps,
                               const std::vector<std::size_t>& check) {
  std::vector<std::size_t> which = check;
  if (which.empty()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) which.push_back(i);
  }

  std::vector<Tensor> leaves;
  for (const auto& t : inputs) leaves.push_back(leaf_copy(t));
  for (std::size_t i : which) leaves[i].set_requires_grad(true);
  Tensor loss = fn(leaves);
  loss.backward();

  std::vector<double> analytic, numeric;
  for (std::size_t i : which) {
    Tensor g = leaves[i].grad();
    for (std::size_t j = 0; j < static_cast<std::size_t>(g.numel()); ++j) analytic.push_back(g.flat(j));
  }

  NoGradGuard guard;
  for (std::size_t i : which) {
    const std::size_t n = static_cast<std::size_t>(reference_inputs[i].numel());
    for (std::size_t j = 0; j < n; ++j) {
      double vals[2];
      for (int side = 0; side < 2; ++side) {
        std::vector<Tensor> probe;
        for (const auto& t : reference_inputs) probe.push_back(leaf_copy(t));
        const double x = reference_inputs[i].flat(j);
        probe[i].mutable_buffer().set(j, side == 0 ? x + eps : x - eps);
        vals[side] = reference(probe).item();
      }
      numeric.push_back((vals[0] - vals[1]) / (2 * eps));
    }
  }
  if (numeric.size() != analytic.size()) throw ShapeError("gradient check: reference inputs differ in size");

  std::vector<double> diff(analytic.size());
  for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = analytic[j] - numeric[j];
  const double scale = std::max(norm(analytic), norm(numeric));
  if (scale == 0) return 0;
  return norm(diff) / scale;
}

namespace {

// Checks reduce non-scalar outputs against fixed random weights. The dot
// product is accumulated in double so 32-bit probes are not swamped by
// summation round-off.
Tensor weighted_sum(const Tensor& out, const Tensor& weights) {
  if (!grad_enabled()) {
    double s = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(out.numel()); ++i) s += out.flat(i) * weights.flat(i);
    return Tensor::scalar(s, DType::f64);
  }
  return sum(mul(out, weights));
}

Tensor flat(const Tensor& t) { return reshape(t, {t.numel()}); }

struct Case {
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> output;
  std::vector<std::size_t> check;
};

using CaseFactory = std::function<Case(Rng&, DType)>;

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

Tensor randn(Rng& rng, const Shape& shape, DType dt, double sd = 1.0) { return normal_tensor(rng, shape, sd, dt); }

Tensor uniform(Rng& rng, const Shape& shape, DType dt, double lo, double hi) {
  Buffer b(dt, static_cast<std::size_t>(numel_of(shape)));
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, rng.uniform(lo, hi));
  return Tensor::from_buffer(shape, std::move(b));
}

// Values with magnitude in [margin, 1] and random sign: keeps kinks at 0 out of probe range.
Tensor away_from_zero(Rng& rng, const Shape& shape, DType dt, double margin) {
  Buffer b(dt, static_cast<std::size_t>(numel_of(shape)));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double m = rng.uniform(margin, 1.0);
    b.set(i, rng.uniform() < 0.5 ? -m : m);
  }
  return Tensor::from_buffer(shape, std::move(b));
}

// Sampling coordinates inside [0, size-1) with fractional parts away from integers.
Tensor sample_coords(Rng& rng, std::int64_t n, std::int64_t ho, std::int64_t wo, std::int64_t h, std::int64_t w,
                     DType dt) {
  Buffer b(dt, static_cast<std::size_t>(n * 2 * ho * wo));
  const std::size_t plane = static_cast<std::size_t>(ho * wo);
  for (std::int64_t i = 0; i < n; ++i) {
    for (int c = 0; c < 2; ++c) {
      const std::int64_t size = c == 0 ? w : h;
      for (std::size_t j = 0; j < plane; ++j) {
        const double base = static_cast<double>(pick(rng, 0, size - 2));
        b.set(static_cast<std::size_t>(i * 2 + c) * plane + j, base + rng.uniform(0.15, 0.85));
      }
    }
  }
  return Tensor::from_buffer({n, 2, ho, wo}, std::move(b));
}

// Diagonal in [0.8, 1.2] plus small noise: well away from singular.
Tensor well_conditioned(Rng& rng, const Shape& leading, DType dt) {
  Shape s = leading;
  s.push_back(2);
  s.push_back(2);
  Buffer b(dt, static_cast<std::size_t>(numel_of(s)));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const bool diag = (i % 4 == 0) || (i % 4 == 3);
    b.set(i, (diag ? rng.uniform(0.8, 1.2) : 0.0) + 0.1 * rng.normal());
  }
  return Tensor::from_buffer(s, std::move(b));
}

Shape rand_nchw(Rng& rng, std::int64_t max_hw = 5) {
  return {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, max_hw), pick(rng, 1, max_hw)};
}

Case unary_case(Tensor x, Tensor (*op)(const Tensor&)) {
  return {{x}, [op](const std::vector<Tensor>& v) { return op(v[0]); }, {}};
}

std::vector<std::pair<std::string, CaseFactory>> registry() {
  std::vector<std::pair<std::string, CaseFactory>> r;

  auto binary = [](Tensor (*op)(const Tensor&, const Tensor&)) {
    return [op](Rng& rng, DType dt) {
      Shape a = rand_nchw(rng);
      Shape b = a;
      for (auto& d : b) {
        if (rng.uniform() < 0.4) d = 1;
      }
      if (rng.uniform() < 0.5) std::swap(a, b);
      return Case{{randn(rng, a, dt), randn(rng, b, dt)},
                  [op](const std::vector<Tensor>& v) { return op(v[0], v[1]); },
                  {}};
    };
  };
  r.emplace_back("add", binary(&add));
  r.emplace_back("sub", binary(&sub));
  r.emplace_back("mul", binary(&mul));
  r.emplace_back("scalar_ops", [](Rng& rng, DType dt) {
    const double s = rng.uniform(-2, 2), c = rng.uniform(-1, 1);
    return Case{{randn(rng, rand_nchw(rng), dt)},
                [s, c](const std::vector<Tensor>& v) { return add_scalar(scale(neg(v[0]), s), c); },
                {}};
  });
  r.emplace_back("relu", [](Rng& rng, DType dt) {
    return unary_case(away_from_zero(rng, rand_nchw(rng), dt, 0.05), &relu);
  });
  r.emplace_back("sigmoid", [](Rng& rng, DType dt) {
    return unary_case(randn(rng, rand_nchw(rng), dt, 2.0), &sigmoid);
  });
  r.emplace_back("abs", [](Rng& rng, DType dt) {
    return unary_case(away_from_zero(rng, rand_nchw(rng), dt, 0.05), &cpseg::abs);
  });
  r.emplace_back("square", [](Rng& rng, DType dt) {
    return unary_case(randn(rng, rand_nchw(rng), dt), &square);
  });
  r.emplace_back("sum_mean", [](Rng& rng, DType dt) {
    return Case{{randn(rng, rand_nchw(rng), dt)},
                [](const std::vector<Tensor>& v) {
                  return concat({reshape(sum(v[0]), {1}), reshape(mean(v[0]), {1})}, 0);
                },
                {}};
  });
  r.emplace_back("sum_dim", [](Rng& rng, DType dt) {
    const int d = static_cast<int>(pick(rng, 0, 3));
    const bool keep = rng.uniform() < 0.5;
    return Case{{randn(rng, rand_nchw(rng), dt)},
                [d, keep](const std::vector<Tensor>& v) { return sum_dim(v[0], d, keep); },
                {}};
  });
  r.emplace_back("spatial_mean", [](Rng& rng, DType dt) {
    return unary_case(randn(rng, rand_nchw(rng), dt), &spatial_mean);
  });
  r.emplace_back("reshape", [](Rng& rng, DType dt) {
    Shape s = rand_nchw(rng);
    return Case{{randn(rng, s, dt)},
                [s](const std::vector<Tensor>& v) { return reshape(v[0], {s[0] * s[1], s[2] * s[3]}); },
                {}};
  });
  r.emplace_back("narrow", [](Rng& rng, DType dt) {
    Shape s = rand_nchw(rng);
    const int d = static_cast<int>(pick(rng, 0, 3));
    const std::int64_t start = pick(rng, 0, s[static_cast<std::size_t>(d)] - 1);
    const std::int64_t len = pick(rng, 1, s[static_cast<std::size_t>(d)] - start);
    return Case{{randn(rng, s, dt)},
                [d, start, len](const std::vector<Tensor>& v) { return narrow(v[0], d, start, len); },
                {}};
  });
  r.emplace_back("concat", [](Rng& rng, DType dt) {
    Shape a = rand_nchw(rng), b = a;
    const int d = static_cast<int>(pick(rng, 0, 3));
    b[static_cast<std::size_t>(d)] = pick(rng, 1, 3);
    return Case{{randn(rng, a, dt), randn(rng, b, dt)},
                [d](const std::vector<Tensor>& v) { return concat({v[0], v[1]}, d); },
                {}};
  });
  r.emplace_back("matmul", [](Rng& rng, DType dt) {
    const std::int64_t bsz = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    const bool shared = rng.uniform() < 0.5;
    Shape rhs = shared ? Shape{k, n} : Shape{bsz, k, n};
    return Case{{randn(rng, {bsz, m, k}, dt), randn(rng, rhs, dt)},
                [](const std::vector<Tensor>& v) { return matmul(v[0], v[1]); },
                {}};
  });
  r.emplace_back("softmax", [](Rng& rng, DType dt) {
    const int d = static_cast<int>(pick(rng, 0, 3));
    return Case{{randn(rng, rand_nchw(rng), dt, 2.0)},
                [d](const std::vector<Tensor>& v) { return softmax(v[0], d); },
                {}};
  });
  r.emplace_back("conv2d", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
    const int k = rng.uniform() < 0.3 ? 1 : 3;
    const int stride = static_cast<int>(pick(rng, 1, 2));
    const int pad = k == 1 ? 0 : static_cast<int>(pick(rng, 0, 1));
    const std::int64_t h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    const bool with_bias = rng.uniform() < 0.7;
    std::vector<Tensor> in{randn(rng, {n, ci, h, w}, dt), randn(rng, {co, ci, k, k}, dt)};
    if (with_bias) in.push_back(randn(rng, {co}, dt));
    return Case{in,
                [stride, pad](const std::vector<Tensor>& v) {
                  return conv2d(v[0], v[1], v.size() > 2 ? v[2] : Tensor(), stride, pad);
                },
                {}};
  });
  r.emplace_back("avg_pool2", [](Rng& rng, DType dt) {
    Shape s{pick(rng, 1, 2), pick(rng, 1, 3), 2 * pick(rng, 1, 3), 2 * pick(rng, 1, 3)};
    return unary_case(randn(rng, s, dt), &avg_pool2);
  });
  r.emplace_back("upsample2_nearest", [](Rng& rng, DType dt) {
    return Case{{randn(rng, rand_nchw(rng, 4), dt)},
                [](const std::vector<Tensor>& v) { return upsample2(v[0], UpsampleMode::nearest); },
                {}};
  });
  r.emplace_back("upsample2_bilinear", [](Rng& rng, DType dt) {
    return Case{{randn(rng, rand_nchw(rng, 4), dt)},
                [](const std::vector<Tensor>& v) { return upsample2(v[0], UpsampleMode::bilinear); },
                {}};
  });
  r.emplace_back("batch_norm", [](Rng& rng, DType dt) {
    const bool training = rng.uniform() < 0.7;
    const bool instance = training && rng.uniform() < 0.3;
    const std::int64_t n = instance ? 1 : pick(rng, 2, 3);
    const std::int64_t c = pick(rng, 1, 3);
    Shape s{n, c, pick(rng, 2, 4), pick(rng, 2, 4)};
    Tensor rm = randn(rng, {c}, dt, 0.3);
    Tensor rv = uniform(rng, {c}, dt, 0.5, 1.5);
    return Case{{randn(rng, s, dt), uniform(rng, {c}, dt, 0.5, 1.5), randn(rng, {c}, dt)},
                [training, instance, rm, rv](const std::vector<Tensor>& v) {
                  Tensor m = Tensor::from_buffer(rm.shape(), rm.buffer());
                  Tensor var = Tensor::from_buffer(rv.shape(), rv.buffer());
                  BatchNormOptions o;
                  o.instance_fallback = instance;
                  return batch_norm(v[0], v[1], v[2], m, var, training, o);
                },
                {}};
  });
  r.emplace_back("grid_sample_bilinear", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), c = pick(rng, 1, 2), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const std::int64_t ho = pick(rng, 1, 4), wo = pick(rng, 1, 4);
    return Case{{randn(rng, {n, c, h, w}, dt), sample_coords(rng, n, ho, wo, h, w, dt)},
                [](const std::vector<Tensor>& v) { return grid_sample_bilinear(v[0], v[1]); },
                {}};
  });
  r.emplace_back("soft_argmax2d", [](Rng& rng, DType dt) {
    Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    return Case{{randn(rng, s, dt)},
                [](const std::vector<Tensor>& v) {
                  SoftArgmax sa = soft_argmax2d(v[0]);
                  return concat({flat(sa.coords), flat(sa.conf)}, 0);
                },
                {}};
  });
  r.emplace_back("inverse2x2", [](Rng& rng, DType dt) {
    const std::int64_t b = pick(rng, 1, 4);
    Tensor a = well_conditioned(rng, {b}, dt);
    const double ridge = rng.uniform() < 0.5 ? 0.0 : 1e-2;
    return Case{{a}, [ridge](const std::vector<Tensor>& v) { return inverse2x2(v[0], ridge); }, {}};
  });
  r.emplace_back("residual_block", [](Rng& rng, DType dt) {
    const std::int64_t n = 2, c = pick(rng, 1, 3), h = pick(rng, 3, 5), w = pick(rng, 3, 5);
    const double sd = 1.0 / std::sqrt(9.0 * static_cast<double>(c));
    std::vector<Tensor> in{randn(rng, {n, c, h, w}, dt),       randn(rng, {c, c, 3, 3}, dt, sd),
                           uniform(rng, {c}, dt, 0.5, 1.5),    randn(rng, {c}, dt, 0.5),
                           randn(rng, {c, c, 3, 3}, dt, sd)};
    return Case{in,
                [c, dt](const std::vector<Tensor>& v) {
                  Tensor rm = Tensor::zeros({c}, dt), rv = Tensor::full({c}, 1.0, dt);
                  Tensor hid = conv2d(v[0], v[1], Tensor(), 1, 1);
                  hid = relu(batch_norm(hid, v[2], v[3], rm, rv, true));
                  return add(v[0], conv2d(hid, v[4], Tensor(), 1, 1));
                },
                {}};
  });

  // Pipeline pieces.
  r.emplace_back("part_flow", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), k = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    std::vector<Tensor> in{uniform(rng, {n, k, 2}, dt, 0, 4), well_conditioned(rng, {n, k}, dt),
                           uniform(rng, {n, k, 2}, dt, 0, 4), well_conditioned(rng, {n, k}, dt)};
    return Case{in,
                [h, w](const std::vector<Tensor>& v) {
                  SegmentMotion m{v[0], v[1], v[2], v[3]};
                  return part_flows(m, h, w);
                },
                {}};
  });
  r.emplace_back("compose_flow", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), k = pick(rng, 1, 3), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    return Case{{randn(rng, {n, k + 1, h, w}, dt), randn(rng, {n, k, 2, h, w}, dt, 2.0)},
                [](const std::vector<Tensor>& v) { return compose_flow(channel_softmax(v[0]), v[1]); },
                {}};
  });
  r.emplace_back("visibility_mask", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), k = pick(rng, 1, 3), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    const bool stop = rng.uniform() < 0.5;
    // With the stop the target logits have no analytic gradient by design,
    // so only the source side is compared.
    std::vector<std::size_t> check = stop ? std::vector<std::size_t>{0} : std::vector<std::size_t>{};
    return Case{{randn(rng, {n, k + 1, h, w}, dt), randn(rng, {n, k + 1, h, w}, dt)},
                [stop](const std::vector<Tensor>& v) {
                  return visibility_mask(channel_softmax(v[0]), channel_softmax(v[1]), stop);
                },
                check};
  });
  r.emplace_back("deform", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    return Case{{randn(rng, {n, c, h, w}, dt), sample_coords(rng, n, h, w, h, w, dt),
                 uniform(rng, {n, 1, h, w}, dt, 0, 1)},
                [](const std::vector<Tensor>& v) { return deform(v[0], v[1], v[2]); },
                {}};
  });
  auto rec_case = [](ExtractorMode mode) {
    return [mode](Rng& rng, DType dt) {
      const std::int64_t n = pick(rng, 1, 2), s = 4 * pick(rng, 1, 2);
      ExtractorConfig cfg;
      cfg.mode = mode;
      cfg.channels = {2, 2};
      cfg.seed = rng.next();
      auto extractor = std::make_shared<FeatureExtractor>(cfg, dt);
      Tensor target = uniform(rng, {n, 3, s, s}, dt, 0, 1);
      // One offset sign per image so |difference| stays away from its kink at every scale.
      Tensor pred;
      {
        Buffer b(dt, static_cast<std::size_t>(target.numel()));
        const std::size_t per = static_cast<std::size_t>(3 * s * s);
        std::vector<double> sign(static_cast<std::size_t>(n));
        for (auto& v : sign) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < b.size(); ++i) b.set(i, target.flat(i) + sign[i / per] * rng.uniform(0.1, 0.5));
        pred = Tensor::from_buffer(target.shape(), std::move(b));
      }
      std::vector<std::int64_t> scales{s, s / 2};
      return Case{{pred},
                  [extractor, target, scales](const std::vector<Tensor>& v) {
                    return reconstruction_loss(v[0], target, *extractor, scales);
                  },
                  {}};
    };
  };
  r.emplace_back("reconstruction_loss_raw", rec_case(ExtractorMode::raw_pixels));
  r.emplace_back("reconstruction_loss_conv", rec_case(ExtractorMode::random_conv));
  r.emplace_back("equivariance_loss", [](Rng& rng, DType dt) {
    const std::int64_t n = pick(rng, 1, 2), k = pick(rng, 1, 3);
    std::vector<GeometricTransform> g;
    TransformRanges ranges;
    for (std::int64_t i = 0; i < n; ++i) g.push_back(sample_transform(rng, ranges, 16, 16));
    auto affine = [&] { return well_conditioned(rng, {n, k}, dt); };
    std::vector<Tensor> in{uniform(rng, {n, k, 2}, dt, 0, 15), affine(), uniform(rng, {n, k, 2}, dt, 0, 15),
                           affine()};
    Tensor masks = Tensor::zeros({n, k + 1, 16, 16}, dt);
    return Case{in,
                [g, masks](const std::vector<Tensor>& v) {
                  SegmentationOutput a, b;
                  a.masks = b.masks = masks;
                  a.keypoints = v[0];
                  a.affine = v[1];
                  b.keypoints = v[2];
                  b.affine = v[3];
                  EquivarianceTerms t = equivariance_loss(a, b, g);
                  return concat({reshape(t.keypoint, {1}), reshape(t.jacobian, {1})}, 0);
                },
                {}};
  });
  r.emplace_back("total_loss", [](Rng& rng, DType dt) {
    LossWeights lw{rng.uniform(0, 10), rng.uniform(0, 10)};
    return Case{{uniform(rng, {}, dt, 0, 1), uniform(rng, {}, dt, 0, 1), uniform(rng, {}, dt, 0, 1)},
                [lw](const std::vector<Tensor>& v) {
                  return reshape(total_loss(v[0], EquivarianceTerms{v[1], v[2]}, lw).total, {1});
                },
                {}};
  });
  return r;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(DType dtype, int instances, std::uint64_t seed,
                                                const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  std::uint64_t salt = 0;
  for (const auto& [name, factory] : registry()) {
    GradCheckResult res;
    res.name = name;
    res.tolerance = options.tolerance;
    Rng rng(mix_seed(seed, ++salt));
    for (int i = 0; i < instances; ++i) {
      // The 32-bit case and its 64-bit reference draw identical random values.
      Rng twin = rng;
      Case c = factory(rng, dtype);
      Case ref = factory(twin, DType::f64);
      Tensor probe;
      {
        NoGradGuard g;
        probe = c.output(c.inputs);
      }
      Tensor weights = normal_tensor(rng, probe.shape(), 1.0, dtype);
      Tensor ref_weights = weights.to(DType::f64);
      std::vector<Tensor> ref_inputs;
      for (const auto& t : c.inputs) ref_inputs.push_back(t.to(DType::f64));
      auto fn = [&c, &weights](const std::vector<Tensor>& v) { return weighted_sum(c.output(v), weights); };
      auto ref_fn = [&ref, &ref_weights](const std::vector<Tensor>& v) {
        return weighted_sum(ref.output(v), ref_weights);
      };
      const double err = gradient_relative_error(fn, c.inputs, ref_fn, ref_inputs, options.eps, c.check);
      res.max_error = std::max(res.max_error, err);
      ++res.instances;
    }
    res.passed = res.max_error < options.tolerance;
    results.push_back(res);
  }
  return results;
}

}  // namespace cpseg
