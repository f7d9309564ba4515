#pragma once

// Differentiable primitives. Every op checks shapes up front (ShapeError naming
// the offending dimension), refuses mixed dtypes, and validates that its output
// is finite.

#include <vector>

#include "cpseg/tensor.hpp"

namespace cpseg {

// Elementwise with same-rank broadcasting: each dimension must match or be 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

// Full reductions to a 0-d scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_dim(const Tensor& x, int dim, bool keepdim = false);
// Mean over the last two axes of an (N, C, H, W) tensor -> (N, C).
Tensor spatial_mean(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor narrow(const Tensor& x, int dim, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int dim);

// (..., m, k) x (..., k, n) with identical batch dims, or (..., m, k) x (k, n).
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stabilized softmax along one axis.
Tensor softmax(const Tensor& x, int dim);
inline Tensor channel_softmax(const Tensor& x) { return softmax(x, 1); }

// NCHW cross-correlation. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
              int padding = 0);

Tensor avg_pool2(const Tensor& x);

enum class UpsampleMode { nearest, bilinear };
// Bilinear uses the half-pixel (align-corners-false) convention with edge clamping.
Tensor upsample2(const Tensor& x, UpsampleMode mode);

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  // Permit training-mode normalization of a single sample (per-instance statistics).
  bool instance_fallback = false;
};

// Per-channel normalization of NCHW input. In training mode the batch moments
// are used and the running estimates (leaf tensors) are updated in place.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, const BatchNormOptions& options = {});

// Samples input (N, C, H, W) at absolute pixel coordinates flow (N, 2, Ho, Wo);
// channel 0 is x (column), channel 1 is y (row). Clamp-to-edge outside the image.
Tensor grid_sample_bilinear(const Tensor& input, const Tensor& flow);

struct SoftArgmax {
  Tensor coords;  // (N, K, 2) as (x, y)
  Tensor conf;    // (N, K, H, W), each map sums to 1
};
SoftArgmax soft_argmax2d(const Tensor& heatmap);

inline Tensor detach(const Tensor& x) { return x.detach(); }

// Inverse of (A + ridge * I) for A of shape (..., 2, 2). Determinants whose
// magnitude falls below det_floor are clamped to +-det_floor.
Tensor inverse2x2(const Tensor& a, double ridge = 0.0, double det_floor = 1e-6);

// (2, H, W) constant grid: channel 0 holds the column, channel 1 the row.
Tensor coordinate_grid(std::int64_t height, std::int64_t width, DType dtype = DType::f32);

// (..., 2, 2) identity matrices with the given leading shape.
Tensor identity2x2(const Shape& leading, DType dtype = DType::f32);

}  // namespace cpseg
