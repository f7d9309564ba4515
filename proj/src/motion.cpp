#include "cpseg/motion.hpp"

namespace cpseg {

SegmentMotion SegmentMotion::from(const SegmentationOutput& source, const SegmentationOutput& target) {
  return {source.keypoints, source.affine, target.keypoints, target.affine};
}

SegmentMotion SegmentMotion::shift_only() const {
  const Shape lead{source_keypoints.dim(0), source_keypoints.dim(1)};
  Tensor eye = identity2x2(lead, source_keypoints.dtype());
  return {source_keypoints, eye, target_keypoints, eye};
}

Tensor part_flows(const SegmentMotion& motion, std::int64_t height, std::int64_t width,
                  const MotionOptions& options) {
  const Tensor& ps = motion.source_keypoints;
  const std::int64_t n = ps.dim(0), k = ps.dim(1), hw = height * width;
  for (const Tensor* p : std::initializer_list<const Tensor*>{&motion.source_keypoints, &motion.target_keypoints}) {
    if (p->ndim() != 3 || p->dim(0) != n || p->dim(1) != k || p->dim(2) != 2) {
      throw ShapeError("part_flows: keypoints must be (N, K, 2), got " + to_string(p->shape()));
    }
  }
  Tensor grid = reshape(coordinate_grid(height, width, ps.dtype()), {1, 1, 2, hw});
  Tensor relative = sub(grid, reshape(motion.target_keypoints, {n, k, 2, 1}));
  Tensor linear = matmul(motion.source_affine, inverse2x2(motion.target_affine, options.ridge, options.det_floor));
  Tensor flows = add(matmul(linear, relative), reshape(ps, {n, k, 2, 1}));
  return reshape(flows, {n, k, 2, height, width});
}

Tensor compose_flow(const Tensor& target_masks, const Tensor& flows) {
  const std::int64_t n = flows.dim(0), k = flows.dim(1), h = flows.dim(3), w = flows.dim(4);
  if (target_masks.ndim() != 4 || target_masks.dim(0) != n || target_masks.dim(1) != k + 1 ||
      target_masks.dim(2) != h || target_masks.dim(3) != w) {
    throw ShapeError("compose_flow: masks " + to_string(target_masks.shape()) + " do not match flows " +
                     to_string(flows.shape()));
  }
  Tensor fg = reshape(narrow(target_masks, 1, 0, k), {n, k, 1, h, w});
  Tensor parts = sum_dim(mul(fg, flows), 1);
  Tensor grid = reshape(coordinate_grid(h, w, flows.dtype()), {1, 2, h, w});
  Tensor background = mul(narrow(target_masks, 1, k, 1), grid);
  return add(parts, background);
}

Tensor visibility_mask(const Tensor& source_masks, const Tensor& target_masks, bool stop_gradient) {
  if (source_masks.shape() != target_masks.shape()) {
    throw ShapeError("visibility_mask: source " + to_string(source_masks.shape()) + " vs target " +
                     to_string(target_masks.shape()));
  }
  const std::int64_t k = source_masks.dim(1) - 1;
  Tensor target_bg = narrow(target_masks, 1, k, 1);
  if (stop_gradient) target_bg = detach(target_bg);
  Tensor source_fg = sum_dim(narrow(source_masks, 1, 0, k), 1, true);
  return add_scalar(neg(mul(target_bg, source_fg)), 1.0);
}

namespace {

Tensor resample_planes(Tensor x, std::int64_t height, std::int64_t width, double& factor) {
  factor = 1.0;
  while (x.dim(2) > height && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0) {
    x = avg_pool2(x);
    factor *= 0.5;
  }
  while (x.dim(2) < height) {
    x = upsample2(x, UpsampleMode::bilinear);
    factor *= 2.0;
  }
  if (x.dim(2) != height || x.dim(3) != width) {
    throw ShapeError("resample: cannot reach " + std::to_string(height) + "x" + std::to_string(width) +
                     " by factor-of-two steps");
  }
  return x;
}

}  // namespace

Tensor resample_flow(const Tensor& flow, std::int64_t height, std::int64_t width) {
  if (flow.dim(2) == height && flow.dim(3) == width) return flow;
  const std::int64_t h = flow.dim(2), w = flow.dim(3);
  Tensor grid = reshape(coordinate_grid(h, w, flow.dtype()), {1, 2, h, w});
  double factor = 1.0;
  Tensor displacement = resample_planes(sub(flow, grid), height, width, factor);
  Tensor new_grid = reshape(coordinate_grid(height, width, flow.dtype()), {1, 2, height, width});
  return add(scale(displacement, factor), new_grid);
}

std::pair<Tensor, Tensor> resample_flow_and_mask(const Tensor& flow, const Tensor& mask, std::int64_t height,
                                                 std::int64_t width) {
  double factor = 1.0;
  Tensor m = mask.dim(2) == height && mask.dim(3) == width ? mask : resample_planes(mask, height, width, factor);
  return {resample_flow(flow, height, width), m};
}

}  // namespace cpseg
