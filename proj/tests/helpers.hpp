#pragma once

#include <cmath>
#include <vector>

#include "cpseg/ops.hpp"
#include "cpseg/params.hpp"
#include "cpseg/rng.hpp"

namespace testing {

inline cpseg::Tensor randn(cpseg::Rng& rng, const cpseg::Shape& shape, cpseg::DType dt = cpseg::DType::f64,
                           double sd = 1.0) {
  return cpseg::normal_tensor(rng, shape, sd, dt);
}

inline cpseg::Tensor uniform(cpseg::Rng& rng, const cpseg::Shape& shape, double lo, double hi,
                             cpseg::DType dt = cpseg::DType::f64) {
  cpseg::Buffer b(dt, static_cast<std::size_t>(cpseg::numel_of(shape)));
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, rng.uniform(lo, hi));
  return cpseg::Tensor::from_buffer(shape, std::move(b));
}

inline double max_abs_diff(const cpseg::Tensor& a, const cpseg::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i) m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
  return m;
}

inline bool bitwise_equal(const cpseg::Tensor& a, const cpseg::Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  for (std::size_t i = 0; i < static_cast<std::size_t>(a.numel()); ++i) {
    if (a.flat(i) != b.flat(i)) return false;
  }
  return true;
}

inline double grad_norm(const cpseg::Tensor& t) {
  double s = 0;
  if (!t.has_grad()) return 0;
  cpseg::Tensor g = t.grad();
  for (std::size_t i = 0; i < static_cast<std::size_t>(g.numel()); ++i) s += g.flat(i) * g.flat(i);
  return std::sqrt(s);
}

}  // namespace testing
