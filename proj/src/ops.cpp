#include "cpseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace cpseg {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

using detail::Node;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch between operands");
}

void require_ndim(const Tensor& x, int n, const char* op, const char* what) {
  if (x.ndim() != n) {
    throw ShapeError(std::string(op) + ": " + what + " must be " + std::to_string(n) + "-D, got shape " +
                     to_string(x.shape()));
  }
}

int normalize_axis(int dim, int ndim, const char* op) {
  if (dim < 0) dim += ndim;
  if (dim < 0 || dim >= ndim) throw ShapeError(std::string(op) + ": axis out of range");
  return dim;
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

template <class T>
std::span<T> grad_of(Node& self, std::size_t i) {
  return self.parents[i]->grad_buffer().as<T>();
}

template <class T>
std::span<const T> data_of(const Node& self, std::size_t i) {
  return self.parents[i]->data.as<T>();
}

template <class T>
std::span<const T> out_grad(const Node& self) {
  return self.grad.as<T>();
}

// Splits a shape around `dim` into (outer, extent, inner).
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int dim) {
  AxisSplit r;
  for (int i = 0; i < dim; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(dim)];
  for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;
  bool same = false;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  }
  Broadcast bc;
  bc.same = a == b;
  const std::size_t nd = a.size();
  bc.out.resize(nd);
  bc.stride_a.assign(nd, 0);
  bc.stride_b.assign(nd, 0);
  std::int64_t sa = 1, sb = 1;
  for (std::size_t r = nd; r-- > 0;) {
    if (a[r] != b[r] && a[r] != 1 && b[r] != 1) {
      throw ShapeError(std::string(op) + ": dimension " + std::to_string(r) + " mismatch (" +
                       std::to_string(a[r]) + " vs " + std::to_string(b[r]) + ")");
    }
    bc.out[r] = std::max(a[r], b[r]);
    bc.stride_a[r] = a[r] == 1 ? 0 : sa;
    bc.stride_b[r] = b[r] == 1 ? 0 : sb;
    sa *= a[r];
    sb *= b[r];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::int64_t total = numel_of(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const int nd = static_cast<int>(bc.out.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      const auto u = static_cast<std::size_t>(d);
      ++idx[u];
      ia += bc.stride_a[u];
      ib += bc.stride_b[u];
      if (idx[u] < bc.out[u]) break;
      ia -= bc.stride_a[u] * bc.out[u];
      ib -= bc.stride_b[u] * bc.out[u];
      idx[u] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
  require_same_dtype(a, b, name);
  auto bc = make_broadcast(a.shape(), b.shape(), name);
  Buffer out(a.dtype(), static_cast<std::size_t>(numel_of(bc.out)));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.as<T>();
    for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
      switch (kind) {
        case BinOp::add: po[o] = pa[i] + pb[j]; break;
        case BinOp::sub: po[o] = pa[i] - pb[j]; break;
        case BinOp::mul: po[o] = pa[i] * pb[j]; break;
      }
    });
  });
  Shape shape = bc.out;
  return Tensor::make_result(name, std::move(shape), std::move(out), {a, b},
                             [bc, kind](Node& self) {
                               dispatch(self.dtype(), [&](auto tag) {
                                 using T = decltype(tag);
                                 auto g = out_grad<T>(self);
                                 const bool wa = wants(self, 0), wb = wants(self, 1);
                                 std::span<T> ga, gb;
                                 if (wa) ga = grad_of<T>(self, 0);
                                 if (wb) gb = grad_of<T>(self, 1);
                                 if (kind == BinOp::mul) {
                                   auto pa = data_of<T>(self, 0);
                                   auto pb = data_of<T>(self, 1);
                                   for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                     if (wa) ga[i] += g[o] * pb[j];
                                     if (wb) gb[j] += g[o] * pa[i];
                                   });
                                 } else {
                                   const T sign = kind == BinOp::sub ? T(-1) : T(1);
                                   for_each_broadcast(bc, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                     if (wa) ga[i] += g[o];
                                     if (wb) gb[j] += sign * g[o];
                                   });
                                 }
                               });
                             });
}

// Unary op helper: fwd(x) -> y, dydx(x, y) -> derivative.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = static_cast<T>(fwd(static_cast<double>(px[i])));
  });
  return Tensor::make_result(name, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto px = data_of<T>(self, 0);
      auto py = self.data.as<T>();
      auto gx = grad_of<T>(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * static_cast<T>(deriv(static_cast<double>(px[i]), static_cast<double>(py[i])));
      }
    });
  });
}

// --------------------------------------------------------------- conv helpers

template <class T>
void im2col(const T* img, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t ho, std::int64_t wo, T* cols) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = img + (ci * h + iy) * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t ho, std::int64_t wo, T* img) {
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (ci * h + iy) * w;
          const T* src = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ------------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ------------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  Buffer out(x.dtype(), 1);
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out.as<T>()[0] = acc;
  });
  return Tensor::make_result("sum", {}, std::move(out), {x}, [](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T g = out_grad<T>(self)[0];
      for (auto& v : grad_of<T>(self, 0)) v += g;
    });
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / n);
}

Tensor sum_dim(const Tensor& x, int dim, bool keepdim) {
  dim = normalize_axis(dim, x.ndim(), "sum_dim");
  const AxisSplit sp = split_at(x.shape(), dim);
  Shape shape = x.shape();
  if (keepdim) {
    shape[static_cast<std::size_t>(dim)] = 1;
  } else {
    shape.erase(shape.begin() + dim);
  }
  Buffer out(x.dtype(), static_cast<std::size_t>(sp.outer * sp.inner));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t e = 0; e < sp.extent; ++e) {
        const T* src = px.data() + (o * sp.extent + e) * sp.inner;
        T* dst = po.data() + o * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return Tensor::make_result("sum_dim", std::move(shape), std::move(out), {x}, [sp](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto gx = grad_of<T>(self, 0);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t e = 0; e < sp.extent; ++e) {
          T* dst = gx.data() + (o * sp.extent + e) * sp.inner;
          const T* src = g.data() + o * sp.inner;
          for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  });
}

Tensor spatial_mean(const Tensor& x) {
  require_ndim(x, 4, "spatial_mean", "input");
  const auto hw = static_cast<double>(x.dim(2) * x.dim(3));
  return scale(sum_dim(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2), 1.0 / hw);
}

// --------------------------------------------------------------------- layout

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return Tensor::make_result("reshape", shape, x.buffer(), {x}, [](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto gx = grad_of<T>(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
}

Tensor narrow(const Tensor& x, int dim, std::int64_t start, std::int64_t length) {
  dim = normalize_axis(dim, x.ndim(), "narrow");
  const AxisSplit sp = split_at(x.shape(), dim);
  if (start < 0 || length < 0 || start + length > sp.extent) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds dimension " + std::to_string(dim) + " of size " + std::to_string(sp.extent));
  }
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(dim)] = length;
  Buffer out(x.dtype(), static_cast<std::size_t>(sp.outer * length * sp.inner));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const T* src = px.data() + (o * sp.extent + start) * sp.inner;
      std::copy(src, src + length * sp.inner, po.data() + o * length * sp.inner);
    }
  });
  return Tensor::make_result("narrow", std::move(shape), std::move(out), {x},
                             [sp, start, length](Node& self) {
                               dispatch(self.dtype(), [&](auto tag) {
                                 using T = decltype(tag);
                                 auto g = out_grad<T>(self);
                                 auto gx = grad_of<T>(self, 0);
                                 for (std::int64_t o = 0; o < sp.outer; ++o) {
                                   const T* src = g.data() + o * length * sp.inner;
                                   T* dst = gx.data() + (o * sp.extent + start) * sp.inner;
                                   for (std::int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
                                 }
                               });
                             });
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  dim = normalize_axis(dim, nd, "concat");
  Shape shape = parts[0].shape();
  std::int64_t total = 0;
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) {
    require_same_dtype(parts[0], p, "concat");
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d) {
      if (d != dim && p.dim(d) != shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " mismatch (" + std::to_string(p.dim(d)) +
                         " vs " + std::to_string(shape[static_cast<std::size_t>(d)]) + ")");
      }
    }
    extents.push_back(p.dim(dim));
    total += p.dim(dim);
  }
  shape[static_cast<std::size_t>(dim)] = total;
  const AxisSplit sp = split_at(shape, dim);
  Buffer out(parts[0].dtype(), static_cast<std::size_t>(numel_of(shape)));
  dispatch(parts[0].dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto po = out.as<T>();
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto src = parts[p].data<T>();
      const std::int64_t e = extents[p];
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy(src.data() + o * e * sp.inner, src.data() + (o + 1) * e * sp.inner,
                  po.data() + (o * total + offset) * sp.inner);
      }
      offset += e;
    }
  });
  return Tensor::make_result("concat", std::move(shape), std::move(out), parts,
                             [sp, extents, total](Node& self) {
                               dispatch(self.dtype(), [&](auto tag) {
                                 using T = decltype(tag);
                                 auto g = out_grad<T>(self);
                                 std::int64_t offset = 0;
                                 for (std::size_t p = 0; p < extents.size(); ++p) {
                                   const std::int64_t e = extents[p];
                                   if (wants(self, p)) {
                                     auto gp = grad_of<T>(self, p);
                                     for (std::int64_t o = 0; o < sp.outer; ++o) {
                                       const T* src = g.data() + (o * total + offset) * sp.inner;
                                       T* dst = gp.data() + o * e * sp.inner;
                                       for (std::int64_t i = 0; i < e * sp.inner; ++i) dst[i] += src[i];
                                     }
                                   }
                                   offset += e;
                                 }
                               });
                             });
}

// --------------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul: operands must be at least 2-D");
  const std::int64_t m = a.dim(-2), k = a.dim(-1);
  const std::int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul: inner dimension mismatch (" + std::to_string(k) + " vs " + std::to_string(kb) + ")");
  }
  const bool shared_b = b.ndim() == 2;
  if (!shared_b) {
    if (b.ndim() != a.ndim()) throw ShapeError("matmul: batch rank mismatch");
    for (int d = 0; d < a.ndim() - 2; ++d) {
      if (a.dim(d) != b.dim(d)) throw ShapeError("matmul: batch dimension " + std::to_string(d) + " mismatch");
    }
  }
  const std::int64_t batch = a.numel() / (m * k);
  Shape shape(a.shape().begin(), a.shape().end() - 2);
  shape.push_back(m);
  shape.push_back(n);
  Buffer out(a.dtype(), static_cast<std::size_t>(batch * m * n));
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.as<T>().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      MapR<T>(po + i * m * n, m, n).noalias() =
          CMapR<T>(pa + i * m * k, m, k) * CMapR<T>(pb + (shared_b ? 0 : i * k * n), k, n);
    }
  });
  return Tensor::make_result("matmul", std::move(shape), std::move(out), {a, b},
                             [batch, m, k, n, shared_b](Node& self) {
                               dispatch(self.dtype(), [&](auto tag) {
                                 using T = decltype(tag);
                                 const T* g = out_grad<T>(self).data();
                                 const T* pa = data_of<T>(self, 0).data();
                                 const T* pb = data_of<T>(self, 1).data();
                                 const bool wa = wants(self, 0), wb = wants(self, 1);
                                 T* ga = wa ? grad_of<T>(self, 0).data() : nullptr;
                                 T* gb = wb ? grad_of<T>(self, 1).data() : nullptr;
                                 for (std::int64_t i = 0; i < batch; ++i) {
                                   CMapR<T> G(g + i * m * n, m, n);
                                   const std::int64_t boff = shared_b ? 0 : i * k * n;
                                   if (wa) {
                                     MapR<T>(ga + i * m * k, m, k).noalias() +=
                                         G * CMapR<T>(pb + boff, k, n).transpose();
                                   }
                                   if (wb) {
                                     MapR<T>(gb + boff, k, n).noalias() +=
                                         CMapR<T>(pa + i * m * k, m, k).transpose() * G;
                                   }
                                 }
                               });
                             });
}

// -------------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x, int dim) {
  dim = normalize_axis(dim, x.ndim(), "softmax");
  const AxisSplit sp = split_at(x.shape(), dim);
  if (sp.extent < 1) throw ShapeError("softmax: empty axis");
  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.extent * sp.inner + i;
        T mx = px[base];
        for (std::int64_t e = 1; e < sp.extent; ++e) mx = std::max(mx, px[base + e * sp.inner]);
        T z = 0;
        for (std::int64_t e = 0; e < sp.extent; ++e) {
          const T v = std::exp(px[base + e * sp.inner] - mx);
          po[base + e * sp.inner] = v;
          z += v;
        }
        const T inv = T(1) / z;
        for (std::int64_t e = 0; e < sp.extent; ++e) po[base + e * sp.inner] *= inv;
      }
    }
  });
  return Tensor::make_result("softmax", x.shape(), std::move(out), {x}, [sp](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto y = self.data.as<T>();
      auto gx = grad_of<T>(self, 0);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.extent * sp.inner + i;
          T dot = 0;
          for (std::int64_t e = 0; e < sp.extent; ++e) {
            const auto j = base + e * sp.inner;
            dot += g[j] * y[j];
          }
          for (std::int64_t e = 0; e < sp.extent; ++e) {
            const auto j = base + e * sp.inner;
            gx[j] += y[j] * (g[j] - dot);
          }
        }
      }
    });
  });
}

// ----------------------------------------------------------------------- conv

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_ndim(input, 4, "conv2d", "input");
  require_ndim(weight, 4, "conv2d", "weight");
  require_same_dtype(input, weight, "conv2d");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t o = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: weight dimension 1 (in-channels) is " + std::to_string(weight.dim(1)) +
                     " but input has " + std::to_string(c) + " channels");
  }
  if (weight.dim(3) != k) throw ShapeError("conv2d: weight dimensions 2 and 3 must be equal (square kernel)");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit padded input dimension 2/3 " +
                     to_string(input.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_same_dtype(input, bias, "conv2d");
    if (bias.ndim() != 1 || bias.dim(0) != o) {
      throw ShapeError("conv2d: bias dimension 0 must equal out-channels " + std::to_string(o));
    }
  }
  const std::int64_t ho = (h + 2 * padding - k) / stride + 1;
  const std::int64_t wo = (w + 2 * padding - k) / stride + 1;
  const std::int64_t ckk = c * k * k, hw = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  Buffer out(input.dtype(), static_cast<std::size_t>(n * o * hw));
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = input.data<T>().data();
    CMapR<T> W(weight.data<T>().data(), o, ckk);
    T* po = out.as<T>().data();
    AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
    for (std::int64_t b = 0; b < n; ++b) {
      const T* img = px + b * c * h * w;
      const T* colp = img;
      if (!pointwise) {
        im2col(img, c, h, w, k, stride, padding, ho, wo, cols.data());
        colp = cols.data();
      }
      MapR<T> Y(po + b * o * hw, o, hw);
      Y.noalias() = W * CMapR<T>(colp, ckk, hw);
      if (has_bias) {
        auto pb = bias.data<T>();
        for (std::int64_t oc = 0; oc < o; ++oc) Y.row(oc).array() += pb[static_cast<std::size_t>(oc)];
      }
    }
  });
  std::vector<Tensor> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(
      "conv2d", {n, o, ho, wo}, std::move(out), inputs,
      [=](Node& self) {
        dispatch(self.dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* g = out_grad<T>(self).data();
          const T* px = data_of<T>(self, 0).data();
          CMapR<T> W(data_of<T>(self, 1).data(), o, ckk);
          const bool wx = wants(self, 0), ww = wants(self, 1), wb = has_bias && wants(self, 2);
          T* gx = wx ? grad_of<T>(self, 0).data() : nullptr;
          T* gw = ww ? grad_of<T>(self, 1).data() : nullptr;
          T* gb = wb ? grad_of<T>(self, 2).data() : nullptr;
          AlignedVector<T> cols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
          AlignedVector<T> gcols(pointwise || !wx ? 0 : static_cast<std::size_t>(ckk * hw));
          for (std::int64_t b = 0; b < n; ++b) {
            CMapR<T> G(g + b * o * hw, o, hw);
            const T* img = px + b * c * h * w;
            if (ww) {
              const T* colp = img;
              if (!pointwise) {
                im2col(img, c, h, w, k, stride, padding, ho, wo, cols.data());
                colp = cols.data();
              }
              MapR<T>(gw, o, ckk).noalias() += G * CMapR<T>(colp, ckk, hw).transpose();
            }
            if (wb) {
              for (std::int64_t oc = 0; oc < o; ++oc) gb[oc] += G.row(oc).sum();
            }
            if (wx) {
              T* gimg = gx + b * c * h * w;
              if (pointwise) {
                MapR<T>(gimg, ckk, hw).noalias() += W.transpose() * G;
              } else {
                MapR<T>(gcols.data(), ckk, hw).noalias() = W.transpose() * G;
                col2im(gcols.data(), c, h, w, k, stride, padding, ho, wo, gimg);
              }
            }
          }
        });
      });
}

// -------------------------------------------------------------- pool/upsample

Tensor avg_pool2(const Tensor& x) {
  require_ndim(x, 4, "avg_pool2", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0) throw ShapeError("avg_pool2: dimension 2 (height " + std::to_string(h) + ") must be even");
  if (w % 2 != 0) throw ShapeError("avg_pool2: dimension 3 (width " + std::to_string(w) + ") must be even");
  const std::int64_t ho = h / 2, wo = w / 2, planes = n * c;
  Buffer out(x.dtype(), static_cast<std::size_t>(planes * ho * wo));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = px.data() + p * h * w;
      T* dst = po.data() + p * ho * wo;
      for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
          const T* a = src + (2 * i) * w + 2 * j;
          dst[i * wo + j] = T(0.25) * (a[0] + a[1] + a[w] + a[w + 1]);
        }
      }
    }
  });
  return Tensor::make_result("avg_pool2", {n, c, ho, wo}, std::move(out), {x}, [=](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto gx = grad_of<T>(self, 0);
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * ho * wo;
        T* dst = gx.data() + p * h * w;
        for (std::int64_t i = 0; i < ho; ++i) {
          for (std::int64_t j = 0; j < wo; ++j) {
            const T v = T(0.25) * src[i * wo + j];
            T* a = dst + (2 * i) * w + 2 * j;
            a[0] += v;
            a[1] += v;
            a[w] += v;
            a[w + 1] += v;
          }
        }
      }
    });
  });
}

namespace {

// Source taps for half-pixel bilinear 2x upsampling along one axis.
struct Tap {
  std::int64_t i0, i1;
  double w1;
};

std::vector<Tap> upsample_taps(std::int64_t in) {
  std::vector<Tap> taps(static_cast<std::size_t>(2 * in));
  for (std::int64_t o = 0; o < 2 * in; ++o) {
    double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::int64_t>(std::floor(s));
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample2(const Tensor& x, UpsampleMode mode) {
  require_ndim(x, 4, "upsample2", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = 2 * h, wo = 2 * w, planes = n * c;
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  Buffer out(x.dtype(), static_cast<std::size_t>(planes * ho * wo));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* src = px.data() + p * h * w;
      T* dst = po.data() + p * ho * wo;
      for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
          if (mode == UpsampleMode::nearest) {
            dst[i * wo + j] = src[(i / 2) * w + j / 2];
          } else {
            const Tap& a = ty[static_cast<std::size_t>(i)];
            const Tap& b = tx[static_cast<std::size_t>(j)];
            const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
            dst[i * wo + j] = (1 - wy) * ((1 - wx) * src[a.i0 * w + b.i0] + wx * src[a.i0 * w + b.i1]) +
                              wy * ((1 - wx) * src[a.i1 * w + b.i0] + wx * src[a.i1 * w + b.i1]);
          }
        }
      }
    }
  });
  return Tensor::make_result("upsample2", {n, c, ho, wo}, std::move(out), {x}, [=](Node& self) {
    dispatch(self.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out_grad<T>(self);
      auto gx = grad_of<T>(self, 0);
      for (std::int64_t p = 0; p < planes; ++p) {
        const T* src = g.data() + p * ho * wo;
        T* dst = gx.data() + p * h * w;
        for (std::int64_t i = 0; i < ho; ++i) {
          for (std::int64_t j = 0; j < wo; ++j) {
            const T v = src[i * wo + j];
            if (mode == UpsampleMode::nearest) {
              dst[(i / 2) * w + j / 2] += v;
            } else {
              const Tap& a = ty[static_cast<std::size_t>(i)];
              const Tap& b = tx[static_cast<std::size_t>(j)];
              const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
              dst[a.i0 * w + b.i0] += (1 - wy) * (1 - wx) * v;
              dst[a.i0 * w + b.i1] += (1 - wy) * wx * v;
              dst[a.i1 * w + b.i0] += wy * (1 - wx) * v;
              dst[a.i1 * w + b.i1] += wy * wx * v;
            }
          }
        }
      }
    });
  });
}

// ----------------------------------------------------------------- batch norm

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, const BatchNormOptions& options) {
  require_ndim(x, 4, "batch_norm", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->ndim() != 1 || t->dim(0) != c) {
      throw ShapeError("batch_norm: parameter dimension 0 must equal channel count " + std::to_string(c));
    }
    require_same_dtype(x, *t, "batch_norm");
  }
  if (training && n < 2 && !options.instance_fallback) {
    throw ShapeError("batch_norm: training with batch size 1 requires instance_fallback");
  }
  const std::int64_t m = n * hw;
  if (training && m < 2) throw ShapeError("batch_norm: need more than one value per channel in training");

  Buffer out(x.dtype(), static_cast<std::size_t>(x.numel()));
  Buffer xhat(x.dtype(), static_cast<std::size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.as<T>();
    auto ph = xhat.as<T>();
    auto pg = gamma.data<T>();
    auto pb = beta.data<T>();
    auto rm = running_mean.mutable_data<T>();
    auto rv = running_var.mutable_data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto cu = static_cast<std::size_t>(ch);
      double mu, var;
      if (training) {
        double s = 0;
        for (std::int64_t b = 0; b < n; ++b) {
          const T* p = px.data() + (b * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) s += p[i];
        }
        mu = s / static_cast<double>(m);
        double q = 0;
        for (std::int64_t b = 0; b < n; ++b) {
          const T* p = px.data() + (b * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double d = p[i] - mu;
            q += d * d;
          }
        }
        var = q / static_cast<double>(m);
        const double mom = options.momentum;
        rm[cu] = static_cast<T>((1 - mom) * rm[cu] + mom * mu);
        rv[cu] = static_cast<T>((1 - mom) * rv[cu] + mom * var * static_cast<double>(m) / static_cast<double>(m - 1));
      } else {
        mu = rm[cu];
        var = rv[cu];
      }
      const double is = 1.0 / std::sqrt(var + options.eps);
      inv_std[cu] = is;
      for (std::int64_t b = 0; b < n; ++b) {
        const std::int64_t off = (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const T hv = static_cast<T>((px[off + i] - mu) * is);
          ph[off + i] = hv;
          po[off + i] = pg[cu] * hv + pb[cu];
        }
      }
    }
  });
  return Tensor::make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [n, c, hw, m, training, inv_std, xhat = std::move(xhat)](Node& self) {
        dispatch(self.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = out_grad<T>(self);
          auto ph = xhat.as<T>();
          auto pg = data_of<T>(self, 1);
          const bool wx = wants(self, 0), wg = wants(self, 1), wb = wants(self, 2);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto cu = static_cast<std::size_t>(ch);
            double sg = 0, sgh = 0;
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                sg += g[off + i];
                sgh += g[off + i] * ph[off + i];
              }
            }
            if (wg) grad_of<T>(self, 1)[cu] += static_cast<T>(sgh);
            if (wb) grad_of<T>(self, 2)[cu] += static_cast<T>(sg);
            if (!wx) continue;
            auto gx = grad_of<T>(self, 0);
            const double k = pg[cu] * inv_std[cu];
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                if (training) {
                  const double md = static_cast<double>(m);
                  gx[off + i] += static_cast<T>(k * (g[off + i] - sg / md - ph[off + i] * sgh / md));
                } else {
                  gx[off + i] += static_cast<T>(k * g[off + i]);
                }
              }
            }
          }
        });
      });
}

// ----------------------------------------------------------------- grid sample

Tensor grid_sample_bilinear(const Tensor& input, const Tensor& flow) {
  require_ndim(input, 4, "grid_sample_bilinear", "input");
  require_ndim(flow, 4, "grid_sample_bilinear", "flow");
  require_same_dtype(input, flow, "grid_sample_bilinear");
  if (flow.dim(0) != input.dim(0)) throw ShapeError("grid_sample_bilinear: flow dimension 0 (batch) mismatch");
  if (flow.dim(1) != 2) throw ShapeError("grid_sample_bilinear: flow dimension 1 must be 2");
  const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::int64_t ho = flow.dim(2), wo = flow.dim(3), hwo = ho * wo;

  struct Sample {
    std::int64_t x0, x1, y0, y1;
    double ax, ay;
    bool inside_x, inside_y;
  };
  auto locate = [h, w](double fx, double fy) {
    Sample s{};
    const double cx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
    const double cy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    s.x0 = static_cast<std::int64_t>(std::floor(cx));
    s.y0 = static_cast<std::int64_t>(std::floor(cy));
    s.x1 = std::min(s.x0 + 1, w - 1);
    s.y1 = std::min(s.y0 + 1, h - 1);
    s.ax = cx - static_cast<double>(s.x0);
    s.ay = cy - static_cast<double>(s.y0);
    s.inside_x = fx >= 0 && fx < static_cast<double>(w - 1);
    s.inside_y = fy >= 0 && fy < static_cast<double>(h - 1);
    return s;
  };

  Buffer out(input.dtype(), static_cast<std::size_t>(n * c * hwo));
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = input.data<T>();
    auto pf = flow.data<T>();
    auto po = out.as<T>();
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t i = 0; i < hwo; ++i) {
        const Sample s = locate(pf[(b * 2) * hwo + i], pf[(b * 2 + 1) * hwo + i]);
        const T ax = static_cast<T>(s.ax), ay = static_cast<T>(s.ay);
        const T w00 = (1 - ax) * (1 - ay), w01 = ax * (1 - ay), w10 = (1 - ax) * ay, w11 = ax * ay;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* img = px.data() + (b * c + ch) * h * w;
          po[(b * c + ch) * hwo + i] = w00 * img[s.y0 * w + s.x0] + w01 * img[s.y0 * w + s.x1] +
                                       w10 * img[s.y1 * w + s.x0] + w11 * img[s.y1 * w + s.x1];
        }
      }
    }
  });
  return Tensor::make_result(
      "grid_sample_bilinear", {n, c, ho, wo}, std::move(out), {input, flow}, [=](Node& self) {
        dispatch(self.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = out_grad<T>(self);
          auto px = data_of<T>(self, 0);
          auto pf = data_of<T>(self, 1);
          const bool wi = wants(self, 0), wf = wants(self, 1);
          std::span<T> gi, gf;
          if (wi) gi = grad_of<T>(self, 0);
          if (wf) gf = grad_of<T>(self, 1);
          for (std::int64_t b = 0; b < n; ++b) {
            for (std::int64_t i = 0; i < hwo; ++i) {
              const Sample s = locate(pf[(b * 2) * hwo + i], pf[(b * 2 + 1) * hwo + i]);
              const T ax = static_cast<T>(s.ax), ay = static_cast<T>(s.ay);
              T dfx = 0, dfy = 0;
              for (std::int64_t ch = 0; ch < c; ++ch) {
                const std::int64_t plane = (b * c + ch) * h * w;
                const T go = g[(b * c + ch) * hwo + i];
                const T v00 = px[plane + s.y0 * w + s.x0], v01 = px[plane + s.y0 * w + s.x1];
                const T v10 = px[plane + s.y1 * w + s.x0], v11 = px[plane + s.y1 * w + s.x1];
                if (wi) {
                  gi[plane + s.y0 * w + s.x0] += go * (1 - ax) * (1 - ay);
                  gi[plane + s.y0 * w + s.x1] += go * ax * (1 - ay);
                  gi[plane + s.y1 * w + s.x0] += go * (1 - ax) * ay;
                  gi[plane + s.y1 * w + s.x1] += go * ax * ay;
                }
                if (wf) {
                  dfx += go * ((1 - ay) * (v01 - v00) + ay * (v11 - v10));
                  dfy += go * ((1 - ax) * (v10 - v00) + ax * (v11 - v01));
                }
              }
              if (wf) {
                if (s.inside_x) gf[(b * 2) * hwo + i] += dfx;
                if (s.inside_y) gf[(b * 2 + 1) * hwo + i] += dfy;
              }
            }
          }
        });
      });
}

// ------------------------------------------------------------------ keypoints

Tensor coordinate_grid(std::int64_t height, std::int64_t width, DType dtype) {
  Buffer b(dtype, static_cast<std::size_t>(2 * height * width));
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      b.set(static_cast<std::size_t>(y * width + x), static_cast<double>(x));
      b.set(static_cast<std::size_t>(height * width + y * width + x), static_cast<double>(y));
    }
  }
  return Tensor::from_buffer({2, height, width}, std::move(b));
}

SoftArgmax soft_argmax2d(const Tensor& heatmap) {
  require_ndim(heatmap, 4, "soft_argmax2d", "heatmap");
  const std::int64_t n = heatmap.dim(0), k = heatmap.dim(1), h = heatmap.dim(2), w = heatmap.dim(3);
  Tensor probs = softmax(reshape(heatmap, {n, k, h * w}), 2);
  // (HW, 2) table of (x, y) per flattened position.
  Buffer table(heatmap.dtype(), static_cast<std::size_t>(2 * h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      table.set(static_cast<std::size_t>(2 * (y * w + x)), static_cast<double>(x));
      table.set(static_cast<std::size_t>(2 * (y * w + x) + 1), static_cast<double>(y));
    }
  }
  Tensor grid = Tensor::from_buffer({h * w, 2}, std::move(table));
  return {matmul(probs, grid), reshape(probs, {n, k, h, w})};
}

// --------------------------------------------------------------------- 2x2 inv

Tensor inverse2x2(const Tensor& a, double ridge, double det_floor) {
  if (a.ndim() < 2 || a.dim(-1) != 2 || a.dim(-2) != 2) {
    throw ShapeError("inverse2x2: trailing dimensions must be 2x2, got " + to_string(a.shape()));
  }
  const std::int64_t count = a.numel() / 4;
  Buffer out(a.dtype(), static_cast<std::size_t>(a.numel()));
  std::vector<double> dets(static_cast<std::size_t>(count));
  std::vector<char> clamped(static_cast<std::size_t>(count), 0);
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.as<T>();
    for (std::int64_t i = 0; i < count; ++i) {
      const double m00 = pa[4 * i] + ridge, m01 = pa[4 * i + 1];
      const double m10 = pa[4 * i + 2], m11 = pa[4 * i + 3] + ridge;
      double det = m00 * m11 - m01 * m10;
      if (std::fabs(det) < det_floor) {
        det = det < 0 ? -det_floor : det_floor;
        clamped[static_cast<std::size_t>(i)] = 1;
      }
      dets[static_cast<std::size_t>(i)] = det;
      po[4 * i] = static_cast<T>(m11 / det);
      po[4 * i + 1] = static_cast<T>(-m01 / det);
      po[4 * i + 2] = static_cast<T>(-m10 / det);
      po[4 * i + 3] = static_cast<T>(m00 / det);
    }
  });
  return Tensor::make_result("inverse2x2", a.shape(), std::move(out), {a},
                             [count, dets, clamped](Node& self) {
                               dispatch(self.dtype(), [&](auto tag) {
                                 using T = decltype(tag);
                                 auto g = out_grad<T>(self);
                                 auto inv = self.data.as<T>();
                                 auto ga = grad_of<T>(self, 0);
                                 for (std::int64_t i = 0; i < count; ++i) {
                                   const double g00 = g[4 * i], g01 = g[4 * i + 1];
                                   const double g10 = g[4 * i + 2], g11 = g[4 * i + 3];
                                   if (clamped[static_cast<std::size_t>(i)]) {
                                     const double d = dets[static_cast<std::size_t>(i)];
                                     ga[4 * i] += static_cast<T>(g11 / d);
                                     ga[4 * i + 1] += static_cast<T>(-g01 / d);
                                     ga[4 * i + 2] += static_cast<T>(-g10 / d);
                                     ga[4 * i + 3] += static_cast<T>(g00 / d);
                                     continue;
                                   }
                                   // dA = -B^T G B^T with B the inverse.
                                   const double b00 = inv[4 * i], b01 = inv[4 * i + 1];
                                   const double b10 = inv[4 * i + 2], b11 = inv[4 * i + 3];
                                   // t = G B^T
                                   const double t00 = g00 * b00 + g01 * b01, t01 = g00 * b10 + g01 * b11;
                                   const double t10 = g10 * b00 + g11 * b01, t11 = g10 * b10 + g11 * b11;
                                   ga[4 * i] -= static_cast<T>(b00 * t00 + b10 * t10);
                                   ga[4 * i + 1] -= static_cast<T>(b00 * t01 + b10 * t11);
                                   ga[4 * i + 2] -= static_cast<T>(b01 * t00 + b11 * t10);
                                   ga[4 * i + 3] -= static_cast<T>(b01 * t01 + b11 * t11);
                                 }
                               });
                             });
}

Tensor identity2x2(const Shape& leading, DType dtype) {
  Shape shape = leading;
  shape.push_back(2);
  shape.push_back(2);
  Buffer b(dtype, static_cast<std::size_t>(numel_of(shape)));
  for (std::size_t i = 0; i < b.size(); i += 4) {
    b.set(i, 1.0);
    b.set(i + 3, 1.0);
  }
  return Tensor::from_buffer(shape, std::move(b));
}

}  // namespace cpseg
