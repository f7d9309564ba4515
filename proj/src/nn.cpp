#include "cpseg/nn.hpp"

namespace cpseg::nn {

void add_conv(ParamStore& store, Rng& rng, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
              DType dtype) {
  store.add(name + ".w", he_normal(rng, {out, in, kernel, kernel}, dtype));
  store.add(name + ".b", Tensor::zeros({out}, dtype));
}

Tensor conv(ParamStore& store, const std::string& name, const Tensor& x, int stride) {
  const Tensor& w = store.get(name + ".w");
  const int pad = static_cast<int>(w.dim(2) / 2);
  return conv2d(x, w, store.get(name + ".b"), stride, pad);
}

void add_bn(ParamStore& store, const std::string& name, std::int64_t channels, DType dtype) {
  store.add(name + ".gamma", Tensor::full({channels}, 1.0, dtype));
  store.add(name + ".beta", Tensor::zeros({channels}, dtype));
  store.add(name + ".running_mean", Tensor::zeros({channels}, dtype), false);
  store.add(name + ".running_var", Tensor::full({channels}, 1.0, dtype), false);
}

Tensor bn(ParamStore& store, const std::string& name, const Tensor& x, const Mode& mode) {
  return batch_norm(x, store.get(name + ".gamma"), store.get(name + ".beta"), store.get(name + ".running_mean"),
                    store.get(name + ".running_var"), mode.training, mode.bn);
}

void add_conv_bn(ParamStore& store, Rng& rng, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                 DType dtype) {
  add_conv(store, rng, name + ".conv", in, out, kernel, dtype);
  add_bn(store, name + ".bn", out, dtype);
}

Tensor conv_bn_relu(ParamStore& store, const std::string& name, const Tensor& x, const Mode& mode, int stride) {
  return relu(bn(store, name + ".bn", conv(store, name + ".conv", x, stride), mode));
}

}  // namespace cpseg::nn
