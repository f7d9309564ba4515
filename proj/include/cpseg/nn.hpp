#pragma once

// Named-parameter layer helpers shared by the networks.

#include <string>

#include "cpseg/ops.hpp"
#include "cpseg/params.hpp"

namespace cpseg::nn {

struct Mode {
  bool training = false;
  BatchNormOptions bn;
};

void add_conv(ParamStore& store, Rng& rng, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
              DType dtype);
Tensor conv(ParamStore& store, const std::string& name, const Tensor& x, int stride = 1);

void add_bn(ParamStore& store, const std::string& name, std::int64_t channels, DType dtype);
Tensor bn(ParamStore& store, const std::string& name, const Tensor& x, const Mode& mode);

// conv -> bn -> relu
void add_conv_bn(ParamStore& store, Rng& rng, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                 DType dtype);
Tensor conv_bn_relu(ParamStore& store, const std::string& name, const Tensor& x, const Mode& mode, int stride = 1);

}  // namespace cpseg::nn
