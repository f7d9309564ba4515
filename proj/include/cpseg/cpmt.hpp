#pragma once

// CPMT binary tensor container:
//   "CPMT" | u8 version (1) | u8 dtype (1 = f32, 2 = f64) | u32 ndim |
//   ndim x u64 dims | row-major payload, all little-endian.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "cpseg/tensor.hpp"

namespace cpseg {

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace cpseg
