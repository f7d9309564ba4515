#include <doctest.h>

#include <cstdio>

#include "cpseg/gradcheck.hpp"

using namespace cpseg;

namespace {

void run_suite(DType dtype) {
  const auto opts = default_gradcheck_options(dtype);
  for (const auto& r : run_gradient_suite(dtype, 20, 7, opts)) {
    CAPTURE(r.name);
    CAPTURE(r.max_error);
    CHECK(r.instances >= 20);
    CHECK(r.passed);
  }
}

}  // namespace

TEST_CASE("finite differences agree with backward in 64-bit") { run_suite(DType::f64); }

TEST_CASE("finite differences agree with backward in 32-bit") { run_suite(DType::f32); }
