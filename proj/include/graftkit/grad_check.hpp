#pragma once

#include <cstdint>
#include <functional>

#include "graftkit/tensor.hpp"

namespace graftkit {

struct GradCheckResult {
  bool pass = false;
  // max over checked coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
  double max_error = 0.0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
};

// Compares the tape gradient of scalar f at x against central differences.
// x must be 64-bit.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-5, double tol = 1e-4);

// Same check against an existing leaf (e.g. a model parameter) that `f` reads
// implicitly. The leaf is perturbed in place and restored. When max_coords > 0
// only that many coordinates, drawn from `seed`, are differenced.
GradCheckResult grad_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double h = 1e-5,
                                double tol = 1e-4, std::int64_t max_coords = 0,
                                std::uint64_t seed = 0);

}  // namespace graftkit
