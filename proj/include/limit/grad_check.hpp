#pragma once

#include "limit/tensor.hpp"

#include <functional>
#include <vector>

namespace limit {

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` must rebuild its graph on every call and be deterministic
/// (dropout off). Returns the largest per-component
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over all parameters.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5);

}  // namespace limit
