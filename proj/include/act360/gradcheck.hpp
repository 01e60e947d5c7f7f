#pragma once

#include <functional>

#include "act360/tensor.hpp"

namespace act360 {

/// Central-difference gradient of a scalar function:
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element i.
TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, const TensorD& x, double eps);

/// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|, floor). This is the
/// relative error used by all gradient checks in the project.
double gradient_relative_error(const TensorD& analytic, const TensorD& numeric, double floor = 1e-8);

}  // namespace act360
