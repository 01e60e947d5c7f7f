#include "act360/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "act360/error.hpp"

namespace act360 {

TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, const TensorD& x, double eps) {
    if (!(eps > 0.0)) throw ValidationError("finite_diff_grad: eps must be positive");
    TensorD grad(x.shape(), 0.0);
    TensorD probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw RuntimeFailure("finite_diff_grad: f returned a non-finite value at element " + std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

double gradient_relative_error(const TensorD& analytic, const TensorD& numeric, double floor) {
    if (analytic.shape() != numeric.shape()) throw ValidationError("gradient_relative_error: shape mismatch");
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    return diff / scale;
}

}  // namespace act360
