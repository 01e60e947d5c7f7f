#pragma once

#include <functional>
#include <map>
#include <string>

#include "act360/autodiff.hpp"
#include "act360/gradcheck.hpp"
#include "act360/rng.hpp"
#include "act360/tensor.hpp"

namespace act360::testing {

template <typename T = float>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

using Inputs = std::map<std::string, TensorD>;
using LossBuilder = std::function<Var<double>(Tape<double>&, std::map<std::string, Var<double>>&)>;

/// Largest relative error between tape gradients and central differences over
/// every named input.
inline double worst_grad_error(const Inputs& inputs, const LossBuilder& build, double eps = 1e-5) {
    Tape<double> tape;
    std::map<std::string, Var<double>> vars;
    for (const auto& [name, value] : inputs) vars[name] = tape.parameter(name, value);
    auto grads = tape.backward(build(tape, vars));

    double worst = 0.0;
    for (const auto& [name, value] : inputs) {
        auto f = [&, name = name](const TensorD& probe) {
            Tape<double> t2;
            std::map<std::string, Var<double>> v2;
            for (const auto& [n, v] : inputs) v2[n] = t2.constant(n == name ? probe : v);
            return build(t2, v2).value()[0];
        };
        TensorD numeric = finite_diff_grad(f, value, eps);
        worst = std::max(worst, gradient_relative_error(grads.at(name), numeric));
    }
    return worst;
}

}  // namespace act360::testing
