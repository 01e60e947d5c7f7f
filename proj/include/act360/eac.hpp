#pragma once

#include <vector>

#include "act360/autodiff.hpp"
#include "act360/erp.hpp"
#include "act360/tensor.hpp"

namespace act360 {

/// W'(phi) = W cos(phi), element-wise.
Tensor adjust_kernel(const Tensor& weights, double phi);

/// Base convolution weights with a per-row latitude scale. The effective
/// kernel at row y is base_weights * cos_table[y]; the bias is not scaled.
class EacKernelBank {
public:
    EacKernelBank(Tensor base_weights, std::vector<float> bias, ErpGrid grid);

    const Tensor& base_weights() const noexcept { return weights_; }
    const std::vector<float>& bias() const noexcept { return bias_; }
    const ErpGrid& grid() const noexcept { return grid_; }
    const std::vector<double>& cos_table() const noexcept { return cos_table_; }
    std::size_t out_channels() const { return weights_.dim(0); }
    std::size_t in_channels() const { return weights_.dim(1); }
    std::size_t kernel_size() const { return weights_.dim(2); }

    /// Per-row factors in the requested precision.
    template <typename T>
    std::vector<T> row_scales() const {
        return std::vector<T>(cos_table_.begin(), cos_table_.end());
    }

    /// Materialized kernel for one row (testing aid; eac_conv2d never builds it).
    Tensor effective_kernel(std::size_t row) const;

private:
    Tensor weights_;
    std::vector<float> bias_;
    ErpGrid grid_;
    std::vector<double> cos_table_;
};

/// Equirectangular-aware convolution with wrap/clamp padding: one standard
/// convolution, each output row scaled by cos_table[y], then bias.
Tensor eac_conv2d(const Tensor& input, const EacKernelBank& bank);

/// Tape-recorded variant; gradients reach both the input and base weights.
template <typename T>
Var<T> eac_conv2d(Var<T> input, Var<T> base_weights, Var<T> bias, const ErpGrid& grid);

}  // namespace act360
