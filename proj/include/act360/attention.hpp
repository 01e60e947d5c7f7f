#pragma once

#include "act360/autodiff.hpp"
#include "act360/erp.hpp"
#include "act360/tensor.hpp"

namespace act360 {

inline constexpr double kDefaultErpCap = 8.0;

/// Motion gate projection: a 1x1 convolution from the concatenation
/// [F_t || F_prev] (2C channels) to one attention channel.
struct AttentionParams {
    Tensor weight;  // [1, 2C, 1, 1]
    float bias = 0.0f;
    double erp_cap = kDefaultErpCap;

    /// Validates erp_cap >= 1 and the projection shape against a channel count.
    void check(std::size_t feature_channels) const;
};

/// 1/cos(phi), clamped at cap. Rejects exact poles.
double erp_attention_at_latitude(double phi, double cap);

/// Per-row distortion map A_ERP as a [1,H,1] tensor, entries min(1/cos, cap).
/// Grids whose rows include an exact pole (Eq1Exact) are rejected.
Tensor erp_attention_map(const ErpGrid& grid, double cap);

/// sigma(W_d [F_t || F_prev] + b): [1,H,W], every element in (0,1).
Tensor motion_gate(const Tensor& f_t, const Tensor& f_prev, const AttentionParams& params);

/// features * (motion_gate * A_ERP), the combined map broadcast over channels.
Tensor apply_attention(const Tensor& features, const Tensor& f_prev, const ErpGrid& grid,
                       const AttentionParams& params);

/// Combined map A_final = gate * A_ERP as [1,H,W]; exposed for inspection.
Tensor attention_final_map(const Tensor& features, const Tensor& f_prev, const ErpGrid& grid,
                           const AttentionParams& params);

/// Tape-recorded apply_attention; the projection weight/bias are variables.
template <typename T>
Var<T> apply_attention(Var<T> features, Var<T> f_prev, Var<T> weight, Var<T> bias, const ErpGrid& grid, double cap);

/// Row factors min(1/cos, cap) for a pixel-center grid, in the requested precision.
template <typename T>
std::vector<T> erp_row_factors(const ErpGrid& grid, double cap);

}  // namespace act360
