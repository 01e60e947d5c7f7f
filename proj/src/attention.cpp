#include "act360/attention.hpp"

#include <algorithm>
#include <cmath>

#include "act360/error.hpp"
#include "act360/kernels.hpp"

namespace act360 {

void AttentionParams::check(std::size_t feature_channels) const {
    if (!(erp_cap >= 1.0)) throw ValidationError("attention: erp_cap must be >= 1");
    const auto& s = weight.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 2 * feature_channels || s[2] != 1 || s[3] != 1) {
        throw ValidationError("attention: projection must be [1," + std::to_string(2 * feature_channels) +
                              ",1,1], got " + shape_str(s));
    }
}

double erp_attention_at_latitude(double phi, double cap) {
    if (!(cap >= 1.0)) throw ValidationError("erp attention: cap must be >= 1");
    const double c = std::cos(phi);
    if (!(std::abs(c) > 1e-12)) throw ValidationError("erp attention: latitude is a pole (1/cos undefined)");
    return std::min(1.0 / c, cap);
}

template <typename T>
std::vector<T> erp_row_factors(const ErpGrid& grid, double cap) {
    std::vector<T> rows(grid.height());
    for (std::size_t y = 0; y < grid.height(); ++y) {
        rows[y] = static_cast<T>(erp_attention_at_latitude(latitude_of_row(grid, static_cast<double>(y)), cap));
    }
    return rows;
}

template std::vector<float> erp_row_factors<float>(const ErpGrid&, double);
template std::vector<double> erp_row_factors<double>(const ErpGrid&, double);

Tensor erp_attention_map(const ErpGrid& grid, double cap) {
    auto rows = erp_row_factors<float>(grid, cap);
    return Tensor({1, grid.height(), 1}, std::move(rows));
}

namespace {

void check_pair(const Tensor& f_t, const Tensor& f_prev) {
    if (f_t.rank() != 3) throw ValidationError("attention: features must be [C,H,W], got " + shape_str(f_t.shape()));
    if (f_t.shape() != f_prev.shape()) {
        throw ValidationError("attention: F_t " + shape_str(f_t.shape()) + " and F_prev " + shape_str(f_prev.shape()) +
                              " differ");
    }
}

}  // namespace

Tensor motion_gate(const Tensor& f_t, const Tensor& f_prev, const AttentionParams& params) {
    check_pair(f_t, f_prev);
    params.check(f_t.dim(0));
    std::vector<float> cat(f_t.data().begin(), f_t.data().end());
    cat.insert(cat.end(), f_prev.data().begin(), f_prev.data().end());
    Tensor joined({2 * f_t.dim(0), f_t.dim(1), f_t.dim(2)}, std::move(cat));
    Tensor bias({1}, params.bias);
    Tensor gate = kernels::conv2d<float>(joined, params.weight, &bias, PaddingRule::WrapClamp);
    for (auto& v : gate.data()) v = kernels::sigmoid(v);
    return gate;
}

Tensor attention_final_map(const Tensor& features, const Tensor& f_prev, const ErpGrid& grid,
                           const AttentionParams& params) {
    Tensor gate = motion_gate(features, f_prev, params);
    if (features.dim(1) != grid.height() || features.dim(2) != grid.width()) {
        throw ValidationError("attention: feature map " + shape_str(features.shape()) + " does not match grid");
    }
    const auto rows = erp_row_factors<float>(grid, params.erp_cap);
    const std::size_t h = gate.dim(1), w = gate.dim(2);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) gate[y * w + x] *= rows[y];
    return gate;
}

Tensor apply_attention(const Tensor& features, const Tensor& f_prev, const ErpGrid& grid,
                       const AttentionParams& params) {
    Tensor map = attention_final_map(features, f_prev, grid, params);
    Tensor out = features;
    const std::size_t c = out.dim(0), plane = out.dim(1) * out.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] *= map[i];
    return out;
}

template <typename T>
Var<T> apply_attention(Var<T> features, Var<T> f_prev, Var<T> weight, Var<T> bias, const ErpGrid& grid, double cap) {
    const auto& fs = features.shape();
    if (fs.size() != 3 || fs[1] != grid.height() || fs[2] != grid.width()) {
        throw ValidationError("attention: feature map " + shape_str(fs) + " does not match grid");
    }
    auto joined = ad::concat_channels(features, f_prev);
    auto gate = ad::sigmoid(ad::conv2d(joined, weight, bias, PaddingRule::WrapClamp));
    auto final_map = ad::scale_rows(gate, erp_row_factors<T>(grid, cap));
    return ad::mul_channel_broadcast(features, final_map);
}

template Var<float> apply_attention<float>(Var<float>, Var<float>, Var<float>, Var<float>, const ErpGrid&, double);
template Var<double> apply_attention<double>(Var<double>, Var<double>, Var<double>, Var<double>, const ErpGrid&,
                                             double);

}  // namespace act360
