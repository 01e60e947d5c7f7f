#include "act360/eac.hpp"

#include <cmath>
#include <numbers>

#include "act360/error.hpp"
#include "act360/kernels.hpp"

namespace act360 {

Tensor adjust_kernel(const Tensor& weights, double phi) {
    if (!(phi >= -std::numbers::pi / 2 && phi <= std::numbers::pi / 2)) {
        throw ValidationError("adjust_kernel: phi outside [-pi/2, pi/2]");
    }
    const float c = static_cast<float>(std::cos(phi));
    Tensor out = weights;
    for (auto& v : out.data()) v *= c;
    return out;
}

EacKernelBank::EacKernelBank(Tensor base_weights, std::vector<float> bias, ErpGrid grid)
    : weights_(std::move(base_weights)), bias_(std::move(bias)), grid_(grid), cos_table_(cos_lat_table(grid)) {
    if (weights_.rank() != 4 || weights_.dim(2) != weights_.dim(3)) {
        throw ValidationError("EacKernelBank: weights must be [Cout,Cin,k,k], got " + shape_str(weights_.shape()));
    }
    if (weights_.dim(2) % 2 == 0) throw ValidationError("EacKernelBank: kernel size must be odd");
    if (bias_.size() != weights_.dim(0)) throw ValidationError("EacKernelBank: bias length must equal Cout");
}

Tensor EacKernelBank::effective_kernel(std::size_t row) const {
    if (row >= cos_table_.size()) throw ValidationError("effective_kernel: row out of range");
    Tensor out = weights_;
    const float c = static_cast<float>(cos_table_[row]);
    for (auto& v : out.data()) v *= c;
    return out;
}

Tensor eac_conv2d(const Tensor& input, const EacKernelBank& bank) {
    if (input.rank() != 3) throw ValidationError("eac_conv2d: input must be [Cin,H,W], got " + shape_str(input.shape()));
    if (input.dim(1) != bank.grid().height() || input.dim(2) != bank.grid().width()) {
        throw ValidationError("eac_conv2d: input spatial shape " + shape_str(input.shape()) + " does not match grid " +
                              std::to_string(bank.grid().height()) + "x" + std::to_string(bank.grid().width()));
    }
    if (input.dim(0) != bank.in_channels()) {
        throw ValidationError("eac_conv2d: Cin mismatch (input " + std::to_string(input.dim(0)) + ", bank " +
                              std::to_string(bank.in_channels()) + ")");
    }
    Tensor out = kernels::conv2d<float>(input, bank.base_weights(), nullptr, PaddingRule::WrapClamp);
    const std::size_t cout = out.dim(0), h = out.dim(1), w = out.dim(2);
    const auto rows = bank.row_scales<float>();
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                auto& v = out[(co * h + y) * w + x];
                v = v * rows[y] + bank.bias()[co];
            }
    return out;
}

template <typename T>
Var<T> eac_conv2d(Var<T> input, Var<T> base_weights, Var<T> bias, const ErpGrid& grid) {
    const auto& shape = input.shape();
    if (shape.size() != 3 || shape[1] != grid.height() || shape[2] != grid.width()) {
        throw ValidationError("eac_conv2d: input shape " + shape_str(shape) + " does not match grid " +
                              std::to_string(grid.height()) + "x" + std::to_string(grid.width()));
    }
    const auto table = cos_lat_table(grid);
    return ad::eac_conv2d<T>(input, base_weights, bias, std::vector<T>(table.begin(), table.end()));
}

template Var<float> eac_conv2d<float>(Var<float>, Var<float>, Var<float>, const ErpGrid&);
template Var<double> eac_conv2d<double>(Var<double>, Var<double>, Var<double>, const ErpGrid&);

}  // namespace act360
