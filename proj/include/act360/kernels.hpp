#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "act360/tensor.hpp"

// Fast-path numeric kernels shared by the differentiation tape and the
// inference engines. Accumulation order per output element is always
// (input channel, kernel row, kernel column), matching conv2d_reference.
namespace act360::kernels {

/// Copies a [C,H,W] tensor into a [C,H+2r,W+2r] buffer using the padding rule.
template <typename T>
std::vector<T> pad_input(std::span<const T> in, std::size_t c, std::size_t h, std::size_t w,
                         std::size_t r, PaddingRule pad);

/// Folds a padded-layout gradient back onto the unpadded input gradient.
template <typename T>
void unpad_accumulate(std::span<const T> padded, std::size_t c, std::size_t h, std::size_t w,
                      std::size_t r, PaddingRule pad, std::span<T> grad_in);

/// Same-size stride-1 convolution without bias: out[Cout,H,W].
/// Zero weights are skipped, which is what makes pruned layers cheaper.
template <typename T>
void conv2d_forward(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w,
                    std::span<const T> weight, std::size_t cout, std::size_t k, std::span<T> out);

/// Gradients of conv2d_forward. grad_padded is accumulated (same layout as
/// pad_input output), grad_weight is accumulated.
template <typename T>
void conv2d_backward(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w,
                     std::span<const T> weight, std::size_t cout, std::size_t k,
                     std::span<const T> grad_out, std::span<T> grad_padded,
                     std::span<T> grad_weight);

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias, PaddingRule pad);

/// 2x2 stride-2 max pool; argmax receives the flat input index of each output.
template <typename T>
BasicTensor<T> max_pool2(const BasicTensor<T>& input, std::vector<std::size_t>* argmax);

/// Depthwise convolution over the frame axis: clip[T,C,H,W], w[C,T], b[C] -> [C,H,W].
template <typename T>
BasicTensor<T> temporal_conv(const BasicTensor<T>& clip, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias);

template <typename T>
T sigmoid(T x) {
    if (x >= T{0}) {
        T e = std::exp(-x);
        return T{1} / (T{1} + e);
    }
    T e = std::exp(x);
    return e / (T{1} + e);
}

/// Numerically stable log(1 + exp(x)).
template <typename T>
T softplus(T x) {
    return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace act360::kernels
