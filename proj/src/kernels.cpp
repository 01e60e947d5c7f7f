#include "act360/kernels.hpp"

#include "act360/error.hpp"

namespace act360::kernels {

template <typename T>
std::vector<T> pad_input(std::span<const T> in, std::size_t c, std::size_t h, std::size_t w,
                         std::size_t r, PaddingRule pad) {
    const std::size_t ph = h + 2 * r, pw = w + 2 * r;
    std::vector<T> out(c * ph * pw, T{0});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = in.data() + ch * h * w;
        T* dst = out.data() + ch * ph * pw;
        for (std::size_t py = 0; py < ph; ++py) {
            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(r);
            if (pad == PaddingRule::Zero) {
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            } else {
                sy = sy < 0 ? 0 : (sy >= static_cast<std::ptrdiff_t>(h) ? static_cast<std::ptrdiff_t>(h) - 1 : sy);
            }
            const T* row = src + static_cast<std::size_t>(sy) * w;
            T* prow = dst + py * pw;
            for (std::size_t x = 0; x < w; ++x) prow[x + r] = row[x];
            if (pad == PaddingRule::WrapClamp) {
                for (std::size_t j = 0; j < r; ++j) {
                    prow[j] = row[(w - r + j) % w];
                    prow[r + w + j] = row[j % w];
                }
            }
        }
    }
    return out;
}

template <typename T>
void unpad_accumulate(std::span<const T> padded, std::size_t c, std::size_t h, std::size_t w,
                      std::size_t r, PaddingRule pad, std::span<T> grad_in) {
    const std::size_t ph = h + 2 * r, pw = w + 2 * r;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = padded.data() + ch * ph * pw;
        T* dst = grad_in.data() + ch * h * w;
        for (std::size_t py = 0; py < ph; ++py) {
            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(r);
            if (pad == PaddingRule::Zero) {
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            } else {
                sy = sy < 0 ? 0 : (sy >= static_cast<std::ptrdiff_t>(h) ? static_cast<std::ptrdiff_t>(h) - 1 : sy);
            }
            const T* prow = src + py * pw;
            T* row = dst + static_cast<std::size_t>(sy) * w;
            for (std::size_t x = 0; x < w; ++x) row[x] += prow[x + r];
            if (pad == PaddingRule::WrapClamp) {
                for (std::size_t j = 0; j < r; ++j) {
                    row[(w - r + j) % w] += prow[j];
                    row[j % w] += prow[r + w + j];
                }
            }
        }
    }
}

template <typename T>
void conv2d_forward(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w,
                    std::span<const T> weight, std::size_t cout, std::size_t k, std::span<T> out) {
    const std::size_t pw = w + k - 1, ph = h + k - 1;
    for (std::size_t co = 0; co < cout; ++co) {
        T* plane = out.data() + co * h * w;
        std::fill(plane, plane + h * w, T{0});
        const T* wco = weight.data() + co * cin * k * k;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* pin = padded.data() + ci * ph * pw;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T wv = wco[(ci * k + ky) * k + kx];
                    if (wv == T{0}) continue;
                    for (std::size_t y = 0; y < h; ++y) {
                        const T* src = pin + (y + ky) * pw + kx;
                        T* dst = plane + y * w;
                        for (std::size_t x = 0; x < w; ++x) dst[x] += wv * src[x];
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w,
                     std::span<const T> weight, std::size_t cout, std::size_t k,
                     std::span<const T> grad_out, std::span<T> grad_padded,
                     std::span<T> grad_weight) {
    const std::size_t pw = w + k - 1, ph = h + k - 1;
    for (std::size_t co = 0; co < cout; ++co) {
        const T* g = grad_out.data() + co * h * w;
        const T* wco = weight.data() + co * cin * k * k;
        T* gwco = grad_weight.data() + co * cin * k * k;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* pin = padded.data() + ci * ph * pw;
            T* gpin = grad_padded.data() + ci * ph * pw;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const T wv = wco[(ci * k + ky) * k + kx];
                    T acc{0};
                    for (std::size_t y = 0; y < h; ++y) {
                        const T* src = pin + (y + ky) * pw + kx;
                        const T* grow = g + y * w;
                        T* gdst = gpin + (y + ky) * pw + kx;
                        for (std::size_t x = 0; x < w; ++x) {
                            acc += grow[x] * src[x];
                            gdst[x] += wv * grow[x];
                        }
                    }
                    gwco[(ci * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias, PaddingRule pad) {
    if (input.rank() != 3) throw ValidationError("conv2d: input must be [Cin,H,W], got " + shape_str(input.shape()));
    if (weight.rank() != 4) throw ValidationError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin) {
        throw ValidationError("conv2d: Cin mismatch (input " + std::to_string(cin) + ", weight " +
                              std::to_string(weight.dim(1)) + ")");
    }
    if (weight.dim(3) != k || k % 2 == 0) throw ValidationError("conv2d: kernel must be square with odd k");
    if (bias && bias->size() != cout) throw ValidationError("conv2d: bias length must equal Cout");
    auto padded = pad_input<T>(input.data(), cin, h, w, k / 2, pad);
    BasicTensor<T> out({cout, h, w});
    conv2d_forward<T>(padded, cin, h, w, weight.data(), cout, k, out.data());
    if (bias) {
        auto o = out.data();
        for (std::size_t co = 0; co < cout; ++co) {
            const T b = (*bias)[co];
            for (std::size_t i = 0; i < h * w; ++i) o[co * h * w + i] += b;
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> max_pool2(const BasicTensor<T>& input, std::vector<std::size_t>* argmax) {
    if (input.rank() != 3) throw ValidationError("max_pool2: input must be [C,H,W]");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 || w % 2) throw ValidationError("max_pool2: H and W must be even, got " + shape_str(input.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    BasicTensor<T> out({c, oh, ow});
    if (argmax) argmax->assign(c * oh * ow, 0);
    auto in = input.data();
    auto o = out.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                std::size_t best = ch * h * w + (2 * y) * w + 2 * x;
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (auto idx : cand) {
                    if (in[idx] > in[best]) best = idx;
                }
                const std::size_t oi = (ch * oh + y) * ow + x;
                o[oi] = in[best];
                if (argmax) (*argmax)[oi] = best;
            }
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> temporal_conv(const BasicTensor<T>& clip, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias) {
    if (clip.rank() != 4) throw ValidationError("temporal_conv: clip must be [T,C,H,W]");
    const std::size_t t = clip.dim(0), c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    if (weight.rank() != 2 || weight.dim(0) != c || weight.dim(1) != t) {
        throw ValidationError("temporal_conv: weight must be [C,T] = [" + std::to_string(c) + "," +
                              std::to_string(t) + "], got " + shape_str(weight.shape()));
    }
    if (bias.size() != c) throw ValidationError("temporal_conv: bias length must equal C");
    BasicTensor<T> out({c, h, w});
    auto o = out.data();
    auto in = clip.data();
    const std::size_t plane = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        T* dst = o.data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = T{0};
        for (std::size_t f = 0; f < t; ++f) {
            const T wv = weight[ch * t + f];
            if (wv == T{0}) continue;
            const T* src = in.data() + (f * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * src[i];
        }
        const T b = bias[ch];
        for (std::size_t i = 0; i < plane; ++i) dst[i] += b;
    }
    return out;
}

#define ACT360_INSTANTIATE(T)                                                                           \
    template std::vector<T> pad_input<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,   \
                                         std::size_t, PaddingRule);                                     \
    template void unpad_accumulate<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,       \
                                      std::size_t, PaddingRule, std::span<T>);                          \
    template void conv2d_forward<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,         \
                                    std::span<const T>, std::size_t, std::size_t, std::span<T>);       \
    template void conv2d_backward<T>(std::span<const T>, std::size_t, std::size_t, std::size_t,        \
                                     std::span<const T>, std::size_t, std::size_t, std::span<const T>, \
                                     std::span<T>, std::span<T>);                                      \
    template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                      const BasicTensor<T>*, PaddingRule);                              \
    template BasicTensor<T> max_pool2<T>(const BasicTensor<T>&, std::vector<std::size_t>*);            \
    template BasicTensor<T> temporal_conv<T>(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                             const BasicTensor<T>&);

ACT360_INSTANTIATE(float)
ACT360_INSTANTIATE(double)

#undef ACT360_INSTANTIATE

}  // namespace act360::kernels
