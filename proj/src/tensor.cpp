#include "act360/tensor.hpp"

#include <cmath>
#include <sstream>

#include "act360/error.hpp"

namespace act360 {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    if (shape.empty()) throw ValidationError("tensor shape must have rank >= 1");
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == 0) {
            throw ValidationError("tensor extent " + std::to_string(i) + " is zero in shape " +
                                  shape_str(shape));
        }
    }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor() : shape_{1}, data_(1, T{0}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_str(shape_));
    }
}

template <typename T>
std::size_t BasicTensor<T>::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw ValidationError("index rank " + std::to_string(index.size()) +
                              " does not match tensor rank " + std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) {
            throw ValidationError("index " + std::to_string(i) + " out of range on axis " +
                                  std::to_string(axis));
        }
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
    return data_[offset(index)];
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
    return data_[offset(index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::slice0(std::size_t i) const {
    if (shape_.size() < 2) throw ValidationError("slice0 needs rank >= 2");
    if (i >= shape_[0]) throw ValidationError("slice0 index out of range");
    Shape sub(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_numel(sub);
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(i * n),
                       data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return BasicTensor(std::move(sub), std::move(out));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
    for (auto v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (data_.size() != 1) throw ValidationError("item() on a tensor with " +
                                                 std::to_string(data_.size()) + " elements");
    return data_[0];
}

template class BasicTensor<float>;
template class BasicTensor<double>;

Tensor conv2d_reference(const Tensor& input, const Tensor& kernels, PaddingRule pad) {
    if (input.rank() != 3) throw ValidationError("conv2d_reference: input must be [Cin,H,W], got " +
                                                 shape_str(input.shape()));
    if (kernels.rank() != 4) {
        throw ValidationError("conv2d_reference: kernels must be [Cout,Cin,k,k], got " +
                              shape_str(kernels.shape()));
    }
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
    if (kernels.dim(1) != cin) {
        throw ValidationError("conv2d_reference: Cin mismatch (input " + std::to_string(cin) +
                              ", kernels " + std::to_string(kernels.dim(1)) + ")");
    }
    if (kernels.dim(3) != k) throw ValidationError("conv2d_reference: kernel must be square (k)");
    if (k % 2 == 0) throw ValidationError("conv2d_reference: kernel size k must be odd");

    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);
    Tensor out({cout, h, w});
    for (std::size_t co = 0; co < cout; ++co) {
        for (std::ptrdiff_t y = 0; y < hh; ++y) {
            for (std::ptrdiff_t x = 0; x < ww; ++x) {
                float acc = 0.0f;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(k); ++ky) {
                        for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(k); ++kx) {
                            std::ptrdiff_t sy = y + ky - r;
                            std::ptrdiff_t sx = x + kx - r;
                            float v;
                            if (pad == PaddingRule::Zero) {
                                if (sy < 0 || sy >= hh || sx < 0 || sx >= ww) continue;
                                v = input.at({ci, static_cast<std::size_t>(sy),
                                              static_cast<std::size_t>(sx)});
                            } else {
                                sy = sy < 0 ? 0 : (sy >= hh ? hh - 1 : sy);
                                sx = ((sx % ww) + ww) % ww;
                                v = input.at({ci, static_cast<std::size_t>(sy),
                                              static_cast<std::size_t>(sx)});
                            }
                            acc += kernels.at({co, ci, static_cast<std::size_t>(ky),
                                               static_cast<std::size_t>(kx)}) *
                                   v;
                        }
                    }
                }
                out.at({co, static_cast<std::size_t>(y), static_cast<std::size_t>(x)}) = acc;
            }
        }
    }
    return out;
}

}  // namespace act360
