#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace act360 {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor. Every extent is at least one; a default tensor is
/// the scalar 0 with shape {1}.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor();
    explicit BasicTensor(Shape shape, T fill = T{0});
    BasicTensor(Shape shape, std::vector<T> data);

    static BasicTensor scalar(T value) { return BasicTensor({1}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> data() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    /// Multi-index access; the index count must equal rank().
    T at(std::initializer_list<std::size_t> index) const;
    T& at(std::initializer_list<std::size_t> index);

    /// Sub-tensor along axis 0 (copy), e.g. one frame of a clip.
    BasicTensor slice0(std::size_t i) const;
    BasicTensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;
    T item() const;

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Signed 8-bit payload with a shape; produced by quantization.
struct Int8Tensor {
    Shape shape;
    std::vector<std::int8_t> data;
};

/// Horizontal padding mode for same-size convolutions. Vertical edges are
/// either zero or clamped to the border row.
enum class PaddingRule { Zero, WrapClamp };

/// Naive quadruple-loop same-size convolution (stride 1, odd k). Serves as the
/// reference that faster kernels are checked against.
Tensor conv2d_reference(const Tensor& input, const Tensor& kernels, PaddingRule pad);

}  // namespace act360
