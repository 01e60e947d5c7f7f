#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "act360/tensor.hpp"

namespace act360 {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of differentiable operations for one forward pass.
/// Reverse replay (backward) is allowed exactly once.
template <typename T>
class Tape {
public:
    using TensorT = BasicTensor<T>;
    /// Receives the gradient of the node's output and accumulates into inputs
    /// via Tape::grad_of.
    using BackwardFn = std::function<void(Tape&, const TensorT& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(TensorT value);
    Var<T> parameter(const std::string& name, TensorT value);

    /// Records an operation output. requires_grad is inherited from inputs.
    Var<T> record(TensorT value, const std::vector<Var<T>>& inputs, BackwardFn backward);

    const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    /// Gradient buffer for a node, zero-initialised on first access.
    TensorT& grad_of(std::size_t id);

    /// Gradients of a scalar loss for every registered parameter; parameters
    /// the loss does not reach get zeros.
    std::map<std::string, TensorT> backward(Var<T> loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    bool replayed() const noexcept { return replayed_; }

private:
    struct Node {
        TensorT value;
        std::optional<TensorT> grad;
        BackwardFn backward;
        bool requires_grad = false;
        std::string param_name;
    };
    std::vector<Node> nodes_;
    std::vector<std::size_t> params_;
    bool replayed_ = false;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

// The fixed differentiable operator set.
namespace ad {

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, PaddingRule pad);

/// Convolution whose output row y is scaled by row_scale[y] before the bias
/// is added (equirectangular-aware convolution).
template <typename T>
Var<T> eac_conv2d(Var<T> x, Var<T> weight, Var<T> bias, const std::vector<T>& row_scale);

/// x flattened to N, weight [M,N], bias [M] -> [M].
template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
/// [Ca,H,W] ++ [Cb,H,W] -> [Ca+Cb,H,W].
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T>
Var<T> max_pool2(Var<T> x);
/// clip[T,C,H,W] collapsed over T with per-channel frame weights [C,T].
template <typename T>
Var<T> temporal_conv(Var<T> clip, Var<T> weight, Var<T> bias);
/// logits [N,K], one label per row; summed over rows.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels);
/// Sum of smooth-L1 (beta = 1) between pred and a constant target.
template <typename T>
Var<T> smooth_l1(Var<T> pred, const BasicTensor<T>& target);

/// Scalar sum of all elements.
template <typename T>
Var<T> sum(Var<T> x);
/// x[C,H,W] times a single-channel map [1,H,W] broadcast over channels.
template <typename T>
Var<T> mul_channel_broadcast(Var<T> x, Var<T> map);
/// x[C,H,W] times a constant per-row factor.
template <typename T>
Var<T> scale_rows(Var<T> x, const std::vector<T>& rows);

}  // namespace ad

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace act360
