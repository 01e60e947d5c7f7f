#include "act360/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "act360/error.hpp"
#include "act360/kernels.hpp"

namespace act360 {

template <typename T>
Var<T> Tape<T>::constant(TensorT value) {
    if (replayed_) throw ValidationError("tape already replayed; record a new forward pass");
    nodes_.push_back(Node{std::move(value), std::nullopt, {}, false, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(const std::string& name, TensorT value) {
    if (replayed_) throw ValidationError("tape already replayed; record a new forward pass");
    for (auto id : params_) {
        if (nodes_[id].param_name == name) throw ValidationError("parameter '" + name + "' registered twice");
    }
    nodes_.push_back(Node{std::move(value), std::nullopt, {}, true, name});
    params_.push_back(nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(TensorT value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    if (replayed_) throw ValidationError("tape already replayed; record a new forward pass");
    bool rg = false;
    for (const auto& in : inputs) {
        if (&in.tape() != this) throw ValidationError("operation mixes values from different tapes");
        rg = rg || nodes_[in.id()].requires_grad;
    }
    if (!value.all_finite()) throw RuntimeFailure("non-finite value produced on tape");
    nodes_.push_back(Node{std::move(value), std::nullopt, rg ? std::move(backward) : BackwardFn{}, rg, {}});
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
BasicTensor<T>& Tape<T>::grad_of(std::size_t id) {
    auto& node = nodes_.at(id);
    if (!node.grad) node.grad.emplace(node.value.shape(), T{0});
    return *node.grad;
}

template <typename T>
std::map<std::string, BasicTensor<T>> Tape<T>::backward(Var<T> loss) {
    if (replayed_) throw ValidationError("backward already ran on this tape");
    if (&loss.tape() != this) throw ValidationError("loss belongs to a different tape");
    if (loss.value().size() != 1) {
        throw ValidationError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    replayed_ = true;
    grad_of(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (!node.requires_grad || !node.grad || !node.backward) continue;
        node.backward(*this, *node.grad);
    }
    std::map<std::string, TensorT> out;
    for (auto id : params_) {
        auto& node = nodes_[id];
        out.emplace(node.param_name, node.grad ? *node.grad : TensorT(node.value.shape(), T{0}));
    }
    return out;
}

template class Tape<float>;
template class Tape<double>;

namespace ad {

namespace {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
    if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
        throw ValidationError("operands must be recorded on the same tape");
    }
}

template <typename T>
void accumulate(Tape<T>& tape, std::size_t id, std::span<const T> g) {
    if (!tape.requires_grad(id)) return;
    auto dst = tape.grad_of(id).data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
Var<T> conv_impl(Var<T> x, Var<T> weight, Var<T> bias, PaddingRule pad, const std::vector<T>* rows) {
    require_same_tape(x, weight);
    const auto& xv = x.value();
    const auto& wv = weight.value();
    if (xv.rank() != 3) throw ValidationError("conv2d: input must be [Cin,H,W], got " + shape_str(xv.shape()));
    if (wv.rank() != 4) throw ValidationError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(wv.shape()));
    const std::size_t cin = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const std::size_t cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != cin) {
        throw ValidationError("conv2d: Cin mismatch (input " + std::to_string(cin) + ", weight " +
                              std::to_string(wv.dim(1)) + ")");
    }
    if (wv.dim(3) != k || k % 2 == 0) throw ValidationError("conv2d: kernel must be square with odd k");
    const bool has_bias = bias.valid();
    if (has_bias) {
        require_same_tape(x, bias);
        if (bias.value().size() != cout) throw ValidationError("conv2d: bias length must equal Cout");
    }
    if (rows && rows->size() != h) {
        throw ValidationError("eac_conv2d: row scale length " + std::to_string(rows->size()) +
                              " does not match input height " + std::to_string(h));
    }
    const std::size_t r = k / 2;
    auto padded = kernels::pad_input<T>(xv.data(), cin, h, w, r, pad);
    BasicTensor<T> out({cout, h, w});
    kernels::conv2d_forward<T>(padded, cin, h, w, wv.data(), cout, k, out.data());
    auto o = out.data();
    for (std::size_t co = 0; co < cout; ++co) {
        const T b = has_bias ? bias.value()[co] : T{0};
        for (std::size_t y = 0; y < h; ++y) {
            const T s = rows ? (*rows)[y] : T{1};
            T* row = o.data() + (co * h + y) * w;
            if (rows) {
                for (std::size_t xx = 0; xx < w; ++xx) row[xx] *= s;
            }
            if (has_bias) {
                for (std::size_t xx = 0; xx < w; ++xx) row[xx] += b;
            }
        }
    }
    std::vector<Var<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    const std::size_t xid = x.id(), wid = weight.id(), bid = has_bias ? bias.id() : 0;
    std::optional<std::vector<T>> row_copy;
    if (rows) row_copy = *rows;
    return x.tape().record(
        std::move(out), inputs,
        [=, padded = std::move(padded), row_copy = std::move(row_copy)](Tape<T>& tape, const BasicTensor<T>& g) {
            const auto& wv2 = tape.value(wid);
            if (has_bias && tape.requires_grad(bid)) {
                auto gb = tape.grad_of(bid).data();
                for (std::size_t co = 0; co < cout; ++co) {
                    T acc{0};
                    for (std::size_t i = 0; i < h * w; ++i) acc += g[co * h * w + i];
                    gb[co] += acc;
                }
            }
            std::vector<T> gconv(g.data().begin(), g.data().end());
            if (row_copy) {
                for (std::size_t co = 0; co < cout; ++co) {
                    for (std::size_t y = 0; y < h; ++y) {
                        const T s = (*row_copy)[y];
                        for (std::size_t xx = 0; xx < w; ++xx) gconv[(co * h + y) * w + xx] *= s;
                    }
                }
            }
            std::vector<T> gpad(padded.size(), T{0});
            std::vector<T> gw(wv2.size(), T{0});
            kernels::conv2d_backward<T>(padded, cin, h, w, wv2.data(), cout, k, gconv, gpad, gw);
            accumulate<T>(tape, wid, gw);
            if (tape.requires_grad(xid)) {
                kernels::unpad_accumulate<T>(gpad, cin, h, w, r, pad, tape.grad_of(xid).data());
            }
        });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, PaddingRule pad) {
    return conv_impl<T>(x, weight, bias, pad, nullptr);
}

template <typename T>
Var<T> eac_conv2d(Var<T> x, Var<T> weight, Var<T> bias, const std::vector<T>& row_scale) {
    return conv_impl<T>(x, weight, bias, PaddingRule::WrapClamp, &row_scale);
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> weight, Var<T> bias) {
    require_same_tape(x, weight);
    require_same_tape(x, bias);
    const auto& xv = x.value();
    const auto& wv = weight.value();
    const std::size_t n = xv.size();
    if (wv.rank() != 2 || wv.dim(1) != n) {
        throw ValidationError("dense: weight must be [M," + std::to_string(n) + "], got " + shape_str(wv.shape()));
    }
    const std::size_t m = wv.dim(0);
    if (bias.value().size() != m) throw ValidationError("dense: bias length must equal M");
    BasicTensor<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < n; ++j) acc += wv[i * n + j] * xv[j];
        out[i] = acc + bias.value()[i];
    }
    const std::size_t xid = x.id(), wid = weight.id(), bid = bias.id();
    return x.tape().record(std::move(out), {x, weight, bias}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        const auto& xv2 = tape.value(xid);
        const auto& wv2 = tape.value(wid);
        if (tape.requires_grad(wid)) {
            auto gw = tape.grad_of(wid).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g[i] * xv2[j];
        }
        if (tape.requires_grad(xid)) {
            auto gx = tape.grad_of(xid).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[j] += g[i] * wv2[i * n + j];
        }
        accumulate<T>(tape, bid, g.data());
    });
}

template <typename T>
Var<T> relu(Var<T> x) {
    BasicTensor<T> out = x.value();
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        const auto& xv = tape.value(xid);
        auto gx = tape.grad_of(xid).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > T{0}) gx[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    BasicTensor<T> out = x.value();
    for (auto& v : out.data()) v = kernels::sigmoid(v);
    const std::size_t xid = x.id();
    auto saved = out;
    return x.tape().record(std::move(out), {x}, [=, saved = std::move(saved)](Tape<T>& tape, const BasicTensor<T>& g) {
        auto gx = tape.grad_of(xid).data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i] * (T{1} - saved[i]);
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    if (a.shape() != b.shape()) {
        throw ValidationError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        accumulate<T>(tape, aid, g.data());
        accumulate<T>(tape, bid, g.data());
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    if (a.shape() != b.shape()) {
        throw ValidationError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        const auto& av = tape.value(aid);
        const auto& bv = tape.value(bid);
        if (tape.requires_grad(aid)) {
            auto ga = tape.grad_of(aid).data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tape.requires_grad(bid)) {
            auto gb = tape.grad_of(bid).data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
        throw ValidationError("concat_channels: spatial shape mismatch " + shape_str(av.shape()) + " vs " +
                              shape_str(bv.shape()));
    }
    std::vector<T> data(av.data().begin(), av.data().end());
    data.insert(data.end(), bv.data().begin(), bv.data().end());
    const std::size_t na = av.size();
    BasicTensor<T> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(data));
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        accumulate<T>(tape, aid, g.data().subspan(0, na));
        accumulate<T>(tape, bid, g.data().subspan(na));
    });
}

template <typename T>
Var<T> max_pool2(Var<T> x) {
    std::vector<std::size_t> argmax;
    BasicTensor<T> out = kernels::max_pool2<T>(x.value(), &argmax);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {x}, [=, argmax = std::move(argmax)](Tape<T>& tape, const BasicTensor<T>& g) {
        auto gx = tape.grad_of(xid).data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
    });
}

template <typename T>
Var<T> temporal_conv(Var<T> clip, Var<T> weight, Var<T> bias) {
    require_same_tape(clip, weight);
    require_same_tape(clip, bias);
    BasicTensor<T> out = kernels::temporal_conv<T>(clip.value(), weight.value(), bias.value());
    const std::size_t cid = clip.id(), wid = weight.id(), bid = bias.id();
    const std::size_t t = clip.value().dim(0), c = clip.value().dim(1);
    const std::size_t plane = clip.value().dim(2) * clip.value().dim(3);
    return clip.tape().record(std::move(out), {clip, weight, bias}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        const auto& cv = tape.value(cid);
        const auto& wv = tape.value(wid);
        if (tape.requires_grad(wid)) {
            auto gw = tape.grad_of(wid).data();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t f = 0; f < t; ++f) {
                    T acc{0};
                    const T* src = cv.data().data() + (f * c + ch) * plane;
                    const T* gg = g.data().data() + ch * plane;
                    for (std::size_t i = 0; i < plane; ++i) acc += gg[i] * src[i];
                    gw[ch * t + f] += acc;
                }
        }
        if (tape.requires_grad(bid)) {
            auto gb = tape.grad_of(bid).data();
            for (std::size_t ch = 0; ch < c; ++ch) {
                T acc{0};
                for (std::size_t i = 0; i < plane; ++i) acc += g[ch * plane + i];
                gb[ch] += acc;
            }
        }
        if (tape.requires_grad(cid)) {
            auto gc = tape.grad_of(cid).data();
            for (std::size_t f = 0; f < t; ++f)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T wf = wv[ch * t + f];
                    T* dst = gc.data() + (f * c + ch) * plane;
                    const T* gg = g.data().data() + ch * plane;
                    for (std::size_t i = 0; i < plane; ++i) dst[i] += wf * gg[i];
                }
        }
    });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
    const auto& lv = logits.value();
    if (lv.rank() != 2) throw ValidationError("softmax_cross_entropy: logits must be [N,K]");
    const std::size_t n = lv.dim(0), k = lv.dim(1);
    if (labels.size() != n) throw ValidationError("softmax_cross_entropy: one label per row required");
    BasicTensor<T> probs({n, k});
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw ValidationError("softmax_cross_entropy: label out of range");
        T mx = lv[i * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[i * k + j]);
        T z{0};
        for (std::size_t j = 0; j < k; ++j) z += std::exp(lv[i * k + j] - mx);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(lv[i * k + j] - mx) / z;
        total += std::log(z) + mx - lv[i * k + labels[i]];
    }
    const std::size_t lid = logits.id();
    return logits.tape().record(BasicTensor<T>::scalar(total), {logits},
                                [=, probs = std::move(probs)](Tape<T>& tape, const BasicTensor<T>& g) {
                                    auto gl = tape.grad_of(lid).data();
                                    for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < k; ++j) {
                                            const T onehot = j == labels[i] ? T{1} : T{0};
                                            gl[i * k + j] += g[0] * (probs[i * k + j] - onehot);
                                        }
                                });
}

template <typename T>
Var<T> smooth_l1(Var<T> pred, const BasicTensor<T>& target) {
    const auto& pv = pred.value();
    if (pv.shape() != target.shape()) {
        throw ValidationError("smooth_l1: shape mismatch " + shape_str(pv.shape()) + " vs " + shape_str(target.shape()));
    }
    T total{0};
    std::vector<T> deriv(pv.size());
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const T d = pv[i] - target[i];
        if (std::abs(d) < T{1}) {
            total += T{0.5} * d * d;
            deriv[i] = d;
        } else {
            total += std::abs(d) - T{0.5};
            deriv[i] = d > T{0} ? T{1} : T{-1};
        }
    }
    const std::size_t pid = pred.id();
    return pred.tape().record(BasicTensor<T>::scalar(total), {pred},
                              [=, deriv = std::move(deriv)](Tape<T>& tape, const BasicTensor<T>& g) {
                                  auto gp = tape.grad_of(pid).data();
                                  for (std::size_t i = 0; i < deriv.size(); ++i) gp[i] += g[0] * deriv[i];
                              });
}

template <typename T>
Var<T> sum(Var<T> x) {
    T total{0};
    for (auto v : x.value().data()) total += v;
    const std::size_t xid = x.id();
    return x.tape().record(BasicTensor<T>::scalar(total), {x}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        auto gx = tape.grad_of(xid).data();
        for (auto& v : gx) v += g[0];
    });
}

template <typename T>
Var<T> mul_channel_broadcast(Var<T> x, Var<T> map) {
    require_same_tape(x, map);
    const auto& xv = x.value();
    const auto& mv = map.value();
    if (xv.rank() != 3 || mv.rank() != 3 || mv.dim(0) != 1 || mv.dim(1) != xv.dim(1) || mv.dim(2) != xv.dim(2)) {
        throw ValidationError("mul_channel_broadcast: expected [C,H,W] and [1,H,W], got " + shape_str(xv.shape()) +
                              " and " + shape_str(mv.shape()));
    }
    const std::size_t c = xv.dim(0), plane = xv.dim(1) * xv.dim(2);
    BasicTensor<T> out = xv;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] *= mv[i];
    const std::size_t xid = x.id(), mid = map.id();
    return x.tape().record(std::move(out), {x, map}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        const auto& xv2 = tape.value(xid);
        const auto& mv2 = tape.value(mid);
        if (tape.requires_grad(xid)) {
            auto gx = tape.grad_of(xid).data();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i) gx[ch * plane + i] += g[ch * plane + i] * mv2[i];
        }
        if (tape.requires_grad(mid)) {
            auto gm = tape.grad_of(mid).data();
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i) gm[i] += g[ch * plane + i] * xv2[ch * plane + i];
        }
    });
}

template <typename T>
Var<T> scale_rows(Var<T> x, const std::vector<T>& rows) {
    const auto& xv = x.value();
    if (xv.rank() != 3 || rows.size() != xv.dim(1)) {
        throw ValidationError("scale_rows: need [C,H,W] with H = " + std::to_string(rows.size()) + ", got " +
                              shape_str(xv.shape()));
    }
    const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    BasicTensor<T> out = xv;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) out[(ch * h + y) * w + xx] *= rows[y];
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, const BasicTensor<T>& g) {
        auto gx = tape.grad_of(xid).data();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const std::size_t i = (ch * h + y) * w + xx;
                    gx[i] += g[i] * rows[y];
                }
    });
}

#define ACT360_AD_INSTANTIATE(T)                                                                    \
    template Var<T> conv2d<T>(Var<T>, Var<T>, Var<T>, PaddingRule);                                 \
    template Var<T> eac_conv2d<T>(Var<T>, Var<T>, Var<T>, const std::vector<T>&);                   \
    template Var<T> dense<T>(Var<T>, Var<T>, Var<T>);                                               \
    template Var<T> relu<T>(Var<T>);                                                                \
    template Var<T> sigmoid<T>(Var<T>);                                                             \
    template Var<T> add<T>(Var<T>, Var<T>);                                                         \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                         \
    template Var<T> concat_channels<T>(Var<T>, Var<T>);                                             \
    template Var<T> max_pool2<T>(Var<T>);                                                           \
    template Var<T> temporal_conv<T>(Var<T>, Var<T>, Var<T>);                                       \
    template Var<T> softmax_cross_entropy<T>(Var<T>, const std::vector<std::size_t>&);              \
    template Var<T> smooth_l1<T>(Var<T>, const BasicTensor<T>&);                                    \
    template Var<T> sum<T>(Var<T>);                                                                 \
    template Var<T> mul_channel_broadcast<T>(Var<T>, Var<T>);                                       \
    template Var<T> scale_rows<T>(Var<T>, const std::vector<T>&);

ACT360_AD_INSTANTIATE(float)
ACT360_AD_INSTANTIATE(double)

#undef ACT360_AD_INSTANTIATE

}  // namespace ad
}  // namespace act360
