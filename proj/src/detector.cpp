#include "act360/detector.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "act360/attention.hpp"
#include "act360/eac.hpp"
#include "act360/error.hpp"
#include "act360/kernels.hpp"
#include "act360/rng.hpp"
#include "act360/serialize.hpp"

namespace act360 {

const char* category_name(LayerCategory c) {
    switch (c) {
        case LayerCategory::Spatial2D: return "spatial2d";
        case LayerCategory::Eac: return "eac";
        case LayerCategory::Temporal3D: return "temporal3d";
        case LayerCategory::Fusion: return "fusion";
        case LayerCategory::SpatialAttention: return "spatial_attention";
        case LayerCategory::Head: return "head";
    }
    return "unknown";
}

LayerCategory category_from_name(const std::string& name) {
    for (auto c : {LayerCategory::Spatial2D, LayerCategory::Eac, LayerCategory::Temporal3D, LayerCategory::Fusion,
                   LayerCategory::SpatialAttention, LayerCategory::Head}) {
        if (name == category_name(c)) return c;
    }
    throw ValidationError("unknown layer category '" + name + "'");
}

void DetectorConfig::validate() const {
    if (clip_len < 2) throw ValidationError("config: clip_len must be >= 2 (attention needs F_{t-1})");
    if (num_classes < 1) throw ValidationError("config: num_classes must be >= 1");
    if (anchors != 1) throw ValidationError("config: only one anchor per cell is supported");
    if (width != 2 * height) throw ValidationError("config: ERP width must equal 2 x height");
    if (height % 4 != 0 || height < 8) throw ValidationError("config: height must be a multiple of 4 and >= 8");
    if (in_channels < 1) throw ValidationError("config: in_channels must be >= 1");
    if (!(erp_cap >= 1.0)) throw ValidationError("config: erp_cap must be >= 1");
    if (!(anchor_w > 0.0 && anchor_w < 1.0 && anchor_h > 0.0 && anchor_h <= 1.0)) {
        throw ValidationError("config: anchor size must be in (0,1)");
    }
    if (!(learning_rate >= 0.0)) throw ValidationError("config: learning_rate must be >= 0");
    if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
}

std::vector<LayerSpec> layer_specs(const DetectorConfig& c) {
    const auto spatial_cat = c.use_eac ? LayerCategory::Eac : LayerCategory::Spatial2D;
    const auto spatial_kind = c.use_eac ? LayerKind::EacConv : LayerKind::Conv;
    std::vector<LayerSpec> specs{
        {"spatial1", spatial_kind, spatial_cat, {c.spatial_channels1, c.in_channels, 3, 3}, c.spatial_channels1},
        {"spatial2", spatial_kind, spatial_cat, {c.spatial_channels2, c.spatial_channels1, 3, 3}, c.spatial_channels2},
        {"temporal", LayerKind::Temporal, LayerCategory::Temporal3D, {c.in_channels, c.clip_len}, c.in_channels},
        {"motion1", LayerKind::Conv, LayerCategory::Temporal3D, {c.motion_channels1, c.in_channels, 3, 3},
         c.motion_channels1},
        {"motion2", LayerKind::Conv, LayerCategory::Temporal3D, {c.motion_channels2, c.motion_channels1, 3, 3},
         c.motion_channels2},
        {"fusion", LayerKind::Conv, LayerCategory::Fusion,
         {c.fusion_channels, c.spatial_channels2 + c.motion_channels2, 1, 1}, c.fusion_channels},
    };
    if (c.use_attention) {
        specs.push_back({"attention", LayerKind::AttentionGate, LayerCategory::SpatialAttention,
                         {1, 2 * c.fusion_channels, 1, 1}, 1});
    }
    specs.push_back({"head", LayerKind::Conv, LayerCategory::Head, {c.head_channels(), c.fusion_channels, 1, 1},
                     c.head_channels()});
    return specs;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
}

Tensor& Model::param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params) n += v.size();
    return n;
}

Model init_model(const DetectorConfig& config, std::uint64_t seed) {
    config.validate();
    Model m{config, {}};
    Rng root(seed);
    for (const auto& spec : layer_specs(config)) {
        Rng rng = root.split(spec.name);
        Tensor w(spec.weight_shape);
        if (spec.kind == LayerKind::Temporal) {
            const double t = static_cast<double>(config.clip_len);
            for (auto& v : w.data()) v = static_cast<float>(1.0 / t + 0.1 / t * rng.normal());
        } else {
            const double fan_in = static_cast<double>(w.size() / spec.weight_shape[0]);
            double stddev = std::sqrt(2.0 / fan_in);
            if (spec.kind == LayerKind::AttentionGate || spec.category == LayerCategory::Head) stddev *= 0.1;
            for (auto& v : w.data()) v = static_cast<float>(stddev * rng.normal());
        }
        m.params.emplace(spec.name + ".weight", std::move(w));
        m.params.emplace(spec.name + ".bias", Tensor({spec.bias_len}, 0.0f));
    }
    return m;
}

template <typename T>
Var<T> build_forward(Tape<T>& tape, const DetectorConfig& config, const ParamMap<T>& params,
                     const BasicTensor<T>& clip, std::map<std::string, Var<T>>* bound) {
    config.validate();
    const Shape expected{config.clip_len, config.in_channels, config.height, config.width};
    if (clip.shape() != expected) {
        throw ValidationError("forward: clip shape " + shape_str(clip.shape()) + " does not match config " +
                              shape_str(expected));
    }
    std::map<std::string, Var<T>> vars;
    for (const auto& spec : layer_specs(config)) {
        for (const char* suffix : {".weight", ".bias"}) {
            const std::string name = spec.name + suffix;
            auto it = params.find(name);
            if (it == params.end()) throw ValidationError("forward: missing parameter '" + name + "'");
            vars.emplace(name, tape.parameter(name, it->second));
        }
    }
    auto W = [&](const std::string& layer) { return vars.at(layer + ".weight"); };
    auto B = [&](const std::string& layer) { return vars.at(layer + ".bias"); };

    const ErpGrid grid1(config.height), grid2(config.height / 2), grid3(config.height / 4);
    auto spatial = [&](Var<T> frame) {
        Var<T> s1 = config.use_eac ? eac_conv2d<T>(frame, W("spatial1"), B("spatial1"), grid1)
                                   : ad::conv2d(frame, W("spatial1"), B("spatial1"), PaddingRule::WrapClamp);
        s1 = ad::max_pool2(ad::relu(s1));
        Var<T> s2 = config.use_eac ? eac_conv2d<T>(s1, W("spatial2"), B("spatial2"), grid2)
                                   : ad::conv2d(s1, W("spatial2"), B("spatial2"), PaddingRule::WrapClamp);
        return ad::max_pool2(ad::relu(s2));
    };

    Var<T> clip_var = tape.constant(clip);
    Var<T> key = tape.constant(clip.slice0(config.clip_len - 1));
    Var<T> spatial_key = spatial(key);

    Var<T> tc = ad::relu(ad::temporal_conv(clip_var, W("temporal"), B("temporal")));
    Var<T> m1 = ad::max_pool2(ad::relu(ad::conv2d(tc, W("motion1"), B("motion1"), PaddingRule::WrapClamp)));
    Var<T> m2 = ad::max_pool2(ad::relu(ad::conv2d(m1, W("motion2"), B("motion2"), PaddingRule::WrapClamp)));

    auto fuse = [&](Var<T> s) {
        return ad::relu(ad::conv2d(ad::concat_channels(s, m2), W("fusion"), B("fusion"), PaddingRule::WrapClamp));
    };
    Var<T> features = fuse(spatial_key);
    if (config.use_attention) {
        Var<T> prev = tape.constant(clip.slice0(config.clip_len - 2));
        Var<T> features_prev = fuse(spatial(prev));
        features = apply_attention<T>(features, features_prev, W("attention"), B("attention"), grid3, config.erp_cap);
    }
    Var<T> pred = ad::conv2d(features, W("head"), B("head"), PaddingRule::WrapClamp);
    if (bound) *bound = std::move(vars);
    return pred;
}

template Var<float> build_forward<float>(Tape<float>&, const DetectorConfig&, const ParamMap<float>&, const Tensor&,
                                         std::map<std::string, Var<float>>*);
template Var<double> build_forward<double>(Tape<double>&, const DetectorConfig&, const ParamMap<double>&,
                                           const TensorD&, std::map<std::string, Var<double>>*);

Tensor forward(const Tensor& clip, const Model& model) {
    Tape<float> tape;
    return build_forward<float>(tape, model.config, model.params, clip).value();
}

std::vector<CellTarget> build_targets(const std::vector<GtObject>& objects, const DetectorConfig& config) {
    const std::size_t gh = config.grid_h(), gw = config.grid_w();
    std::vector<CellTarget> out;
    for (const auto& obj : objects) {
        if (obj.label >= config.num_classes) throw ValidationError("target label out of range");
        const double cx = obj.box.center_x() * static_cast<double>(gw);
        const double cy = obj.box.center_y() * static_cast<double>(gh);
        const auto cell_x = std::min(gw - 1, static_cast<std::size_t>(std::floor(cx)));
        const auto cell_y = std::min(gh - 1, static_cast<std::size_t>(std::floor(cy)));
        const bool taken = std::any_of(out.begin(), out.end(), [&](const CellTarget& t) {
            return t.cell_x == cell_x && t.cell_y == cell_y;
        });
        if (taken) continue;
        CellTarget t;
        t.cell_x = cell_x;
        t.cell_y = cell_y;
        t.offset_x = cx - static_cast<double>(cell_x);
        t.offset_y = cy - static_cast<double>(cell_y);
        t.log_w = std::log(std::max(obj.box.width(), 1e-4) / config.anchor_w);
        t.log_h = std::log(std::max(obj.box.height(), 1e-4) / config.anchor_h);
        t.label = obj.label;
        out.push_back(t);
    }
    return out;
}

template <typename T>
Var<T> detection_loss(Var<T> pred, const std::vector<CellTarget>& targets, std::size_t num_classes) {
    const auto& pv = pred.value();
    if (pv.rank() != 3 || pv.dim(0) != 5 + num_classes) {
        throw ValidationError("detection_loss: predictions must be [5+K,H,W], got " + shape_str(pv.shape()));
    }
    const std::size_t gh = pv.dim(1), gw = pv.dim(2), plane = gh * gw;
    auto at = [&](std::size_t ch, std::size_t y, std::size_t x) { return (ch * gh + y) * gw + x; };

    std::vector<int> positive(plane, -1);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& t = targets[i];
        if (t.cell_y >= gh || t.cell_x >= gw || t.label >= num_classes) {
            throw ValidationError("detection_loss: target outside grid or label range");
        }
        positive[t.cell_y * gw + t.cell_x] = static_cast<int>(i);
    }

    BasicTensor<T> grad(pv.shape(), T{0});
    T total{0};
    for (std::size_t y = 0; y < gh; ++y) {
        for (std::size_t x = 0; x < gw; ++x) {
            const int ti = positive[y * gw + x];
            const T obj = pv[at(4, y, x)];
            const T label = ti >= 0 ? T{1} : T{0};
            total += kernels::softplus(obj) - label * obj;
            grad[at(4, y, x)] = kernels::sigmoid(obj) - label;
            if (ti < 0) continue;
            const auto& t = targets[static_cast<std::size_t>(ti)];
            // class cross-entropy
            T mx = pv[at(5, y, x)];
            for (std::size_t k = 1; k < num_classes; ++k) mx = std::max(mx, pv[at(5 + k, y, x)]);
            T z{0};
            for (std::size_t k = 0; k < num_classes; ++k) z += std::exp(pv[at(5 + k, y, x)] - mx);
            total += std::log(z) + mx - pv[at(5 + t.label, y, x)];
            for (std::size_t k = 0; k < num_classes; ++k) {
                const T p = std::exp(pv[at(5 + k, y, x)] - mx) / z;
                grad[at(5 + k, y, x)] = p - (k == t.label ? T{1} : T{0});
            }
            // box regression
            const T sx = kernels::sigmoid(pv[at(0, y, x)]);
            const T sy = kernels::sigmoid(pv[at(1, y, x)]);
            const T diffs[4] = {sx - static_cast<T>(t.offset_x), sy - static_cast<T>(t.offset_y),
                                pv[at(2, y, x)] - static_cast<T>(t.log_w), pv[at(3, y, x)] - static_cast<T>(t.log_h)};
            const T chain[4] = {sx * (T{1} - sx), sy * (T{1} - sy), T{1}, T{1}};
            for (std::size_t j = 0; j < 4; ++j) {
                const T d = diffs[j];
                T dl;
                if (std::abs(d) < T{1}) {
                    total += T{0.5} * d * d;
                    dl = d;
                } else {
                    total += std::abs(d) - T{0.5};
                    dl = d > T{0} ? T{1} : T{-1};
                }
                grad[at(j, y, x)] = dl * chain[j];
            }
        }
    }
    const std::size_t pid = pred.id();
    return pred.tape().record(BasicTensor<T>::scalar(total), {pred},
                              [pid, grad = std::move(grad)](Tape<T>& tape, const BasicTensor<T>& g) {
                                  auto gp = tape.grad_of(pid).data();
                                  for (std::size_t i = 0; i < grad.size(); ++i) gp[i] += g[0] * grad[i];
                              });
}

template Var<float> detection_loss<float>(Var<float>, const std::vector<CellTarget>&, std::size_t);
template Var<double> detection_loss<double>(Var<double>, const std::vector<CellTarget>&, std::size_t);

std::vector<Detection> decode_predictions(const Tensor& pred, const DetectorConfig& config,
                                          const std::string& video_id, std::size_t frame) {
    const std::size_t k = config.num_classes;
    if (pred.rank() != 3 || pred.dim(0) != 5 + k) {
        throw ValidationError("decode: predictions must be [5+K,H,W], got " + shape_str(pred.shape()));
    }
    const std::size_t gh = pred.dim(1), gw = pred.dim(2);
    auto v = [&](std::size_t ch, std::size_t y, std::size_t x) {
        return static_cast<double>(pred[(ch * gh + y) * gw + x]);
    };
    std::vector<Detection> out;
    out.reserve(gh * gw);
    for (std::size_t y = 0; y < gh; ++y) {
        for (std::size_t x = 0; x < gw; ++x) {
            const double obj = kernels::sigmoid(v(4, y, x));
            double mx = v(5, y, x);
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (v(5 + c, y, x) > mx) {
                    mx = v(5 + c, y, x);
                    best = c;
                }
            }
            double z = 0.0;
            for (std::size_t c = 0; c < k; ++c) z += std::exp(v(5 + c, y, x) - mx);
            const double cls = 1.0 / z;
            const double cx = (static_cast<double>(x) + kernels::sigmoid(v(0, y, x))) / static_cast<double>(gw);
            const double cy = (static_cast<double>(y) + kernels::sigmoid(v(1, y, x))) / static_cast<double>(gh);
            const double bw = config.anchor_w * std::exp(std::clamp(v(2, y, x), -4.0, 4.0));
            const double bh = config.anchor_h * std::exp(std::clamp(v(3, y, x), -4.0, 4.0));
            Detection d;
            d.video_id = video_id;
            d.frame = frame;
            d.box = Box::from_center(cx, cy, bw, std::min(bh, 1.0));
            if (!(d.box.y1 < d.box.y2)) continue;
            d.label = best;
            d.confidence = std::clamp(obj * cls, 0.0, 1.0);
            out.push_back(std::move(d));
        }
    }
    return out;
}

namespace {

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;
    ParamMap<float> m, v;

    void update(ParamMap<float>& params, const ParamMap<float>& grads, double lr) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (auto& [name, p] : params) {
            const auto& g = grads.at(name);
            auto& mm = m.try_emplace(name, p.shape(), 0.0f).first->second;
            auto& vv = v.try_emplace(name, p.shape(), 0.0f).first->second;
            for (std::size_t i = 0; i < p.size(); ++i) {
                mm[i] = static_cast<float>(beta1 * mm[i] + (1.0 - beta1) * g[i]);
                vv[i] = static_cast<float>(beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]);
                const double mhat = mm[i] / c1;
                const double vhat = vv[i] / c2;
                p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

void apply_masks(ParamMap<float>& params, const WeightMasks* masks) {
    if (!masks) return;
    for (const auto& [name, mask] : *masks) {
        auto& p = params.at(name);
        if (mask.size() != p.size()) throw ValidationError("mask size mismatch for '" + name + "'");
        for (std::size_t i = 0; i < p.size(); ++i)
            if (!mask[i]) p[i] = 0.0f;
    }
}

double sample_loss(const Model& model, const Sample& s, const std::vector<CellTarget>& targets,
                   ParamMap<float>* grads) {
    Tape<float> tape;
    auto pred = build_forward<float>(tape, model.config, model.params, s.clip);
    auto loss = detection_loss<float>(pred, targets, model.config.num_classes);
    const double value = loss.value()[0];
    if (grads) {
        auto g = tape.backward(loss);
        for (auto& [name, t] : g) {
            auto& acc = grads->at(name);
            for (std::size_t i = 0; i < t.size(); ++i) acc[i] += t[i];
        }
    }
    return value;
}

}  // namespace

double evaluate_loss(const Model& model, const std::vector<Sample>& samples) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    for (const auto& s : samples) total += sample_loss(model, s, build_targets(s.objects, model.config), nullptr);
    return total / static_cast<double>(samples.size());
}

ModelCheckpoint train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                      const DetectorConfig& config, const TrainOptions& options) {
    config.validate();
    if (train_set.empty()) throw ValidationError("train: empty training set");
    ModelCheckpoint ckpt;
    ckpt.seed = config.seed;
    ckpt.model = options.init ? *options.init : init_model(config, config.seed);
    ckpt.model.config = config;
    apply_masks(ckpt.model.params, options.masks);

    std::vector<std::vector<CellTarget>> targets;
    targets.reserve(train_set.size());
    for (const auto& s : train_set) targets.push_back(build_targets(s.objects, config));

    Rng order_rng = Rng(config.seed).split("train-order");
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Adam adam;
    Model best = ckpt.model;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0, steps = 0;
    bool stop = false;

    for (std::size_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size() && !stop; start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            ParamMap<float> grads;
            for (const auto& [name, p] : ckpt.model.params) grads.emplace(name, Tensor(p.shape(), 0.0f));
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const std::size_t idx = order[i];
                double l;
                try {
                    l = sample_loss(ckpt.model, train_set[idx], targets[idx], &grads);
                } catch (const RuntimeFailure& e) {
                    throw RuntimeFailure(std::string("training diverged at epoch ") + std::to_string(epoch) + ": " +
                                         e.what() + "; lower the learning rate (lr=" +
                                         format_double(config.learning_rate) + ")");
                }
                if (!std::isfinite(l)) {
                    throw RuntimeFailure("training diverged at epoch " + std::to_string(epoch) +
                                         ": loss is not finite; lower the learning rate (lr=" +
                                         format_double(config.learning_rate) + ")");
                }
                batch_loss += l;
            }
            const double n = static_cast<double>(end - start);
            for (auto& [name, g] : grads) {
                for (auto& v : g.data()) v = static_cast<float>(v / n);
                if (options.masks) {
                    auto it = options.masks->find(name);
                    if (it != options.masks->end())
                        for (std::size_t i = 0; i < g.size(); ++i)
                            if (!it->second[i]) g[i] = 0.0f;
                }
            }
            adam.update(ckpt.model.params, grads, config.learning_rate);
            apply_masks(ckpt.model.params, options.masks);
            ckpt.step_loss.push_back(batch_loss / n);
            epoch_loss += batch_loss;
            ++steps;
            if (options.max_steps && steps >= options.max_steps) stop = true;
        }
        ckpt.train_loss.push_back(epoch_loss / static_cast<double>(train_set.size()));
        ckpt.epochs_run = epoch + 1;
        if (!val_set.empty()) {
            const double vl = evaluate_loss(ckpt.model, val_set);
            ckpt.val_loss.push_back(vl);
            if (vl < best_val) {
                best_val = vl;
                best = ckpt.model;
                ckpt.best_epoch = epoch;
                since_best = 0;
            } else if (++since_best >= config.patience) {
                stop = true;
            }
        } else {
            ckpt.best_epoch = epoch;
        }
    }
    if (!val_set.empty()) ckpt.model = best;
    return ckpt;
}

// ---------------------------------------------------------------------------
// Inference without a tape.

Tensor attention_forward(const Tensor& f_t, const Tensor& f_prev, const Tensor& weight, const Tensor& bias,
                         const std::vector<float>& rows) {
    if (f_t.shape() != f_prev.shape()) throw ValidationError("attention: F_t and F_prev shapes differ");
    std::vector<float> cat(f_t.data().begin(), f_t.data().end());
    cat.insert(cat.end(), f_prev.data().begin(), f_prev.data().end());
    Tensor joined({2 * f_t.dim(0), f_t.dim(1), f_t.dim(2)}, std::move(cat));
    Tensor gate = kernels::conv2d<float>(joined, weight, &bias, PaddingRule::WrapClamp);
    for (auto& v : gate.data()) v = kernels::sigmoid(v);
    const std::size_t h = gate.dim(1), w = gate.dim(2);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) gate[y * w + x] *= rows[y];
    Tensor out = f_t;
    const std::size_t c = out.dim(0), plane = h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] *= gate[i];
    return out;
}

Tensor FloatRunner::conv(const std::string& layer, const Tensor& x, PaddingRule pad) {
    const Tensor& b = model_->param(layer + ".bias");
    return kernels::conv2d<float>(x, model_->param(layer + ".weight"), &b, pad);
}

Tensor FloatRunner::eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) {
    Tensor out = kernels::conv2d<float>(x, model_->param(layer + ".weight"), nullptr, PaddingRule::WrapClamp);
    const Tensor& b = model_->param(layer + ".bias");
    const std::size_t c = out.dim(0), h = out.dim(1), w = out.dim(2);
    for (std::size_t co = 0; co < c; ++co)
        for (std::size_t y = 0; y < h; ++y) {
            float* row = out.data().data() + (co * h + y) * w;
            for (std::size_t xx = 0; xx < w; ++xx) row[xx] *= rows[y];
            for (std::size_t xx = 0; xx < w; ++xx) row[xx] += b[co];
        }
    return out;
}

Tensor FloatRunner::temporal(const std::string& layer, const Tensor& clip) {
    return kernels::temporal_conv<float>(clip, model_->param(layer + ".weight"), model_->param(layer + ".bias"));
}

Tensor FloatRunner::attention(const std::string& layer, const Tensor& f_t, const Tensor& f_prev,
                              const std::vector<float>& rows) {
    return attention_forward(f_t, f_prev, model_->param(layer + ".weight"), model_->param(layer + ".bias"), rows);
}

namespace {

Tensor relu_pool(Tensor x) {
    for (auto& v : x.data()) v = v > 0.0f ? v : 0.0f;
    return kernels::max_pool2<float>(x, nullptr);
}

Tensor relu(Tensor x) {
    for (auto& v : x.data()) v = v > 0.0f ? v : 0.0f;
    return x;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    std::vector<float> data(a.data().begin(), a.data().end());
    data.insert(data.end(), b.data().begin(), b.data().end());
    return Tensor({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(data));
}

std::vector<float> to_float(const std::vector<double>& v) { return std::vector<float>(v.begin(), v.end()); }

}  // namespace

Tensor run_topology(const DetectorConfig& config, LayerRunner& runner, const Tensor& clip) {
    const Shape expected{config.clip_len, config.in_channels, config.height, config.width};
    if (clip.shape() != expected) {
        throw ValidationError("forward: clip shape " + shape_str(clip.shape()) + " does not match config " +
                              shape_str(expected));
    }
    const auto rows1 = to_float(cos_lat_table(ErpGrid(config.height)));
    const auto rows2 = to_float(cos_lat_table(ErpGrid(config.height / 2)));
    auto spatial = [&](const Tensor& frame) {
        Tensor s1 = config.use_eac ? runner.eac_conv("spatial1", frame, rows1)
                                   : runner.conv("spatial1", frame, PaddingRule::WrapClamp);
        s1 = relu_pool(std::move(s1));
        Tensor s2 = config.use_eac ? runner.eac_conv("spatial2", s1, rows2)
                                   : runner.conv("spatial2", s1, PaddingRule::WrapClamp);
        return relu_pool(std::move(s2));
    };
    Tensor spatial_key = spatial(clip.slice0(config.clip_len - 1));
    Tensor tc = relu(runner.temporal("temporal", clip));
    Tensor m1 = relu_pool(runner.conv("motion1", tc, PaddingRule::WrapClamp));
    Tensor m2 = relu_pool(runner.conv("motion2", m1, PaddingRule::WrapClamp));
    Tensor features = relu(runner.conv("fusion", concat(spatial_key, m2), PaddingRule::WrapClamp));
    if (config.use_attention) {
        Tensor features_prev =
            relu(runner.conv("fusion", concat(spatial(clip.slice0(config.clip_len - 2)), m2), PaddingRule::WrapClamp));
        const auto rows3 = erp_row_factors<float>(ErpGrid(config.height / 4), config.erp_cap);
        features = runner.attention("attention", features, features_prev, rows3);
    }
    return runner.conv("head", features, PaddingRule::WrapClamp);
}

Tensor infer_raw(const Tensor& clip, const Model& model) {
    FloatRunner runner(model);
    return run_topology(model.config, runner, clip);
}

double LatencyStats::mean_ms() const {
    if (per_frame_ms.empty()) return 0.0;
    return std::accumulate(per_frame_ms.begin(), per_frame_ms.end(), 0.0) / static_cast<double>(per_frame_ms.size());
}

namespace {

double percentile_sorted(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(v.size() - 1, lo + 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double LatencyStats::median_ms() const { return percentile_sorted(per_frame_ms, 0.5); }
double LatencyStats::p95_ms() const { return percentile_sorted(per_frame_ms, 0.95); }

InferenceResult infer(const std::vector<Sample>& clips, const Model& model, const PostprocessSettings& settings) {
    return infer_with(clips, [&model](const Tensor& clip) { return infer_raw(clip, model); }, model.config, settings);
}

InferenceResult infer_with(const std::vector<Sample>& clips, const std::function<Tensor(const Tensor&)>& predictor,
                           const DetectorConfig& config, const PostprocessSettings& settings) {
    using Clock = std::chrono::steady_clock;
    InferenceResult result;
    std::vector<Detection> frame_dets;
    PostprocessSettings per_frame = settings;
    per_frame.smooth = false;
    for (const auto& s : clips) {
        const auto t0 = Clock::now();
        Tensor pred = predictor(s.clip);
        auto dets = decode_predictions(pred, config, s.video_id, s.frame);
        dets = run_postprocess(dets, per_frame);
        const auto t1 = Clock::now();
        result.latency.per_frame_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        frame_dets.insert(frame_dets.end(), dets.begin(), dets.end());
    }
    if (settings.smooth && !clips.empty()) {
        const auto t0 = Clock::now();
        auto tubes = link_tubes_by_label(frame_dets, settings.link_iou);
        for (auto& t : tubes) t = temporal_smooth(t, settings.smooth_window);
        frame_dets = tubes_to_detections(tubes);
        const double share = std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
                             static_cast<double>(clips.size());
        for (auto& ms : result.latency.per_frame_ms) ms += share;
    }
    result.detections = std::move(frame_dets);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints.

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ValidationError("bad number '" + s + "'");
    return v;
}

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += format_double(v[i]);
    }
    return out;
}

std::vector<double> split_doubles(const std::string& s) {
    std::vector<double> out;
    if (s.empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(',', start);
        out.push_back(parse_double(s.substr(start, pos - start)));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError("checkpoint manifest is missing '" + key + "'");
    return it->second;
}

}  // namespace

std::string config_manifest(const DetectorConfig& c) {
    std::ostringstream os;
    os << "config.clip_len=" << c.clip_len << '\n'
       << "config.height=" << c.height << '\n'
       << "config.width=" << c.width << '\n'
       << "config.in_channels=" << c.in_channels << '\n'
       << "config.num_classes=" << c.num_classes << '\n'
       << "config.anchors=" << c.anchors << '\n'
       << "config.spatial_channels1=" << c.spatial_channels1 << '\n'
       << "config.spatial_channels2=" << c.spatial_channels2 << '\n'
       << "config.motion_channels1=" << c.motion_channels1 << '\n'
       << "config.motion_channels2=" << c.motion_channels2 << '\n'
       << "config.fusion_channels=" << c.fusion_channels << '\n'
       << "config.use_eac=" << (c.use_eac ? 1 : 0) << '\n'
       << "config.use_attention=" << (c.use_attention ? 1 : 0) << '\n'
       << "config.erp_cap=" << format_double(c.erp_cap) << '\n'
       << "config.anchor_w=" << format_double(c.anchor_w) << '\n'
       << "config.anchor_h=" << format_double(c.anchor_h) << '\n'
       << "config.learning_rate=" << format_double(c.learning_rate) << '\n'
       << "config.batch_size=" << c.batch_size << '\n'
       << "config.epochs=" << c.epochs << '\n'
       << "config.patience=" << c.patience << '\n'
       << "config.seed=" << c.seed << '\n';
    return os.str();
}

DetectorConfig parse_config_manifest(const std::map<std::string, std::string>& kv) {
    auto u = [&](const std::string& k) { return static_cast<std::size_t>(std::stoull(need(kv, "config." + k))); };
    auto d = [&](const std::string& k) { return parse_double(need(kv, "config." + k)); };
    DetectorConfig c;
    c.clip_len = u("clip_len");
    c.height = u("height");
    c.width = u("width");
    c.in_channels = u("in_channels");
    c.num_classes = u("num_classes");
    c.anchors = u("anchors");
    c.spatial_channels1 = u("spatial_channels1");
    c.spatial_channels2 = u("spatial_channels2");
    c.motion_channels1 = u("motion_channels1");
    c.motion_channels2 = u("motion_channels2");
    c.fusion_channels = u("fusion_channels");
    c.use_eac = u("use_eac") != 0;
    c.use_attention = u("use_attention") != 0;
    c.erp_cap = d("erp_cap");
    c.anchor_w = d("anchor_w");
    c.anchor_h = d("anchor_h");
    c.learning_rate = d("learning_rate");
    c.batch_size = u("batch_size");
    c.epochs = u("epochs");
    c.patience = u("patience");
    c.seed = std::stoull(need(kv, "config.seed"));
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    os << "format=act360-checkpoint\nversion=1\n" << config_manifest(ckpt.model.config);
    os << "train.epochs_run=" << ckpt.epochs_run << '\n'
       << "train.best_epoch=" << ckpt.best_epoch << '\n'
       << "train.seed=" << ckpt.seed << '\n'
       << "train.train_loss=" << join_doubles(ckpt.train_loss) << '\n'
       << "train.val_loss=" << join_doubles(ckpt.val_loss) << '\n'
       << "train.step_loss=" << join_doubles(ckpt.step_loss) << '\n'
       << "param.count=" << ckpt.model.params.size() << '\n';
    std::size_t i = 0;
    for (const auto& [name, t] : ckpt.model.params) os << "param." << i++ << '=' << name << '\n';
    os << "end_manifest\n";
    for (const auto& [name, t] : ckpt.model.params) write_tensor(os, t);
    if (!os) throw RuntimeFailure("write failed: " + path.string());
}

std::map<std::string, std::string> read_manifest(std::istream& is) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line == "end_manifest") return kv;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("malformed manifest line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    throw ValidationError("manifest is not terminated by end_manifest");
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open checkpoint " + path.string());
    auto kv = read_manifest(is);
    if (need(kv, "format") != "act360-checkpoint") throw ValidationError("not an act360 checkpoint");
    ModelCheckpoint ckpt;
    ckpt.model.config = parse_config_manifest(kv);
    ckpt.epochs_run = std::stoull(need(kv, "train.epochs_run"));
    ckpt.best_epoch = std::stoull(need(kv, "train.best_epoch"));
    ckpt.seed = std::stoull(need(kv, "train.seed"));
    ckpt.train_loss = split_doubles(need(kv, "train.train_loss"));
    ckpt.val_loss = split_doubles(need(kv, "train.val_loss"));
    ckpt.step_loss = split_doubles(need(kv, "train.step_loss"));
    const auto count = std::stoull(need(kv, "param.count"));
    std::vector<std::string> names;
    for (std::size_t i = 0; i < count; ++i) names.push_back(need(kv, "param." + std::to_string(i)));
    for (const auto& name : names) ckpt.model.params.emplace(name, read_tensor(is));
    for (const auto& spec : layer_specs(ckpt.model.config)) {
        if (ckpt.model.param(spec.name + ".weight").shape() != spec.weight_shape) {
            throw ValidationError("checkpoint weight shape mismatch for layer " + spec.name);
        }
    }
    return ckpt;
}

}  // namespace act360
