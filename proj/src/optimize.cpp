#include "act360/optimize.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "act360/error.hpp"
#include "act360/kernels.hpp"
#include "act360/serialize.hpp"

#if defined(__SSE2__)
#include <emmintrin.h>
#endif

namespace act360 {

OptimizationPolicy::OptimizationPolicy() {
    rules_[LayerCategory::Spatial2D] = {true, true, false};
    rules_[LayerCategory::Eac] = {true, false, false};
    rules_[LayerCategory::Temporal3D] = {true, true, false};
    rules_[LayerCategory::Fusion] = {true, true, false};
    rules_[LayerCategory::SpatialAttention] = {false, false, true};
    rules_[LayerCategory::Head] = {true, true, false};
}

const CategoryRule& OptimizationPolicy::rule(LayerCategory c) const { return rules_.at(c); }

void OptimizationPolicy::set(LayerCategory c, CategoryRule r) {
    if (r.precision_exempt && r.quantize) throw ValidationError("policy: a precision-exempt category cannot quantize");
    if (c == LayerCategory::SpatialAttention && (r.quantize || r.prune || !r.precision_exempt)) {
        throw ValidationError("policy: attention must stay full precision and unpruned");
    }
    if (c == LayerCategory::Eac && r.prune) throw ValidationError("policy: EAC layers are never pruned");
    rules_[c] = r;
}

// ---------------------------------------------------------------------------
// Calibration.

namespace {

class RecordingRunner : public FloatRunner {
public:
    RecordingRunner(const Model& model, const OptimizationPolicy& policy) : FloatRunner(model) {
        for (const auto& spec : layer_specs(model.config))
            if (policy.quantizes(spec)) watched_.insert(spec.name);
    }
    Tensor conv(const std::string& layer, const Tensor& x, PaddingRule pad) override {
        record(layer, x);
        return FloatRunner::conv(layer, x, pad);
    }
    Tensor eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) override {
        record(layer, x);
        return FloatRunner::eac_conv(layer, x, rows);
    }
    Tensor temporal(const std::string& layer, const Tensor& clip) override {
        record(layer, clip);
        return FloatRunner::temporal(layer, clip);
    }

    std::map<std::string, std::vector<double>> mins, maxs;

private:
    void record(const std::string& layer, const Tensor& x) {
        if (!watched_.count(layer)) return;
        const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
        mins[layer].push_back(*lo);
        maxs[layer].push_back(*hi);
    }
    std::set<std::string> watched_;
};

double percentile(std::vector<double> v, double pct) {
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(v.size() - 1, lo + 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

ActivationRanges calibrate(const Model& model, const std::vector<Tensor>& clips, const OptimizationPolicy& policy,
                           const CalibrationOptions& options) {
    if (clips.empty()) throw ValidationError("calibrate: empty calibration set");
    if (!(options.percentile > 50.0 && options.percentile <= 100.0)) {
        throw ValidationError("calibrate: percentile must lie in (50, 100]");
    }
    RecordingRunner runner(model, policy);
    for (const auto& clip : clips) run_topology(model.config, runner, clip);
    ActivationRanges out;
    for (const auto& [layer, mins] : runner.mins) {
        ActivationRange r;
        r.lo = percentile(mins, 100.0 - options.percentile);
        r.hi = percentile(runner.maxs.at(layer), options.percentile);
        if (!std::isfinite(r.lo) || !std::isfinite(r.hi)) throw RuntimeFailure("calibrate: non-finite range at " + layer);
        r.degenerate = r.hi == r.lo;
        out[layer] = r;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Quantization.

Tensor ChannelQuant::dequantize() const {
    Tensor out(q.shape);
    const std::size_t per = q.data.size() / scales.size();
    for (std::size_t i = 0; i < q.data.size(); ++i) out[i] = scales[i / per] * static_cast<float>(q.data[i]);
    return out;
}

ChannelQuant quantize_per_channel(const Tensor& weight) {
    ChannelQuant cq;
    cq.q.shape = weight.shape();
    cq.q.data.resize(weight.size());
    const std::size_t channels = weight.dim(0), per = weight.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
        double mx = 0.0;
        for (std::size_t i = 0; i < per; ++i) mx = std::max(mx, std::abs(static_cast<double>(weight[c * per + i])));
        const bool zero = mx == 0.0;
        const float s = zero ? 1.0f : static_cast<float>(mx / 127.0);
        cq.scales.push_back(s);
        cq.flagged.push_back(zero ? 1 : 0);
        for (std::size_t i = 0; i < per; ++i) {
            // nearbyint follows the default round-half-to-even mode
            const double q = std::nearbyint(static_cast<double>(weight[c * per + i]) / static_cast<double>(s));
            cq.q.data[c * per + i] = static_cast<std::int8_t>(std::clamp(q, -127.0, 127.0));
        }
    }
    return cq;
}

ActivationQuant ActivationQuant::from_range(const ActivationRange& range) {
    ActivationQuant a;
    const double lo = std::min(range.lo, 0.0), hi = std::max(range.hi, 0.0);
    if (hi == lo) {
        a.degenerate = true;
        return a;
    }
    a.scale = static_cast<float>((hi - lo) / 255.0);
    a.zero_point = static_cast<std::int32_t>(std::clamp(std::nearbyint(-128.0 - lo / a.scale), -128.0, 127.0));
    return a;
}

std::int32_t ActivationQuant::quantize(float v) const {
    const float r = std::nearbyint(std::clamp(v * (1.0f / scale), -1024.0f, 1024.0f));
    return std::clamp(static_cast<std::int32_t>(r) + zero_point, -128, 127);
}

const QuantizedLayer& QuantizedModel::layer(const std::string& name) const {
    for (const auto& l : layers)
        if (l.name == name) return l;
    throw ValidationError("quantized model has no layer '" + name + "'");
}

Tensor QuantizedModel::effective_weight(const std::string& name) const {
    const auto& l = layer(name);
    return l.quantized ? l.weight.dequantize() : l.float_weight;
}

QuantizedModel quantize(const Model& model, const OptimizationPolicy& policy, const ActivationRanges& ranges) {
    QuantizedModel qm;
    qm.config = model.config;
    for (const auto& spec : layer_specs(model.config)) {
        QuantizedLayer l;
        l.name = spec.name;
        l.kind = spec.kind;
        l.category = spec.category;
        l.bias = model.param(spec.name + ".bias");
        const Tensor& w = model.param(spec.name + ".weight");
        if (policy.quantizes(spec)) {
            auto it = ranges.find(spec.name);
            if (it == ranges.end()) throw ValidationError("quantize: no calibration range for layer " + spec.name);
            l.quantized = true;
            l.weight = quantize_per_channel(w);
            l.input = ActivationQuant::from_range(it->second);
        } else {
            l.float_weight = w;
        }
        qm.layers.push_back(std::move(l));
    }
    return qm;
}

// ---------------------------------------------------------------------------
// Integer engine.

QuantizedEngine::QuantizedEngine(const QuantizedModel& model) : model_(&model) {
    for (const auto& l : model.layers) {
        if (!l.quantized) continue;
        Prepared p;
        p.layer = &l;
        const auto& shape = l.weight.q.shape;
        p.cout = shape[0];
        if (l.kind == LayerKind::Temporal) {
            p.cin = 1;
            p.k = shape[1];
        } else {
            p.cin = shape[1];
            p.k = shape[2];
        }
        const std::size_t per = l.weight.q.data.size() / p.cout;
        p.taps.resize(p.cout);
        for (std::size_t co = 0; co < p.cout; ++co) {
            std::int64_t bound = 0;
            for (std::size_t i = 0; i < per; ++i) {
                const std::int8_t q = l.weight.q.data[co * per + i];
                bound += std::abs(static_cast<std::int64_t>(q)) * 255;
                if (q == 0) continue;
                if (l.kind == LayerKind::Temporal) {
                    p.taps[co].push_back({0, static_cast<std::uint32_t>(i), 0, q});
                } else {
                    const auto ci = static_cast<std::uint32_t>(i / (p.k * p.k));
                    const auto ky = static_cast<std::uint32_t>((i / p.k) % p.k);
                    const auto kx = static_cast<std::uint32_t>(i % p.k);
                    p.taps[co].push_back({ci, ky, kx, q});
                }
            }
            if (bound > INT32_MAX) {
                throw RuntimeFailure("quantized layer " + l.name + ": int32 accumulator could overflow");
            }
        }
        prepared_.emplace(l.name, std::move(p));
    }
}

const QuantizedEngine::Prepared& QuantizedEngine::prepared(const std::string& layer) const {
    auto it = prepared_.find(layer);
    if (it == prepared_.end()) throw ValidationError("layer " + layer + " is not quantized");
    return it->second;
}

namespace {

// Zero-point-shifted int8 codes of n floats: clamp(rint(v*inv) + zp) - zp.
void quantize_row(const float* src, std::int16_t* dst, std::size_t n, float inv, std::int32_t zero_point) {
    std::size_t i = 0;
#if defined(__SSE2__)
    // cvtps rounds half to even under the default rounding mode
    const __m128 vinv = _mm_set1_ps(inv), lim_lo = _mm_set1_ps(-1024.0f), lim_hi = _mm_set1_ps(1024.0f);
    const __m128i zp = _mm_set1_epi16(static_cast<std::int16_t>(zero_point));
    const __m128i qmin = _mm_set1_epi16(-128), qmax = _mm_set1_epi16(127);
    for (; i + 8 <= n; i += 8) {
        const __m128 a = _mm_min_ps(_mm_max_ps(_mm_mul_ps(_mm_loadu_ps(src + i), vinv), lim_lo), lim_hi);
        const __m128 b = _mm_min_ps(_mm_max_ps(_mm_mul_ps(_mm_loadu_ps(src + i + 4), vinv), lim_lo), lim_hi);
        __m128i q = _mm_packs_epi32(_mm_cvtps_epi32(a), _mm_cvtps_epi32(b));
        q = _mm_min_epi16(_mm_max_epi16(_mm_add_epi16(q, zp), qmin), qmax);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + i), _mm_sub_epi16(q, zp));
    }
#endif
    for (; i < n; ++i) {
        const float r = std::nearbyint(std::clamp(src[i] * inv, -1024.0f, 1024.0f));
        const auto q = std::clamp(static_cast<std::int32_t>(r) + zero_point, -128, 127);
        dst[i] = static_cast<std::int16_t>(q - zero_point);
    }
}

// acc[y*w + x] = sum_t weight[t] * src[offset[t] + y*pw + x], taps taken in pairs
void accumulate_taps(const std::int16_t* src, const std::vector<std::uint32_t>& offsets,
                     const std::vector<std::int32_t>& pair_weights, std::size_t h, std::size_t w, std::size_t pw,
                     std::int32_t* acc) {
    const std::size_t n = offsets.size();
    for (std::size_t y = 0; y < h; ++y) {
        const std::int16_t* row = src + y * pw;
        std::int32_t* dst = acc + y * w;
        std::size_t x = 0;
#if defined(__SSE2__)
        for (; x + 8 <= w; x += 8) {
            __m128i lo = _mm_setzero_si128(), hi = _mm_setzero_si128();
            for (std::size_t t = 0; t < n; t += 2) {
                const __m128i a = _mm_loadu_si128(reinterpret_cast<const __m128i*>(row + offsets[t] + x));
                const __m128i b = _mm_loadu_si128(reinterpret_cast<const __m128i*>(row + offsets[t + 1] + x));
                const __m128i wp = _mm_set1_epi32(pair_weights[t / 2]);
                lo = _mm_add_epi32(lo, _mm_madd_epi16(_mm_unpacklo_epi16(a, b), wp));
                hi = _mm_add_epi32(hi, _mm_madd_epi16(_mm_unpackhi_epi16(a, b), wp));
            }
            _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + x), lo);
            _mm_storeu_si128(reinterpret_cast<__m128i*>(dst + x + 4), hi);
        }
#endif
        for (; x < w; ++x) {
            std::int32_t s = 0;
            for (std::size_t t = 0; t < n; t += 2) {
                const std::int32_t wp = pair_weights[t / 2];
                const auto w0 = static_cast<std::int16_t>(wp & 0xFFFF);
                const auto w1 = static_cast<std::int16_t>(wp >> 16);
                s += w0 * row[offsets[t] + x] + w1 * row[offsets[t + 1] + x];
            }
            dst[x] = s;
        }
    }
}

// Taps padded to an even count with a zero-weight duplicate.
void pack_taps(const std::vector<QuantizedEngine::Tap>& taps, std::size_t plane_stride, std::size_t pw,
               std::vector<std::uint32_t>& offsets, std::vector<std::int32_t>& pair_weights) {
    offsets.clear();
    pair_weights.clear();
    for (const auto& t : taps) offsets.push_back(static_cast<std::uint32_t>(t.ci * plane_stride + t.ky * pw + t.kx));
    std::vector<std::int16_t> ws;
    for (const auto& t : taps) ws.push_back(t.w);
    if (offsets.size() % 2) {
        offsets.push_back(offsets.empty() ? 0 : offsets.back());
        ws.push_back(0);
    }
    for (std::size_t i = 0; i < ws.size(); i += 2) {
        const auto lo = static_cast<std::uint16_t>(ws[i]);
        const auto hi = static_cast<std::uint16_t>(ws[i + 1]);
        pair_weights.push_back(static_cast<std::int32_t>(static_cast<std::uint32_t>(lo) |
                                                         (static_cast<std::uint32_t>(hi) << 16)));
    }
}

}  // namespace

Tensor QuantizedEngine::int_conv(const Prepared& p, const Tensor& x, PaddingRule pad, const std::vector<float>* rows) {
    const QuantizedLayer& l = *p.layer;
    if (x.rank() != 3 || x.dim(0) != p.cin) {
        throw ValidationError("quantized conv " + l.name + ": input " + shape_str(x.shape()) + " has wrong channels");
    }
    const std::size_t h = x.dim(1), w = x.dim(2), r = p.k / 2;
    const std::size_t ph = h + 2 * r, pw = w + 2 * r, plane = h * w;
    // activations shifted by the zero point, so zero padding stays zero
    padded_.assign(p.cin * ph * pw + 8, 0);
    const float inv = 1.0f / l.input.scale;
    for (std::size_t ci = 0; ci < p.cin; ++ci) {
        const float* src = x.data().data() + ci * plane;
        std::int16_t* dst = padded_.data() + ci * ph * pw;
        for (std::size_t py = 0; py < ph; ++py) {
            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(py) - static_cast<std::ptrdiff_t>(r);
            if (pad == PaddingRule::Zero) {
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            } else {
                sy = std::clamp<std::ptrdiff_t>(sy, 0, static_cast<std::ptrdiff_t>(h) - 1);
            }
            const float* row = src + static_cast<std::size_t>(sy) * w;
            std::int16_t* prow = dst + py * pw;
            quantize_row(row, prow + r, w, inv, l.input.zero_point);
            if (pad == PaddingRule::WrapClamp) {
                for (std::size_t j = 0; j < r; ++j) {
                    prow[j] = prow[w + j];
                    prow[r + w + j] = prow[r + j];
                }
            }
        }
    }
    Tensor out({p.cout, h, w});
    acc_.resize(plane);
    for (std::size_t co = 0; co < p.cout; ++co) {
        pack_taps(p.taps[co], ph * pw, pw, offsets_, pair_weights_);
        accumulate_taps(padded_.data(), offsets_, pair_weights_, h, w, pw, acc_.data());
        const float comb = l.input.scale * l.weight.scales[co];
        const float b = l.bias[co];
        float* o = out.data().data() + co * plane;
        for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<float>(acc_[i]) * comb;
        if (rows) {
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) o[y * w + xx] *= (*rows)[y];
        }
        for (std::size_t i = 0; i < plane; ++i) o[i] += b;
    }
    return out;
}

Tensor QuantizedEngine::conv(const std::string& layer, const Tensor& x, PaddingRule pad) {
    const auto& l = model_->layer(layer);
    if (!l.quantized) return kernels::conv2d<float>(x, l.float_weight, &l.bias, pad);
    return int_conv(prepared(layer), x, pad, nullptr);
}

Tensor QuantizedEngine::eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) {
    const auto& l = model_->layer(layer);
    if (!l.quantized) {
        Tensor out = kernels::conv2d<float>(x, l.float_weight, nullptr, PaddingRule::WrapClamp);
        const std::size_t c = out.dim(0), h = out.dim(1), w = out.dim(2);
        for (std::size_t co = 0; co < c; ++co)
            for (std::size_t y = 0; y < h; ++y) {
                float* row = out.data().data() + (co * h + y) * w;
                for (std::size_t xx = 0; xx < w; ++xx) row[xx] *= rows[y];
                for (std::size_t xx = 0; xx < w; ++xx) row[xx] += l.bias[co];
            }
        return out;
    }
    return int_conv(prepared(layer), x, PaddingRule::WrapClamp, &rows);
}

Tensor QuantizedEngine::temporal(const std::string& layer, const Tensor& clip) {
    const auto& l = model_->layer(layer);
    if (!l.quantized) return kernels::temporal_conv<float>(clip, l.float_weight, l.bias);
    const auto& p = prepared(layer);
    if (clip.rank() != 4 || clip.dim(0) != p.k || clip.dim(1) != p.cout) {
        throw ValidationError("quantized temporal " + l.name + ": clip shape " + shape_str(clip.shape()));
    }
    const std::size_t c = clip.dim(1), plane = clip.dim(2) * clip.dim(3);
    padded_.resize(clip.size() + 8);
    const float inv = 1.0f / l.input.scale;
    quantize_row(clip.data().data(), padded_.data(), clip.size(), inv, l.input.zero_point);
    Tensor out({c, clip.dim(2), clip.dim(3)});
    acc_.resize(plane);
    for (std::size_t ch = 0; ch < c; ++ch) {
        // frame t of channel ch sits at (t*c + ch)*plane
        pack_taps(p.taps[ch], 0, c * plane, offsets_, pair_weights_);
        accumulate_taps(padded_.data() + ch * plane, offsets_, pair_weights_, 1, plane, plane, acc_.data());
        const float comb = l.input.scale * l.weight.scales[ch];
        float* o = out.data().data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<float>(acc_[i]) * comb;
        for (std::size_t i = 0; i < plane; ++i) o[i] += l.bias[ch];
    }
    return out;
}

Tensor QuantizedEngine::attention(const std::string& layer, const Tensor& f_t, const Tensor& f_prev,
                                  const std::vector<float>& rows) {
    const auto& l = model_->layer(layer);
    if (l.quantized) throw ValidationError("attention layers are never quantized");
    return attention_forward(f_t, f_prev, l.float_weight, l.bias, rows);
}

Tensor QuantizedEngine::forward(const Tensor& clip) { return run_topology(model_->config, *this, clip); }

Tensor qforward(const QuantizedModel& model, const Tensor& clip) {
    QuantizedEngine engine(model);
    return engine.forward(clip);
}

// ---------------------------------------------------------------------------
// Quantized checkpoint.

namespace {

std::string join_floats(const std::vector<float>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += format_double(v[i]);
    }
    return out;
}

std::vector<float> split_floats(const std::string& s) {
    std::vector<float> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<float>(std::stod(item)));
    return out;
}

std::string to_hex_bits(const std::vector<std::uint8_t>& bits) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (std::size_t i = 0; i < bits.size(); i += 4) {
        int nib = 0;
        for (std::size_t j = 0; j < 4 && i + j < bits.size(); ++j) nib |= (bits[i + j] ? 1 : 0) << j;
        out += digits[nib];
    }
    return out;
}

std::vector<std::uint8_t> from_hex_bits(const std::string& hex, std::size_t n) {
    if (hex.size() != (n + 3) / 4) throw ValidationError("mask bitmap has wrong length");
    std::vector<std::uint8_t> bits(n);
    for (std::size_t i = 0; i < n; ++i) {
        const char c = hex[i / 4];
        const int nib = c >= 'a' ? c - 'a' + 10 : c - '0';
        if (nib < 0 || nib > 15) throw ValidationError("mask bitmap is not hex");
        bits[i] = (nib >> (i % 4)) & 1;
    }
    return bits;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError("quantized checkpoint is missing '" + key + "'");
    return it->second;
}

}  // namespace

void save_quantized(const std::filesystem::path& path, const QuantizedModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    os << "format=act360-quantized\nversion=1\n" << config_manifest(model.config);
    for (const auto& l : model.layers) {
        const std::string k = "layer." + l.name + ".";
        os << k << "scheme=" << (l.quantized ? "int8-per-channel" : "fp32") << '\n';
        if (l.quantized) {
            os << k << "scales=" << join_floats(l.weight.scales) << '\n';
            os << k << "flagged=" << to_hex_bits(l.weight.flagged) << '\n';
            os << k << "act_scale=" << format_double(l.input.scale) << '\n';
            os << k << "act_zero_point=" << l.input.zero_point << '\n';
            os << k << "act_degenerate=" << (l.input.degenerate ? 1 : 0) << '\n';
        }
    }
    for (const auto& [name, bits] : model.masks) os << "mask." << name << '=' << to_hex_bits(bits) << '\n';
    os << "end_manifest\n";
    for (const auto& l : model.layers) {
        if (l.quantized) {
            write_tensor(os, l.weight.q);
        } else {
            write_tensor(os, l.float_weight);
        }
        write_tensor(os, l.bias);
    }
    if (!os) throw RuntimeFailure("write failed: " + path.string());
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open quantized checkpoint " + path.string());
    const auto kv = read_manifest(is);
    if (need(kv, "format") != "act360-quantized") throw ValidationError("not a quantized act360 checkpoint");
    QuantizedModel qm;
    qm.config = parse_config_manifest(kv);
    for (const auto& spec : layer_specs(qm.config)) {
        QuantizedLayer l;
        l.name = spec.name;
        l.kind = spec.kind;
        l.category = spec.category;
        const std::string k = "layer." + l.name + ".";
        l.quantized = need(kv, k + "scheme") == "int8-per-channel";
        if (l.quantized) {
            l.weight.scales = split_floats(need(kv, k + "scales"));
            l.weight.flagged = from_hex_bits(need(kv, k + "flagged"), l.weight.scales.size());
            l.input.scale = static_cast<float>(std::stod(need(kv, k + "act_scale")));
            l.input.zero_point = std::stoi(need(kv, k + "act_zero_point"));
            l.input.degenerate = need(kv, k + "act_degenerate") == "1";
            l.weight.q = read_int8_tensor(is);
            if (l.weight.q.shape != spec.weight_shape || l.weight.scales.size() != spec.weight_shape[0]) {
                throw ValidationError("quantized checkpoint: shape mismatch for layer " + l.name);
            }
        } else {
            l.float_weight = read_tensor(is);
            if (l.float_weight.shape() != spec.weight_shape) {
                throw ValidationError("quantized checkpoint: shape mismatch for layer " + l.name);
            }
        }
        l.bias = read_tensor(is);
        qm.layers.push_back(std::move(l));
    }
    for (const auto& [key, value] : kv) {
        if (key.rfind("mask.", 0) != 0) continue;
        const std::string name = key.substr(5);
        const auto layer_name = name.substr(0, name.find('.'));
        const auto& spec_shape = qm.layer(layer_name).quantized ? qm.layer(layer_name).weight.q.shape
                                                                : qm.layer(layer_name).float_weight.shape();
        qm.masks[name] = from_hex_bits(value, shape_numel(spec_shape));
    }
    return qm;
}

// ---------------------------------------------------------------------------
// Pruning.

std::size_t PruneMask::unmasked() const {
    std::size_t n = 0;
    for (const auto& [name, m] : masks) n += static_cast<std::size_t>(std::count(m.begin(), m.end(), 1));
    return n;
}

std::size_t PruneMask::total() const {
    std::size_t n = 0;
    for (const auto& [name, m] : masks) n += m.size();
    return n;
}

double PruneMask::sparsity() const {
    const auto t = total();
    return t ? 1.0 - static_cast<double>(unmasked()) / static_cast<double>(t) : 0.0;
}

PruneMask initial_mask(const Model& model, const OptimizationPolicy& policy) {
    PruneMask m;
    for (const auto& spec : layer_specs(model.config)) {
        if (!policy.prunes(spec)) continue;
        const std::string name = spec.name + ".weight";
        m.masks[name] = std::vector<std::uint8_t>(model.param(name).size(), 1);
    }
    m.unmasked_history.push_back(m.unmasked());
    return m;
}

PruneMask prune_step(const Model& model, const PruneMask& mask, double rate, const OptimizationPolicy& policy) {
    if (!(rate > 0.0 && rate < 1.0)) throw ValidationError("prune_step: rate must lie in (0,1)");
    struct Candidate {
        float magnitude;
        std::size_t layer;
        std::size_t index;
        const std::string* name;
    };
    std::vector<Candidate> cands;
    const auto specs = layer_specs(model.config);
    std::vector<std::string> names;
    for (const auto& spec : specs)
        if (policy.prunes(spec)) names.push_back(spec.name + ".weight");
    for (const auto& [name, m] : mask.masks) {
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            throw ValidationError("prune_step: mask covers non-prunable tensor " + name);
        }
    }
    for (std::size_t li = 0; li < names.size(); ++li) {
        const auto it = mask.masks.find(names[li]);
        if (it == mask.masks.end()) throw ValidationError("prune_step: mask is missing " + names[li]);
        const Tensor& w = model.param(names[li]);
        if (it->second.size() != w.size()) throw ValidationError("prune_step: mask size mismatch for " + names[li]);
        for (std::size_t i = 0; i < w.size(); ++i)
            if (it->second[i]) cands.push_back({std::abs(w[i]), li, i, &names[li]});
    }
    if (cands.empty()) throw ValidationError("prune_step: every prunable weight is already masked");
    const auto count = std::min(
        cands.size(),
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(cands.size())))));
    auto less = [](const Candidate& a, const Candidate& b) {
        if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.index < b.index;
    };
    std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(count - 1), cands.end(), less);
    PruneMask out = mask;
    for (std::size_t i = 0; i < count; ++i) out.masks[*cands[i].name][cands[i].index] = 0;
    ++out.iteration;
    out.unmasked_history.push_back(out.unmasked());
    return out;
}

void apply_mask(Model& model, const PruneMask& mask) {
    for (const auto& [name, m] : mask.masks) {
        Tensor& w = model.param(name);
        if (m.size() != w.size()) throw ValidationError("apply_mask: size mismatch for " + name);
        for (std::size_t i = 0; i < w.size(); ++i)
            if (!m[i]) w[i] = 0.0f;
    }
}

PruneResult prune_iterative(const Model& model, std::size_t iterations, double rate, const FinetuneOptions& finetune,
                            const OptimizationPolicy& policy) {
    PruneResult result;
    result.model = model;
    result.mask = initial_mask(model, policy);
    std::optional<double> reference;
    if (finetune.score && iterations > 0) reference = finetune.score(model);
    for (std::size_t it = 0; it < iterations; ++it) {
        PruneMask next = prune_step(result.model, result.mask, rate, policy);
        Model candidate = result.model;
        apply_mask(candidate, next);
        if (finetune.train && !finetune.train->empty() && (finetune.epochs > 0 || finetune.max_steps > 0)) {
            DetectorConfig cfg = candidate.config;
            cfg.learning_rate = finetune.learning_rate;
            cfg.epochs = std::max<std::size_t>(1, finetune.epochs);
            TrainOptions opts;
            opts.init = &candidate;
            opts.masks = &next.masks;
            opts.max_steps = finetune.max_steps;
            static const std::vector<Sample> none;
            auto ckpt = train(*finetune.train, finetune.val ? *finetune.val : none, cfg, opts);
            candidate = std::move(ckpt.model);
            candidate.config = model.config;
        }
        if (reference) {
            const double s = finetune.score(candidate);
            if (*reference - s > finetune.max_score_drop) {
                result.stopped_early = true;
                break;
            }
            result.scores.push_back(s);
        }
        result.model = std::move(candidate);
        result.mask = std::move(next);
        ++result.iterations_run;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Deployment size.

namespace {

template <typename U>
void put(std::ostream& os, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
        os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put<std::uint32_t>(os, bits);
}

void write_header(std::ostream& os, const DetectorConfig& c, std::uint8_t kind) {
    os.write("ACTD", 4);
    put<std::uint8_t>(os, 1);
    put<std::uint8_t>(os, kind);
    for (std::size_t v : {c.clip_len, c.height, c.in_channels, c.num_classes, c.anchors, c.spatial_channels1,
                          c.spatial_channels2, c.motion_channels1, c.motion_channels2, c.fusion_channels}) {
        put<std::uint16_t>(os, static_cast<std::uint16_t>(v));
    }
    put<std::uint8_t>(os, static_cast<std::uint8_t>((c.use_eac ? 1 : 0) | (c.use_attention ? 2 : 0)));
    for (double v : {c.erp_cap, c.anchor_w, c.anchor_h}) put_f32(os, static_cast<float>(v));
}

void write_floats(std::ostream& os, std::span<const float> v) {
    for (float f : v) put_f32(os, f);
}

}  // namespace

void write_deployment(std::ostream& os, const Model& model) {
    write_header(os, model.config, 0);
    for (const auto& spec : layer_specs(model.config)) {
        put<std::uint8_t>(os, 0);
        write_floats(os, model.param(spec.name + ".weight").data());
        write_floats(os, model.param(spec.name + ".bias").data());
    }
}

void write_deployment(std::ostream& os, const QuantizedModel& model) {
    write_header(os, model.config, 1);
    for (const auto& l : model.layers) {
        if (!l.quantized) {
            put<std::uint8_t>(os, 0);
            write_floats(os, l.float_weight.data());
        } else {
            const auto& q = l.weight.q.data;
            const std::size_t nonzero = q.size() - static_cast<std::size_t>(std::count(q.begin(), q.end(), 0));
            const std::size_t dense = q.size(), sparse = 4 + 3 * nonzero;
            const bool use_sparse = 2 * nonzero < q.size() && sparse < dense && q.size() <= 65536;
            if (use_sparse) {
                put<std::uint8_t>(os, 2);
                put<std::uint32_t>(os, static_cast<std::uint32_t>(nonzero));
                for (std::size_t i = 0; i < q.size(); ++i) {
                    if (q[i] == 0) continue;
                    put<std::uint16_t>(os, static_cast<std::uint16_t>(i));
                    put<std::int8_t>(os, q[i]);
                }
            } else {
                put<std::uint8_t>(os, 1);
                os.write(reinterpret_cast<const char*>(q.data()), static_cast<std::streamsize>(q.size()));
            }
            write_floats(os, l.weight.scales);
            put_f32(os, l.input.scale);
            put<std::int8_t>(os, static_cast<std::int8_t>(l.input.zero_point));
        }
        write_floats(os, l.bias.data());
    }
}

std::size_t deployment_size(const Model& model) {
    std::ostringstream os;
    write_deployment(os, model);
    return os.str().size();
}

std::size_t deployment_size(const QuantizedModel& model) {
    std::ostringstream os;
    write_deployment(os, model);
    return os.str().size();
}

std::size_t fp32_weight_payload(const Tensor& weight) { return 4 * weight.size(); }

std::size_t int8_weight_payload(const ChannelQuant& q) { return q.q.data.size() + 4 * q.scales.size(); }

// ---------------------------------------------------------------------------
// Measurement.

std::vector<MeasureReport> measure(const std::vector<Variant>& variants, const std::vector<Sample>& test,
                                   const DetectorConfig& config, const EvalConfig& eval, std::size_t min_frames) {
    std::vector<MeasureReport> reports(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v) {
        reports[v].variant = variants[v].name;
        reports[v].size_bytes = variants[v].size_bytes;
    }
    if (test.empty()) return reports;
    const auto gt = [&] {
        std::vector<Detection> out;
        for (const auto& s : test)
            for (const auto& o : s.objects) out.push_back(Detection{s.video_id, s.frame, o.box, o.label, 1.0});
        return out;
    }();
    // accuracy: one pass per video so smoothing sees whole tubes
    std::map<std::string, std::vector<Sample>> by_video;
    for (const auto& s : test) by_video[s.video_id].push_back(s);
    for (std::size_t v = 0; v < variants.size(); ++v) {
        std::vector<Detection> dets;
        for (const auto& [id, clips] : by_video) {
            auto res = infer_with(clips, variants[v].predictor, config, variants[v].post);
            dets.insert(dets.end(), res.detections.begin(), res.detections.end());
        }
        reports[v].detections = dets.size();
        reports[v].map = frame_map(dets, gt, eval).mean;
    }
    // latency: per-frame prediction plus per-frame post-processing, interleaved
    using Clock = std::chrono::steady_clock;
    std::size_t frames = 0;
    while (frames < min_frames) {
        for (const auto& s : test) {
            for (std::size_t v = 0; v < variants.size(); ++v) {
                PostprocessSettings per_frame = variants[v].post;
                per_frame.smooth = false;
                const auto t0 = Clock::now();
                Tensor pred = variants[v].predictor(s.clip);
                auto dets = run_postprocess(decode_predictions(pred, config, s.video_id, s.frame), per_frame);
                const auto t1 = Clock::now();
                reports[v].latency.per_frame_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            ++frames;
        }
    }
    return reports;
}

}  // namespace act360
