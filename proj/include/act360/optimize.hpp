#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "act360/detector.hpp"
#include "act360/eval.hpp"

namespace act360 {

struct CategoryRule {
    bool quantize = true;
    bool prune = true;
    bool precision_exempt = false;
};

/// Per-component optimization rules. Attention is always precision-exempt and
/// never pruned; EAC layers may be quantized but are never pruned.
class OptimizationPolicy {
public:
    OptimizationPolicy();

    const CategoryRule& rule(LayerCategory c) const;
    void set(LayerCategory c, CategoryRule r);

    bool quantizes(const LayerSpec& spec) const { return rule(spec.category).quantize; }
    bool prunes(const LayerSpec& spec) const { return rule(spec.category).prune; }

private:
    std::map<LayerCategory, CategoryRule> rules_;
};

// ---------------------------------------------------------------------------
// Calibration and quantization.

struct ActivationRange {
    double lo = 0.0;
    double hi = 0.0;
    bool degenerate = false;  // hi == lo
};

/// Input range per quantized layer, keyed by layer name.
using ActivationRanges = std::map<std::string, ActivationRange>;

struct CalibrationOptions {
    /// Upper percentile over per-clip maxima (the lower bound mirrors it over
    /// per-clip minima).
    double percentile = 99.9;
};

ActivationRanges calibrate(const Model& model, const std::vector<Tensor>& clips, const OptimizationPolicy& policy,
                           const CalibrationOptions& options = {});

/// Symmetric per-output-channel int8 weights (dim 0 is the channel).
struct ChannelQuant {
    Int8Tensor q;
    std::vector<float> scales;
    std::vector<std::uint8_t> flagged;  // all-zero channels, scale forced to 1

    Tensor dequantize() const;
};

ChannelQuant quantize_per_channel(const Tensor& weight);

/// Per-tensor affine int8 activation parameters.
struct ActivationQuant {
    float scale = 1.0f;
    std::int32_t zero_point = 0;
    bool degenerate = false;

    static ActivationQuant from_range(const ActivationRange& range);
    std::int32_t quantize(float v) const;
};

struct QuantizedLayer {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    LayerCategory category = LayerCategory::Spatial2D;
    bool quantized = false;
    ChannelQuant weight;       // when quantized
    ActivationQuant input;     // when quantized
    Tensor float_weight;       // when not quantized
    Tensor bias;
};

struct QuantizedModel {
    DetectorConfig config;
    std::vector<QuantizedLayer> layers;  // layer_specs order
    WeightMasks masks;                   // carried along, not used for execution

    const QuantizedLayer& layer(const std::string& name) const;
    /// Float weight tensor of a layer as the engine sees it.
    Tensor effective_weight(const std::string& name) const;
};

/// Quantizes every layer whose category the policy quantizes; the others keep
/// their float weights bit-for-bit.
QuantizedModel quantize(const Model& model, const OptimizationPolicy& policy, const ActivationRanges& ranges);

/// Simulated integer inference: int8 weights and activations, int32
/// accumulators, dequantized at layer boundaries.
class QuantizedEngine : public LayerRunner {
public:
    explicit QuantizedEngine(const QuantizedModel& model);

    Tensor forward(const Tensor& clip);

    Tensor conv(const std::string& layer, const Tensor& x, PaddingRule pad) override;
    Tensor eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) override;
    Tensor temporal(const std::string& layer, const Tensor& clip) override;
    Tensor attention(const std::string& layer, const Tensor& f_t, const Tensor& f_prev,
                     const std::vector<float>& rows) override;

    struct Tap {
        std::uint32_t ci, ky, kx;
        std::int16_t w;
    };
    struct Prepared {
        const QuantizedLayer* layer = nullptr;
        std::size_t cout = 0, cin = 0, k = 1;
        std::vector<std::vector<Tap>> taps;  // nonzero weights per output channel
    };

private:
    Tensor int_conv(const Prepared& p, const Tensor& x, PaddingRule pad, const std::vector<float>* rows);
    const Prepared& prepared(const std::string& layer) const;

    const QuantizedModel* model_;
    std::map<std::string, Prepared> prepared_;
    std::vector<std::int16_t> padded_;
    std::vector<std::int32_t> acc_;
    std::vector<std::uint32_t> offsets_;
    std::vector<std::int32_t> pair_weights_;
};

Tensor qforward(const QuantizedModel& model, const Tensor& clip);

void save_quantized(const std::filesystem::path& path, const QuantizedModel& model);
QuantizedModel load_quantized(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pruning.

struct PruneMask {
    WeightMasks masks;  // prunable weight tensors only; 1 = kept
    std::size_t iteration = 0;
    std::vector<std::size_t> unmasked_history;  // after each step, starting with the initial count

    std::size_t unmasked() const;
    std::size_t total() const;
    double sparsity() const;
};

/// All prunable weights kept.
PruneMask initial_mask(const Model& model, const OptimizationPolicy& policy);

/// Masks ceil(rate * unmasked) more weights (at least one): the smallest |w|
/// among unmasked prunable weights, ties by layer order then flat index.
PruneMask prune_step(const Model& model, const PruneMask& mask, double rate, const OptimizationPolicy& policy);

/// Zeroes masked weights.
void apply_mask(Model& model, const PruneMask& mask);

struct FinetuneOptions {
    const std::vector<Sample>* train = nullptr;  // no fine-tuning when null
    const std::vector<Sample>* val = nullptr;
    double learning_rate = 1e-5;
    std::size_t epochs = 10;
    std::size_t max_steps = 0;
    /// Validation score (e.g. mAP); drops beyond max_score_drop stop pruning.
    std::function<double(const Model&)> score;
    double max_score_drop = 0.02;
};

struct PruneResult {
    Model model;
    PruneMask mask;
    std::vector<double> scores;  // after each accepted iteration
    std::size_t iterations_run = 0;
    bool stopped_early = false;
};

PruneResult prune_iterative(const Model& model, std::size_t iterations, double rate, const FinetuneOptions& finetune,
                            const OptimizationPolicy& policy);

// ---------------------------------------------------------------------------
// Measurement.

/// Deployment serialization: compact binary header, then per layer its
/// weights (fp32, int8 dense, or int8 index+value when more than half the
/// weights are zero and that is smaller), scales and bias.
void write_deployment(std::ostream& os, const Model& model);
void write_deployment(std::ostream& os, const QuantizedModel& model);
std::size_t deployment_size(const Model& model);
std::size_t deployment_size(const QuantizedModel& model);

/// Bytes of one layer's weight payload: fp32 weights, or int8 weights plus
/// float32 channel scales.
std::size_t fp32_weight_payload(const Tensor& weight);
std::size_t int8_weight_payload(const ChannelQuant& q);

struct MeasureReport {
    std::string variant;
    std::size_t size_bytes = 0;
    LatencyStats latency;
    std::optional<double> map;  // absent for an empty test set
    std::size_t detections = 0;
};

struct Variant {
    std::string name;
    std::function<Tensor(const Tensor&)> predictor;
    PostprocessSettings post;
    std::size_t size_bytes = 0;
};

/// Accuracy and size per variant, plus latency over at least min_frames
/// frames per variant at batch 1. Variants are timed interleaved, clip by
/// clip, so drift in machine load affects them alike.
std::vector<MeasureReport> measure(const std::vector<Variant>& variants, const std::vector<Sample>& test,
                                   const DetectorConfig& config, const EvalConfig& eval,
                                   std::size_t min_frames = 100);

}  // namespace act360
