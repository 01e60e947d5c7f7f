#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "act360/autodiff.hpp"
#include "act360/box.hpp"
#include "act360/erp.hpp"
#include "act360/postprocess.hpp"
#include "act360/tensor.hpp"

namespace act360 {

/// Component families that the optimization policy distinguishes.
enum class LayerCategory {
    Spatial2D,         // plain 2D convolutions of the key-frame branch
    Eac,               // equirectangular-aware convolutions
    Temporal3D,        // temporal branch
    Fusion,            // channel fusion (CFAM stand-in)
    SpatialAttention,  // motion gate projection
    Head,              // classification and box regression head
};

const char* category_name(LayerCategory c);
LayerCategory category_from_name(const std::string& name);

enum class LayerKind { Conv, EacConv, Temporal, AttentionGate };

struct DetectorConfig {
    std::size_t clip_len = 8;
    std::size_t height = 32;
    std::size_t width = 64;
    std::size_t in_channels = 3;
    std::size_t num_classes = 2;
    std::size_t anchors = 1;
    std::size_t spatial_channels1 = 8;
    std::size_t spatial_channels2 = 16;
    std::size_t motion_channels1 = 8;
    std::size_t motion_channels2 = 16;
    std::size_t fusion_channels = 16;
    bool use_eac = true;
    bool use_attention = true;
    double erp_cap = 8.0;
    double anchor_w = 0.12;
    double anchor_h = 0.25;

    double learning_rate = 1e-3;
    std::size_t batch_size = 4;
    std::size_t epochs = 30;
    std::size_t patience = 6;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t grid_h() const { return height / 4; }
    std::size_t grid_w() const { return width / 4; }
    std::size_t head_channels() const { return anchors * (5 + num_classes); }

    friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

struct LayerSpec {
    std::string name;
    LayerKind kind;
    LayerCategory category;
    Shape weight_shape;
    std::size_t bias_len;
};

/// The fixed layer list for a configuration, in execution-independent order.
std::vector<LayerSpec> layer_specs(const DetectorConfig& config);

template <typename T>
using ParamMap = std::map<std::string, BasicTensor<T>>;

/// All learnable tensors, keyed "<layer>.weight" / "<layer>.bias".
struct Model {
    DetectorConfig config;
    ParamMap<float> params;

    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);
    std::size_t parameter_count() const;

    template <typename T>
    ParamMap<T> params_as() const {
        ParamMap<T> out;
        for (const auto& [k, v] : params) out.emplace(k, v.template cast<T>());
        return out;
    }

    friend bool operator==(const Model&, const Model&) = default;
};

Model init_model(const DetectorConfig& config, std::uint64_t seed);

/// Records the dual-stream forward pass on a tape and returns raw predictions
/// [A(5+K), H/4, W/4]. bound receives the tape variables of every parameter.
template <typename T>
Var<T> build_forward(Tape<T>& tape, const DetectorConfig& config, const ParamMap<T>& params,
                     const BasicTensor<T>& clip, std::map<std::string, Var<T>>* bound = nullptr);

/// Raw predictions for one clip [T,C,H,W].
Tensor forward(const Tensor& clip, const Model& model);

struct GtObject {
    Box box;
    std::size_t label = 0;
    friend bool operator==(const GtObject&, const GtObject&) = default;
};

/// One training or evaluation example: a clip whose last frame is the key frame.
struct Sample {
    std::string video_id;
    std::size_t frame = 0;  // key-frame index within the video
    Tensor clip;
    std::vector<GtObject> objects;
};

struct CellTarget {
    std::size_t cell_y = 0;
    std::size_t cell_x = 0;
    double offset_x = 0.0;
    double offset_y = 0.0;
    double log_w = 0.0;
    double log_h = 0.0;
    std::size_t label = 0;
};

/// Each object is assigned to the cell containing its center; a cell keeps
/// its first object.
std::vector<CellTarget> build_targets(const std::vector<GtObject>& objects, const DetectorConfig& config);

/// Objectness BCE over every cell plus class cross-entropy and smooth-L1 box
/// terms on positive cells.
template <typename T>
Var<T> detection_loss(Var<T> pred, const std::vector<CellTarget>& targets, std::size_t num_classes);

/// Converts raw predictions into one detection per cell.
std::vector<Detection> decode_predictions(const Tensor& pred, const DetectorConfig& config,
                                          const std::string& video_id, std::size_t frame);

struct ModelCheckpoint {
    Model model;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    std::vector<double> train_loss;  // mean loss per epoch
    std::vector<double> val_loss;
    std::vector<double> step_loss;   // per optimizer step
    std::uint64_t seed = 0;

    friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

/// Boolean keep-mask per prunable weight tensor (true = weight active).
using WeightMasks = std::map<std::string, std::vector<std::uint8_t>>;

struct TrainOptions {
    /// Start from these parameters instead of a fresh initialisation.
    const Model* init = nullptr;
    /// Masked weights stay exactly zero and receive no update.
    const WeightMasks* masks = nullptr;
    /// Stop after this many optimizer steps (0 = unlimited).
    std::size_t max_steps = 0;
};

/// Adam training with early stopping on validation loss (when val is not
/// empty); the returned model holds the best-validation parameters.
ModelCheckpoint train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                      const DetectorConfig& config, const TrainOptions& options = {});

/// Mean detection loss over a sample set.
double evaluate_loss(const Model& model, const std::vector<Sample>& samples);

/// Layer-by-layer executor used by the inference engines.
class LayerRunner {
public:
    virtual ~LayerRunner() = default;
    virtual Tensor conv(const std::string& layer, const Tensor& x, PaddingRule pad) = 0;
    virtual Tensor eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) = 0;
    virtual Tensor temporal(const std::string& layer, const Tensor& clip) = 0;
    virtual Tensor attention(const std::string& layer, const Tensor& f_t, const Tensor& f_prev,
                             const std::vector<float>& rows) = 0;
};

/// The network topology over an arbitrary runner.
Tensor run_topology(const DetectorConfig& config, LayerRunner& runner, const Tensor& clip);

/// Full-precision runner reading a Model.
class FloatRunner : public LayerRunner {
public:
    explicit FloatRunner(const Model& model) : model_(&model) {}
    Tensor conv(const std::string& layer, const Tensor& x, PaddingRule pad) override;
    Tensor eac_conv(const std::string& layer, const Tensor& x, const std::vector<float>& rows) override;
    Tensor temporal(const std::string& layer, const Tensor& clip) override;
    Tensor attention(const std::string& layer, const Tensor& f_t, const Tensor& f_prev,
                     const std::vector<float>& rows) override;

private:
    const Model* model_;
};

/// Shared float attention computation (also used by the quantized path).
Tensor attention_forward(const Tensor& f_t, const Tensor& f_prev, const Tensor& weight, const Tensor& bias,
                         const std::vector<float>& rows);

/// Float inference without a tape; bit-identical to forward().
Tensor infer_raw(const Tensor& clip, const Model& model);

struct LatencyStats {
    std::vector<double> per_frame_ms;
    double mean_ms() const;
    double median_ms() const;
    double p95_ms() const;
};

struct InferenceResult {
    std::vector<Detection> detections;
    LatencyStats latency;
};

/// Decoded, post-processed detections for a list of clips of one video
/// (clips ordered by key frame). Latency per frame is measured wall-clock.
InferenceResult infer(const std::vector<Sample>& clips, const Model& model, const PostprocessSettings& settings);

/// Same pipeline over any raw predictor (float or quantized engine).
InferenceResult infer_with(const std::vector<Sample>& clips, const std::function<Tensor(const Tensor&)>& predictor,
                           const DetectorConfig& config, const PostprocessSettings& settings);

/// Checkpoint = text manifest (key=value) followed by serialized tensors.
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Manifest helpers shared with the quantized checkpoint writer.
std::string config_manifest(const DetectorConfig& config);
DetectorConfig parse_config_manifest(const std::map<std::string, std::string>& kv);
std::string format_double(double v);
std::map<std::string, std::string> read_manifest(std::istream& is);

}  // namespace act360
