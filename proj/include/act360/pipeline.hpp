#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "act360/debrief.hpp"
#include "act360/detector.hpp"
#include "act360/eval.hpp"
#include "act360/optimize.hpp"
#include "act360/synthetic.hpp"

namespace act360 {

struct OptimizeSettings {
    std::size_t iterations = 3;
    double rate = 0.02;
    double finetune_lr = 1e-5;
    std::size_t finetune_epochs = 10;
    double max_score_drop = 0.02;
    std::size_t calib_frames = 100;
    double percentile = 99.9;
    std::size_t min_frames = 100;
};

struct DebriefSettings {
    std::string subject = "the firefighter";
    std::string lexicon;  // path; empty = built-in
};

/// Everything one experiment needs; read from a single JSON document with
/// sections seed, synthetic, detector, postprocess, eval, optimize, debrief.
struct Settings {
    std::uint64_t seed = 0;
    SyntheticConfig synthetic;
    DetectorConfig detector;
    PostprocessSettings post;
    EvalConfig eval;
    OptimizeSettings optimize;
    DebriefSettings debrief;

    /// Unknown keys and wrong types are rejected with their JSON path.
    static Settings from_json(const std::string& text);
    std::string to_json() const;
    /// "section.key=value" with a JSON value (bare words are strings).
    void apply_override(const std::string& assignment);
    void validate() const;
};

struct SplitClips {
    std::vector<Sample> train, val, test;
    DatasetSplit ids;
};

/// Video-level split (seeded) and clips of detector.clip_len frames.
SplitClips split_clips(const Dataset& data, const Settings& settings);

/// Detector configuration adapted to the dataset geometry and classes.
DetectorConfig detector_for(const Dataset& data, const Settings& settings);

ModelCheckpoint train_detector(const SplitClips& clips, const DetectorConfig& config);

using Predictor = std::function<Tensor(const Tensor&)>;

/// Per-video inference over clips (any order) with the given post-processing.
std::vector<Detection> detect(const std::vector<Sample>& clips, const Predictor& predictor,
                              const DetectorConfig& config, const PostprocessSettings& post);

struct OptimizedModel {
    PruneResult pruned;
    ActivationRanges ranges;
    QuantizedModel quantized;
};

/// Calibration clips: a seeded sample of the training clips.
std::vector<Tensor> calibration_clips(const std::vector<Sample>& train, std::size_t count, std::uint64_t seed);

/// Iterative pruning with fine-tuning (validation frame-mAP budget), then
/// calibration and int8 quantization of the pruned model.
OptimizedModel optimize_model(const Model& model, const SplitClips& clips, const Settings& settings,
                              bool prune = true);

struct BenchRow {
    std::string variant;
    std::optional<double> map;
    double median_ms = 0.0;
    double mean_ms = 0.0;
    std::size_t size_bytes = 0;
    double sparsity = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;  // baseline, +NTC, +NTCQ, +NTCQP
    std::size_t frames_timed = 0;
    std::size_t prune_iterations = 0;
    bool prune_stopped_early = false;

    std::string to_json() const;
    std::string to_text() const;
};

/// The four-variant ablation: raw decoding, then post-processing, then int8,
/// then pruning plus int8, timed interleaved on the test clips.
BenchReport run_bench(const Model& model, const SplitClips& clips, const Settings& settings);

}  // namespace act360
