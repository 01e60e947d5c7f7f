#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "act360/box.hpp"
#include "act360/postprocess.hpp"

namespace act360 {

struct EvalConfig {
    double iou_threshold = 0.5;
    double tube_iou_threshold = 0.5;
    std::vector<std::string> classes;
    double train_ratio = 0.70;
    double val_ratio = 0.15;
    double test_ratio = 0.15;

    void validate() const;
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;
};

/// Shuffles ids with the seed; val and test take round(ratio * n), train the rest.
DatasetSplit split_dataset(const std::vector<std::string>& video_ids, const EvalConfig& cfg, std::uint64_t seed);

/// Scored prediction after matching, used by the AP integrator.
struct ScoredMatch {
    double confidence = 0.0;
    bool true_positive = false;
};

/// All-point interpolated AP. Matches must already be in ranking order.
double average_precision(const std::vector<ScoredMatch>& ranked, std::size_t num_gt);

struct ApReport {
    /// Per class; empty when the class has no ground truth.
    std::vector<std::optional<double>> per_class;
    std::vector<std::size_t> gt_counts;
    /// Mean over classes with ground truth; empty when none has any.
    std::optional<double> mean;
};

/// Frame-level AP. Ground truth uses Detection with confidence ignored.
/// Detections are ranked by confidence (stable for ties) and greedily
/// matched to the best-IoU unmatched ground truth of the same video, frame
/// and label at or above the IoU threshold.
ApReport frame_map(const std::vector<Detection>& dets, const std::vector<Detection>& gt, const EvalConfig& cfg);

/// Spatio-temporal IoU; frames covered by only one tube add that box's area
/// to the union.
double tube_iou(const ActionTube& a, const ActionTube& b);

/// Video-level AP over tubes ranked by mean confidence.
ApReport video_map(const std::vector<ActionTube>& pred, const std::vector<ActionTube>& gt, const EvalConfig& cfg);

/// Builds ground-truth tubes from per-frame ground truth (one tube per run of
/// consecutive frames per video and label).
std::vector<ActionTube> gt_tubes(const std::vector<Detection>& gt);

struct VideoMeta {
    std::string video_id;
    std::string condition;
    std::vector<std::string> actions;
};

std::vector<VideoMeta> read_metadata(const std::string& path);
void write_metadata(const std::string& path, const std::vector<VideoMeta>& meta);

struct ReportRow {
    std::string group;  // "action" or "condition"
    std::string name;
    std::optional<double> frame_ap;
    std::optional<double> video_ap;
    std::size_t videos = 0;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::optional<double> frame_map;
    std::optional<double> video_map;

    std::string to_csv() const;
    std::string to_text() const;
};

/// Per-action AP rows and per-condition mAP rows; conditions without videos
/// are omitted.
EvalReport build_report(const std::vector<Detection>& dets, const std::vector<Detection>& gt,
                        const std::vector<VideoMeta>& meta, const EvalConfig& cfg,
                        const PostprocessSettings& linking = {});

}  // namespace act360
