#pragma once

#include <optional>
#include <string>
#include <vector>

#include "act360/box.hpp"

namespace act360 {

struct TubeEntry {
    std::size_t frame = 0;
    Box box;
    double confidence = 0.0;

    friend bool operator==(const TubeEntry&, const TubeEntry&) = default;
};

/// Temporally linked detections of one label. Frames strictly increase.
struct ActionTube {
    std::string video_id;
    std::size_t label = 0;
    std::vector<TubeEntry> entries;

    double mean_confidence() const;
    friend bool operator==(const ActionTube&, const ActionTube&) = default;
};

/// Detections with confidence >= tau, original order kept.
std::vector<Detection> confidence_filter(const std::vector<Detection>& dets, double tau);

/// Greedy NMS within each (video, frame, label) group. Candidates are visited
/// by confidence descending, then smaller x1, then smaller y1; a candidate is
/// dropped when its wrap_iou with an already kept box exceeds iou_thr.
/// Output follows that visiting order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr);

/// Ordering used by nms (true when a is visited before b).
bool nms_precedes(const Detection& a, const Detection& b);

/// Frame-to-frame greedy linking of same-label detections. per_frame[i] holds
/// the detections of one frame; frame numbers come from Detection::frame.
std::vector<ActionTube> link_tubes(const std::vector<std::vector<Detection>>& per_frame, double link_iou);

/// Groups detections by (video, label, frame) and links each group.
std::vector<ActionTube> link_tubes_by_label(const std::vector<Detection>& dets, double link_iou);

/// Centered, edge-truncated moving average of confidences and box
/// coordinates; x is averaged in seam-unrolled coordinates then re-wrapped.
ActionTube temporal_smooth(const ActionTube& tube, std::size_t window);

struct PostprocessSettings {
    double confidence_threshold = 0.25;
    double nms_iou = 0.5;
    double link_iou = 0.3;
    std::size_t smooth_window = 5;
    bool threshold = true;
    bool suppress = true;
    bool smooth = true;
};

/// Thresholding, NMS, then tube linking with smoothing for one video's
/// detections (any number of frames). Never adds detections.
std::vector<Detection> run_postprocess(const std::vector<Detection>& dets, const PostprocessSettings& settings);

/// Flattens tubes back to per-frame detections.
std::vector<Detection> tubes_to_detections(const std::vector<ActionTube>& tubes);

}  // namespace act360
