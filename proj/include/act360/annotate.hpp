#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "act360/box.hpp"
#include "act360/tensor.hpp"

namespace act360 {

struct RoiFrame {
    std::size_t frame = 0;
    double t_seconds = 0.0;
    Box box;
    friend bool operator==(const RoiFrame&, const RoiFrame&) = default;
};

/// One labelled action instance: contiguous frames of one video.
struct RoiAnnotation {
    std::string video_id;
    std::string action;
    std::vector<RoiFrame> frames;
    friend bool operator==(const RoiAnnotation&, const RoiAnnotation&) = default;
};

enum class TrackMethod { Interp, Ncc };

TrackMethod track_method_from_name(const std::string& name);

struct TrackOptions {
    int search_radius_px = 4;
    double min_correlation = 0.5;
};

/// Boxes for every frame from the manual first and last boxes. frames are
/// [C,H,W] tensors; the first and last outputs equal the inputs exactly.
std::vector<Box> track_roi(const std::vector<Tensor>& frames, const Box& roi_start, const Box& roi_end,
                           TrackMethod method, const TrackOptions& options = {});

/// Tracks between manual boxes on frames [first, last] and stamps t = frame/fps.
RoiAnnotation annotate_range(const std::string& video_id, const std::string& action,
                             const std::vector<Tensor>& video_frames, std::size_t first, std::size_t last,
                             const Box& roi_start, const Box& roi_end, double fps, TrackMethod method,
                             const TrackOptions& options = {});

inline constexpr const char* kAnnotationCsvHeader = "video_id,action,frame,t_seconds,x1,y1,x2,y2,wraps";

std::string export_csv(const std::vector<RoiAnnotation>& annotations);
void export_csv(const std::filesystem::path& path, const std::vector<RoiAnnotation>& annotations);

/// Rows with the same video and action on consecutive frames form one
/// annotation. Malformed rows are rejected with line and column.
std::vector<RoiAnnotation> import_csv(const std::string& text);
std::vector<RoiAnnotation> import_csv_file(const std::filesystem::path& path);

/// Violations as readable strings; empty when the dataset passes.
std::vector<std::string> validate_annotations(const std::vector<RoiAnnotation>& annotations,
                                              const std::set<std::string>& vocabulary);

/// Chance-corrected agreement between two label sequences.
double cohens_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace act360
