#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "act360/annotate.hpp"
#include "act360/detector.hpp"
#include "act360/eval.hpp"

namespace act360 {

struct SyntheticConfig {
    std::size_t videos = 40;
    std::size_t frames = 12;
    std::size_t height = 32;
    std::size_t channels = 3;
    std::vector<std::string> classes{"climb_ladder", "break_door"};
    double fps = 1.0;
    double noise = 0.03;
    double blob_radius = 0.30;      // angular radius, radians
    double pole_fraction = 0.35;    // share of blobs placed at |lat| in [0.9, 1.2]
    double seam_fraction = 0.30;    // share of blobs that cross lon = +-pi
    double second_blob_fraction = 0.25;

    void validate() const;
};

struct VideoData {
    std::string video_id;
    std::string condition;
    std::vector<Tensor> frames;                  // [C,H,W] each
    std::vector<std::vector<GtObject>> objects;  // per frame
};

struct Dataset {
    std::vector<std::string> classes;
    double fps = 1.0;
    std::vector<VideoData> videos;

    const VideoData& video(const std::string& id) const;
    std::vector<std::string> video_ids() const;
};

/// Textured spherical caps moving along lat/lon trajectories, rendered per
/// pixel on the sphere; boxes come from the cap geometry.
Dataset gen_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// Analytic ERP box of a spherical cap (center lat/lon, angular radius).
Box cap_box(double lat, double lon, double radius);

/// clips/<video_id>/<frame>.t, clips/manifest.json, annotations.csv, metadata.txt
void write_dataset(const std::filesystem::path& root, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& root);

std::vector<RoiAnnotation> dataset_annotations(const Dataset& data);
std::vector<VideoMeta> dataset_metadata(const Dataset& data);

/// Clips whose key frame is the last of clip_len consecutive frames, for the
/// given videos (all when ids is empty).
std::vector<Sample> make_clips(const Dataset& data, std::size_t clip_len, const std::vector<std::string>& ids = {});

/// Per-frame ground truth for the key frames covered by make_clips.
std::vector<Detection> clip_ground_truth(const std::vector<Sample>& clips);

}  // namespace act360
