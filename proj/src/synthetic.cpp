#include "act360/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

#include "act360/erp.hpp"
#include "act360/error.hpp"
#include "act360/rng.hpp"
#include "act360/serialize.hpp"

namespace act360 {

using std::numbers::pi;

void SyntheticConfig::validate() const {
    if (videos < 3) throw ValidationError("synthetic: need at least 3 videos");
    if (frames < 2) throw ValidationError("synthetic: need at least 2 frames per video");
    if (height < 8 || height % 4 != 0) throw ValidationError("synthetic: height must be a multiple of 4 and >= 8");
    if (channels != 3) throw ValidationError("synthetic: only 3 channels are rendered");
    if (classes.empty()) throw ValidationError("synthetic: class list is empty");
    if (!(fps > 0.0)) throw ValidationError("synthetic: fps must be positive");
    if (!(blob_radius > 0.0 && blob_radius < 0.6)) throw ValidationError("synthetic: blob_radius must be in (0, 0.6)");
    if (!(noise >= 0.0)) throw ValidationError("synthetic: noise must be >= 0");
}

const VideoData& Dataset::video(const std::string& id) const {
    for (const auto& v : videos)
        if (v.video_id == id) return v;
    throw NotFound("unknown video id '" + id + "'");
}

std::vector<std::string> Dataset::video_ids() const {
    std::vector<std::string> ids;
    for (const auto& v : videos) ids.push_back(v.video_id);
    return ids;
}

Box cap_box(double lat, double lon, double radius) {
    const double top = std::max(lat - radius, -pi / 2);
    const double bottom = std::min(lat + radius, pi / 2);
    double half_lon = pi;
    const double ratio = std::sin(radius) / std::cos(lat);
    if (std::abs(lat) + radius < pi / 2 && ratio < 1.0) half_lon = std::asin(ratio);
    const double cy = 0.5 * ((top + bottom) / pi + 1.0);
    const double h = (bottom - top) / pi;
    return Box::from_center(wrap_unit(lon / (2 * pi) + 0.5), cy, half_lon / pi, h);
}

namespace {

using Vec3 = std::array<double, 3>;

Vec3 direction(double lat, double lon) {
    return {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
}

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

struct Blob {
    std::size_t label;
    double lat0, lon0, vlat, vlon;
    std::array<double, 3> color;
    double phase;
};

struct Wave {
    Vec3 k;
    double phase;
    double amp;
};

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Class texture in the cap's local tangent frame (u east, v north, in radii).
double texture(std::size_t label, double u, double v, double phase) {
    switch (label % 4) {
        case 0: return std::sin(3.0 * pi * v + phase) > 0.0 ? 1.0 : 0.35;
        case 1: return std::sin(2.5 * pi * u + phase) * std::sin(2.5 * pi * v) > 0.0 ? 1.0 : 0.35;
        case 2: return std::sin(3.0 * pi * u + phase) > 0.0 ? 1.0 : 0.35;
        default: return 0.35 + 0.65 * std::exp(-4.0 * (u * u + v * v));
    }
}

}  // namespace

Dataset gen_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
    config.validate();
    const std::size_t h = config.height, w = 2 * h, k = config.classes.size();
    const ErpGrid grid(h);
    static const char* conditions[] = {"day", "night", "smoke"};
    static const std::array<std::array<double, 3>, 4> palette{
        {{1.0, 0.55, 0.15}, {0.25, 0.8, 1.0}, {0.5, 1.0, 0.3}, {1.0, 0.3, 0.8}}};

    std::vector<Vec3> dirs(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            dirs[y * w + x] = direction(latitude_of_pixel_y(grid, static_cast<double>(y) + 0.5),
                                        longitude_of_pixel_x(grid, static_cast<double>(x) + 0.5));

    Dataset data;
    data.classes = config.classes;
    data.fps = config.fps;
    Rng root(seed);
    const double r = config.blob_radius;
    const double frames = static_cast<double>(config.frames);
    for (std::size_t vi = 0; vi < config.videos; ++vi) {
        char id[32];
        std::snprintf(id, sizeof(id), "vid%03zu", vi);
        Rng rng = root.split(id);
        VideoData video;
        video.video_id = id;
        video.condition = conditions[vi % 3];

        std::vector<Blob> blobs;
        const std::size_t n_blobs = rng.uniform() < config.second_blob_fraction && k > 1 ? 2 : 1;
        const std::size_t first_label = vi % k;
        for (std::size_t b = 0; b < n_blobs; ++b) {
            Blob blob;
            blob.label = (first_label + b) % k;
            const double speed_lat = 0.5 / frames, speed_lon = 1.2 / frames;
            if (blob.label % 2 == 0) {
                blob.vlat = (rng.uniform() < 0.5 ? -1.0 : 1.0) * speed_lat * rng.uniform(0.7, 1.0);
                blob.vlon = speed_lon * rng.uniform(-0.2, 0.2);
            } else {
                blob.vlat = speed_lat * rng.uniform(-0.2, 0.2);
                blob.vlon = (rng.uniform() < 0.5 ? -1.0 : 1.0) * speed_lon * rng.uniform(0.7, 1.0);
            }
            const double placement = rng.uniform();
            const double lat_travel = blob.vlat * (frames - 1.0);
            double lat_mid;
            if (placement < config.pole_fraction) {
                lat_mid = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.9, 1.2);
            } else {
                lat_mid = rng.uniform(-0.7, 0.7);
            }
            const double lat_lim = pi / 2 - r - 0.05;
            blob.lat0 = std::clamp(lat_mid - 0.5 * lat_travel, -lat_lim, lat_lim);
            const double lat_end = blob.lat0 + lat_travel;
            if (std::abs(lat_end) > lat_lim) blob.lat0 -= lat_end - std::copysign(lat_lim, lat_end);
            const double lon_travel = blob.vlon * (frames - 1.0);
            if (placement >= config.pole_fraction && placement < config.pole_fraction + config.seam_fraction) {
                // crosses lon = +-pi halfway through the video
                blob.lon0 = pi - 0.5 * lon_travel;
            } else {
                blob.lon0 = rng.uniform(-pi, pi);
            }
            if (b == 1) blob.lon0 = blobs[0].lon0 + pi;  // keep the second blob apart
            const auto& base = palette[blob.label % palette.size()];
            for (std::size_t c = 0; c < 3; ++c) blob.color[c] = std::clamp(base[c] + 0.1 * rng.normal(), 0.05, 1.0);
            blob.phase = rng.uniform(0.0, 2 * pi);
            blobs.push_back(blob);
        }

        std::vector<Wave> waves;
        for (int i = 0; i < 3; ++i) {
            Vec3 kv{rng.normal(), rng.normal(), rng.normal()};
            const double scale = rng.uniform(1.5, 4.0);
            for (auto& v : kv) v *= scale;
            waves.push_back({kv, rng.uniform(0.0, 2 * pi), rng.uniform(0.04, 0.1)});
        }
        const std::array<double, 3> tint{rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0)};
        const double smoke_lat = rng.uniform(-0.6, 0.6), smoke_lon = rng.uniform(-pi, pi);
        Rng noise_rng = rng.split("noise");

        for (std::size_t f = 0; f < config.frames; ++f) {
            const double t = static_cast<double>(f);
            Tensor frame({3, h, w}, 0.0f);
            std::vector<std::array<double, 5>> geo;  // lat, lon, cos-lat, sin-lat, label
            std::vector<GtObject> objects;
            for (const auto& b : blobs) {
                const double lat = b.lat0 + b.vlat * t;
                const double lon = std::remainder(b.lon0 + b.vlon * t, 2 * pi);
                objects.push_back({cap_box(lat, lon, r), b.label});
                geo.push_back({lat, lon, 0, 0, static_cast<double>(b.label)});
            }
            const Vec3 smoke_dir = direction(smoke_lat, smoke_lon + 0.05 * t);
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const Vec3& p = dirs[y * w + x];
                    double bg = 0.4;
                    for (const auto& wv : waves) bg += wv.amp * std::sin(dot(wv.k, p) + wv.phase);
                    std::array<double, 3> px{bg * tint[0], bg * tint[1], bg * tint[2]};
                    for (std::size_t bi = 0; bi < blobs.size(); ++bi) {
                        const auto& b = blobs[bi];
                        const double lat = geo[bi][0], lon = geo[bi][1];
                        const Vec3 c = direction(lat, lon);
                        const double d = std::acos(std::clamp(dot(c, p), -1.0, 1.0));
                        if (d >= r) continue;
                        const Vec3 east{-std::sin(lon), std::cos(lon), 0.0};
                        const Vec3 north{-std::sin(lat) * std::cos(lon), -std::sin(lat) * std::sin(lon), std::cos(lat)};
                        const double u = dot(p, east) / r, v = dot(p, north) / r;
                        const double alpha = 1.0 - smoothstep(0.8 * r, r, d);
                        const double tex = texture(b.label, u, v, b.phase);
                        for (std::size_t ch = 0; ch < 3; ++ch)
                            px[ch] = (1.0 - alpha) * px[ch] + alpha * b.color[ch] * tex;
                    }
                    double noise = config.noise;
                    if (video.condition == std::string("night")) {
                        for (auto& v : px) v = 0.35 * v + 0.03;
                        noise *= 1.5;
                    } else if (video.condition == std::string("smoke")) {
                        const double ds = std::acos(std::clamp(dot(smoke_dir, p), -1.0, 1.0));
                        const double haze = 0.35 + 0.3 * (1.0 - smoothstep(0.2, 0.9, ds));
                        for (auto& v : px) v = (1.0 - haze) * v + haze * 0.6;
                    }
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        const double v = px[ch] + noise * noise_rng.normal();
                        frame[(ch * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
                }
            }
            video.frames.push_back(std::move(frame));
            video.objects.push_back(std::move(objects));
        }
        data.videos.push_back(std::move(video));
    }
    return data;
}

std::vector<RoiAnnotation> dataset_annotations(const Dataset& data) {
    std::vector<RoiAnnotation> out;
    for (const auto& v : data.videos) {
        if (v.objects.empty()) continue;
        // one annotation per object slot; slots are stable across frames
        const std::size_t slots = v.objects.front().size();
        for (std::size_t s = 0; s < slots; ++s) {
            RoiAnnotation a{v.video_id, data.classes.at(v.objects.front()[s].label), {}};
            for (std::size_t f = 0; f < v.objects.size(); ++f) {
                if (s >= v.objects[f].size()) break;
                a.frames.push_back({f, static_cast<double>(f) / data.fps, v.objects[f][s].box});
            }
            out.push_back(std::move(a));
        }
    }
    return out;
}

std::vector<VideoMeta> dataset_metadata(const Dataset& data) {
    std::vector<VideoMeta> out;
    for (const auto& v : data.videos) {
        VideoMeta m{v.video_id, v.condition, {}};
        for (const auto& o : v.objects.empty() ? std::vector<GtObject>{} : v.objects.front()) {
            const auto& name = data.classes.at(o.label);
            if (std::find(m.actions.begin(), m.actions.end(), name) == m.actions.end()) m.actions.push_back(name);
        }
        out.push_back(std::move(m));
    }
    return out;
}

namespace {

std::string frame_file(std::size_t f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06zu.t", f);
    return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& root, const Dataset& data) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "clips");
    nlohmann::ordered_json manifest;
    manifest["format"] = "act360-clips";
    manifest["fps"] = data.fps;
    manifest["classes"] = data.classes;
    manifest["videos"] = nlohmann::ordered_json::array();
    for (const auto& v : data.videos) {
        const fs::path dir = root / "clips" / v.video_id;
        fs::create_directories(dir);
        for (std::size_t f = 0; f < v.frames.size(); ++f) save_tensor(dir / frame_file(f), v.frames[f]);
        manifest["videos"].push_back({{"id", v.video_id}, {"frames", v.frames.size()}});
    }
    std::ofstream os(root / "clips" / "manifest.json");
    if (!os) throw RuntimeFailure("cannot write clip manifest under " + root.string());
    os << manifest.dump(2) << '\n';
    export_csv(root / "annotations.csv", dataset_annotations(data));
    write_metadata((root / "metadata.txt").string(), dataset_metadata(data));
}

Dataset read_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::ifstream is(root / "clips" / "manifest.json");
    if (!is) throw ValidationError("no clip manifest at " + (root / "clips" / "manifest.json").string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("clip manifest: ") + e.what());
    }
    Dataset data;
    data.fps = manifest.value("fps", 1.0);
    data.classes = manifest.at("classes").get<std::vector<std::string>>();
    std::map<std::string, std::string> condition;
    if (fs::exists(root / "metadata.txt"))
        for (const auto& m : read_metadata((root / "metadata.txt").string())) condition[m.video_id] = m.condition;
    std::map<std::string, std::size_t> index;
    for (const auto& entry : manifest.at("videos")) {
        VideoData v;
        v.video_id = entry.at("id").get<std::string>();
        v.condition = condition.count(v.video_id) ? condition[v.video_id] : "unknown";
        const auto n = entry.at("frames").get<std::size_t>();
        for (std::size_t f = 0; f < n; ++f) v.frames.push_back(load_tensor(root / "clips" / v.video_id / frame_file(f)));
        v.objects.resize(n);
        index[v.video_id] = data.videos.size();
        data.videos.push_back(std::move(v));
    }
    if (fs::exists(root / "annotations.csv")) {
        for (const auto& a : import_csv_file(root / "annotations.csv")) {
            auto it = index.find(a.video_id);
            if (it == index.end()) throw ValidationError("annotations.csv names unknown video '" + a.video_id + "'");
            auto cls = std::find(data.classes.begin(), data.classes.end(), a.action);
            if (cls == data.classes.end()) throw ValidationError("annotations.csv uses unknown action '" + a.action + "'");
            auto& v = data.videos[it->second];
            for (const auto& f : a.frames) {
                if (f.frame >= v.objects.size()) throw ValidationError("annotation frame beyond video length");
                v.objects[f.frame].push_back({f.box, static_cast<std::size_t>(cls - data.classes.begin())});
            }
        }
    }
    return data;
}

std::vector<Sample> make_clips(const Dataset& data, std::size_t clip_len, const std::vector<std::string>& ids) {
    if (clip_len < 1) throw ValidationError("make_clips: clip_len must be >= 1");
    std::vector<Sample> out;
    auto add_video = [&](const VideoData& v) {
        if (v.frames.size() < clip_len) return;
        const Shape fs = v.frames.front().shape();
        for (std::size_t key = clip_len - 1; key < v.frames.size(); ++key) {
            std::vector<float> buf;
            buf.reserve(clip_len * shape_numel(fs));
            for (std::size_t f = key + 1 - clip_len; f <= key; ++f)
                buf.insert(buf.end(), v.frames[f].data().begin(), v.frames[f].data().end());
            Sample s;
            s.video_id = v.video_id;
            s.frame = key;
            s.clip = Tensor({clip_len, fs[0], fs[1], fs[2]}, std::move(buf));
            s.objects = v.objects[key];
            out.push_back(std::move(s));
        }
    };
    if (ids.empty()) {
        for (const auto& v : data.videos) add_video(v);
    } else {
        for (const auto& id : ids) add_video(data.video(id));
    }
    return out;
}

std::vector<Detection> clip_ground_truth(const std::vector<Sample>& clips) {
    std::vector<Detection> gt;
    for (const auto& s : clips)
        for (const auto& o : s.objects) gt.push_back(Detection{s.video_id, s.frame, o.box, o.label, 1.0});
    return gt;
}

}  // namespace act360
