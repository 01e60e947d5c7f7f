#include "act360/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "act360/error.hpp"
#include "act360/rng.hpp"

namespace act360 {

using json = nlohmann::ordered_json;

namespace {

json defaults_json(const Settings& s) {
    json j;
    j["seed"] = s.seed;
    const auto& y = s.synthetic;
    j["synthetic"] = {{"videos", y.videos},
                      {"frames", y.frames},
                      {"height", y.height},
                      {"channels", y.channels},
                      {"classes", y.classes},
                      {"fps", y.fps},
                      {"noise", y.noise},
                      {"blob_radius", y.blob_radius},
                      {"pole_fraction", y.pole_fraction},
                      {"seam_fraction", y.seam_fraction},
                      {"second_blob_fraction", y.second_blob_fraction}};
    const auto& d = s.detector;
    j["detector"] = {{"clip_len", d.clip_len},
                     {"spatial_channels1", d.spatial_channels1},
                     {"spatial_channels2", d.spatial_channels2},
                     {"motion_channels1", d.motion_channels1},
                     {"motion_channels2", d.motion_channels2},
                     {"fusion_channels", d.fusion_channels},
                     {"use_eac", d.use_eac},
                     {"use_attention", d.use_attention},
                     {"erp_cap", d.erp_cap},
                     {"anchor_w", d.anchor_w},
                     {"anchor_h", d.anchor_h},
                     {"learning_rate", d.learning_rate},
                     {"batch_size", d.batch_size},
                     {"epochs", d.epochs},
                     {"patience", d.patience}};
    const auto& p = s.post;
    j["postprocess"] = {{"confidence_threshold", p.confidence_threshold},
                        {"nms_iou", p.nms_iou},
                        {"link_iou", p.link_iou},
                        {"smooth_window", p.smooth_window}};
    const auto& e = s.eval;
    j["eval"] = {{"iou_threshold", e.iou_threshold},
                 {"tube_iou_threshold", e.tube_iou_threshold},
                 {"train_ratio", e.train_ratio},
                 {"val_ratio", e.val_ratio},
                 {"test_ratio", e.test_ratio}};
    const auto& o = s.optimize;
    j["optimize"] = {{"iterations", o.iterations},       {"rate", o.rate},
                     {"finetune_lr", o.finetune_lr},     {"finetune_epochs", o.finetune_epochs},
                     {"max_score_drop", o.max_score_drop}, {"calib_frames", o.calib_frames},
                     {"percentile", o.percentile},       {"min_frames", o.min_frames}};
    j["debrief"] = {{"subject", s.debrief.subject}, {"lexicon", s.debrief.lexicon}};
    return j;
}

bool same_kind(const json& a, const json& b) {
    if (a.is_number_unsigned()) return b.is_number_unsigned();
    if (a.is_number()) return b.is_number();
    return a.type() == b.type();
}

const char* kind_name(const json& a) {
    if (a.is_number_unsigned()) return "a non-negative integer";
    if (a.is_number()) return "a number";
    if (a.is_boolean()) return "true or false";
    if (a.is_string()) return "a string";
    if (a.is_array()) return "an array";
    return "an object";
}

void merge_into(json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) throw ValidationError("config" + path + ": expected an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string where = path + "." + it.key();
        auto slot = base.find(it.key());
        if (slot == base.end()) throw ValidationError("config" + where + ": unknown key");
        if (slot->is_object()) {
            merge_into(*slot, it.value(), where);
        } else {
            if (!same_kind(*slot, it.value())) {
                throw ValidationError("config" + where + ": expected " + kind_name(*slot));
            }
            *slot = it.value();
        }
    }
}

template <typename T>
T get(const json& j, const char* key) {
    return j.at(key).get<T>();
}

Settings from_object(const json& j) {
    Settings s;
    s.seed = get<std::uint64_t>(j, "seed");
    const auto& y = j.at("synthetic");
    s.synthetic.videos = get<std::size_t>(y, "videos");
    s.synthetic.frames = get<std::size_t>(y, "frames");
    s.synthetic.height = get<std::size_t>(y, "height");
    s.synthetic.channels = get<std::size_t>(y, "channels");
    s.synthetic.classes.clear();
    for (const auto& c : y.at("classes")) {
        if (!c.is_string()) throw ValidationError("config.synthetic.classes: expected strings");
        s.synthetic.classes.push_back(c.get<std::string>());
    }
    s.synthetic.fps = get<double>(y, "fps");
    s.synthetic.noise = get<double>(y, "noise");
    s.synthetic.blob_radius = get<double>(y, "blob_radius");
    s.synthetic.pole_fraction = get<double>(y, "pole_fraction");
    s.synthetic.seam_fraction = get<double>(y, "seam_fraction");
    s.synthetic.second_blob_fraction = get<double>(y, "second_blob_fraction");
    const auto& d = j.at("detector");
    s.detector.clip_len = get<std::size_t>(d, "clip_len");
    s.detector.spatial_channels1 = get<std::size_t>(d, "spatial_channels1");
    s.detector.spatial_channels2 = get<std::size_t>(d, "spatial_channels2");
    s.detector.motion_channels1 = get<std::size_t>(d, "motion_channels1");
    s.detector.motion_channels2 = get<std::size_t>(d, "motion_channels2");
    s.detector.fusion_channels = get<std::size_t>(d, "fusion_channels");
    s.detector.use_eac = get<bool>(d, "use_eac");
    s.detector.use_attention = get<bool>(d, "use_attention");
    s.detector.erp_cap = get<double>(d, "erp_cap");
    s.detector.anchor_w = get<double>(d, "anchor_w");
    s.detector.anchor_h = get<double>(d, "anchor_h");
    s.detector.learning_rate = get<double>(d, "learning_rate");
    s.detector.batch_size = get<std::size_t>(d, "batch_size");
    s.detector.epochs = get<std::size_t>(d, "epochs");
    s.detector.patience = get<std::size_t>(d, "patience");
    s.detector.seed = s.seed;
    const auto& p = j.at("postprocess");
    s.post.confidence_threshold = get<double>(p, "confidence_threshold");
    s.post.nms_iou = get<double>(p, "nms_iou");
    s.post.link_iou = get<double>(p, "link_iou");
    s.post.smooth_window = get<std::size_t>(p, "smooth_window");
    const auto& e = j.at("eval");
    s.eval.iou_threshold = get<double>(e, "iou_threshold");
    s.eval.tube_iou_threshold = get<double>(e, "tube_iou_threshold");
    s.eval.train_ratio = get<double>(e, "train_ratio");
    s.eval.val_ratio = get<double>(e, "val_ratio");
    s.eval.test_ratio = get<double>(e, "test_ratio");
    const auto& o = j.at("optimize");
    s.optimize.iterations = get<std::size_t>(o, "iterations");
    s.optimize.rate = get<double>(o, "rate");
    s.optimize.finetune_lr = get<double>(o, "finetune_lr");
    s.optimize.finetune_epochs = get<std::size_t>(o, "finetune_epochs");
    s.optimize.max_score_drop = get<double>(o, "max_score_drop");
    s.optimize.calib_frames = get<std::size_t>(o, "calib_frames");
    s.optimize.percentile = get<double>(o, "percentile");
    s.optimize.min_frames = get<std::size_t>(o, "min_frames");
    s.debrief.subject = get<std::string>(j.at("debrief"), "subject");
    s.debrief.lexicon = get<std::string>(j.at("debrief"), "lexicon");
    return s;
}

}  // namespace

Settings Settings::from_json(const std::string& text) {
    json patch;
    try {
        patch = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    json merged = defaults_json(Settings{});
    merge_into(merged, patch, "");
    Settings s = from_object(merged);
    s.validate();
    return s;
}

std::string Settings::to_json() const { return defaults_json(*this).dump(2) + "\n"; }

void Settings::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json patch = value;
    std::string rest = path;
    std::vector<std::string> keys;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
        keys.push_back(rest.substr(0, pos));
    keys.push_back(rest);
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
    json merged = defaults_json(*this);
    merge_into(merged, patch, "");
    Settings s = from_object(merged);
    s.validate();
    *this = std::move(s);
}

void Settings::validate() const {
    synthetic.validate();
    if (detector.clip_len < 2) throw ValidationError("config.detector.clip_len must be >= 2");
    if (!(detector.learning_rate > 0.0)) throw ValidationError("config.detector.learning_rate must be positive");
    if (!(post.confidence_threshold >= 0.0 && post.confidence_threshold <= 1.0)) {
        throw ValidationError("config.postprocess.confidence_threshold must lie in [0,1]");
    }
    if (!(post.nms_iou > 0.0 && post.nms_iou < 1.0)) throw ValidationError("config.postprocess.nms_iou must lie in (0,1)");
    if (post.smooth_window % 2 == 0) throw ValidationError("config.postprocess.smooth_window must be odd");
    EvalConfig e = eval;
    e.classes = synthetic.classes;
    e.validate();
    if (!(optimize.rate > 0.0 && optimize.rate < 1.0)) throw ValidationError("config.optimize.rate must lie in (0,1)");
    if (optimize.calib_frames < 1) throw ValidationError("config.optimize.calib_frames must be >= 1");
}

SplitClips split_clips(const Dataset& data, const Settings& settings) {
    EvalConfig e = settings.eval;
    e.classes = data.classes;
    SplitClips out;
    out.ids = split_dataset(data.video_ids(), e, settings.seed);
    auto clips = [&](const std::vector<std::string>& ids) {
        return ids.empty() ? std::vector<Sample>{} : make_clips(data, settings.detector.clip_len, ids);
    };
    out.train = clips(out.ids.train);
    out.val = clips(out.ids.val);
    out.test = clips(out.ids.test);
    return out;
}

DetectorConfig detector_for(const Dataset& data, const Settings& settings) {
    if (data.videos.empty() || data.videos.front().frames.empty()) throw ValidationError("dataset has no frames");
    DetectorConfig c = settings.detector;
    const Shape& fs = data.videos.front().frames.front().shape();
    c.in_channels = fs[0];
    c.height = fs[1];
    c.width = fs[2];
    c.num_classes = data.classes.size();
    c.seed = settings.seed;
    c.validate();
    return c;
}

ModelCheckpoint train_detector(const SplitClips& clips, const DetectorConfig& config) {
    if (clips.train.empty()) throw ValidationError("training split has no clips");
    return train(clips.train, clips.val, config);
}

std::vector<Detection> detect(const std::vector<Sample>& clips, const Predictor& predictor,
                              const DetectorConfig& config, const PostprocessSettings& post) {
    std::map<std::string, std::vector<Sample>> by_video;
    for (const auto& s : clips) by_video[s.video_id].push_back(s);
    std::vector<Detection> out;
    for (auto& [id, samples] : by_video) {
        std::stable_sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.frame < b.frame; });
        auto res = infer_with(samples, predictor, config, post);
        out.insert(out.end(), res.detections.begin(), res.detections.end());
    }
    return out;
}

std::vector<Tensor> calibration_clips(const std::vector<Sample>& train, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng(seed).split("calibration").shuffle(idx);
    idx.resize(std::min(count, idx.size()));
    std::sort(idx.begin(), idx.end());
    std::vector<Tensor> out;
    for (auto i : idx) out.push_back(train[i].clip);
    return out;
}

OptimizedModel optimize_model(const Model& model, const SplitClips& clips, const Settings& settings, bool prune) {
    const OptimizationPolicy policy;
    OptimizedModel out;
    const auto& o = settings.optimize;
    FinetuneOptions ft;
    ft.train = &clips.train;
    ft.val = &clips.val;
    ft.learning_rate = o.finetune_lr;
    ft.epochs = o.finetune_epochs;
    ft.max_score_drop = o.max_score_drop;
    if (!clips.val.empty()) {
        EvalConfig e = settings.eval;
        e.classes.assign(model.config.num_classes, "");
        for (std::size_t i = 0; i < e.classes.size(); ++i) e.classes[i] = std::to_string(i);
        const auto gt = clip_ground_truth(clips.val);
        ft.score = [&clips, &settings, e, gt](const Model& m) {
            auto pred = [&m](const Tensor& x) { return infer_raw(x, m); };
            return frame_map(detect(clips.val, pred, m.config, settings.post), gt, e).mean.value_or(0.0);
        };
    }
    out.pruned = prune_iterative(model, prune ? o.iterations : 0, o.rate, ft, policy);
    out.pruned.model.config = model.config;
    CalibrationOptions copt;
    copt.percentile = o.percentile;
    const auto calib = calibration_clips(clips.train.empty() ? clips.val : clips.train, o.calib_frames, settings.seed);
    out.ranges = calibrate(out.pruned.model, calib, policy, copt);
    out.quantized = quantize(out.pruned.model, policy, out.ranges);
    out.quantized.masks = out.pruned.mask.masks;
    return out;
}

std::string BenchReport::to_json() const {
    json j;
    j["rows"] = json::array();
    for (const auto& r : rows) {
        json row;
        row["variant"] = r.variant;
        row["map"] = r.map ? json(*r.map) : json(nullptr);
        row["median_ms"] = r.median_ms;
        row["mean_ms"] = r.mean_ms;
        row["size_bytes"] = r.size_bytes;
        row["sparsity"] = r.sparsity;
        j["rows"].push_back(row);
    }
    j["frames_timed"] = frames_timed;
    j["prune_iterations"] = prune_iterations;
    j["prune_stopped_early"] = prune_stopped_early;
    return j.dump(2) + "\n";
}

std::string BenchReport::to_text() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %8s %10s %10s %9s\n", "model", "mAP", "ms/frame", "bytes", "sparsity");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-10s %8s %10.3f %10zu %9.4f\n", r.variant.c_str(),
                      r.map ? std::to_string(*r.map).substr(0, 6).c_str() : "n/a", r.median_ms, r.size_bytes,
                      r.sparsity);
        os << line;
    }
    os << "frames timed per variant: " << frames_timed << ", prune iterations: " << prune_iterations
       << (prune_stopped_early ? " (stopped on the accuracy budget)" : "") << '\n';
    return os.str();
}

BenchReport run_bench(const Model& model, const SplitClips& clips, const Settings& settings) {
    const OptimizationPolicy policy;
    const auto calib = calibration_clips(clips.train.empty() ? clips.val : clips.train, settings.optimize.calib_frames,
                                         settings.seed);
    CalibrationOptions copt;
    copt.percentile = settings.optimize.percentile;
    const QuantizedModel q_only = quantize(model, policy, calibrate(model, calib, policy, copt));
    const OptimizedModel pq = optimize_model(model, clips, settings);

    FloatRunner fp(model);
    QuantizedEngine q_engine(q_only), pq_engine(pq.quantized);
    PostprocessSettings raw = settings.post;
    raw.threshold = raw.suppress = raw.smooth = false;
    const std::size_t fp_size = deployment_size(model);
    std::vector<Variant> variants{
        {"baseline", [&](const Tensor& x) { return run_topology(model.config, fp, x); }, raw, fp_size},
        {"+NTC", [&](const Tensor& x) { return run_topology(model.config, fp, x); }, settings.post, fp_size},
        {"+NTCQ", [&](const Tensor& x) { return q_engine.forward(x); }, settings.post, deployment_size(q_only)},
        {"+NTCQP", [&](const Tensor& x) { return pq_engine.forward(x); }, settings.post, deployment_size(pq.quantized)},
    };
    EvalConfig e = settings.eval;
    e.classes.clear();
    for (std::size_t i = 0; i < model.config.num_classes; ++i) e.classes.push_back(std::to_string(i));
    const auto reports = measure(variants, clips.test, model.config, e, settings.optimize.min_frames);
    BenchReport out;
    for (const auto& r : reports) {
        BenchRow row;
        row.variant = r.variant;
        row.map = r.map;
        row.median_ms = r.latency.per_frame_ms.empty() ? 0.0 : r.latency.median_ms();
        row.mean_ms = r.latency.per_frame_ms.empty() ? 0.0 : r.latency.mean_ms();
        row.size_bytes = r.size_bytes;
        out.frames_timed = r.latency.per_frame_ms.size();
        out.rows.push_back(row);
    }
    out.rows.back().sparsity = pq.pruned.mask.sparsity();
    out.prune_iterations = pq.pruned.iterations_run;
    out.prune_stopped_early = pq.pruned.stopped_early;
    return out;
}

}  // namespace act360
