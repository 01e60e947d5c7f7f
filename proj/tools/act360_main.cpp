// act360: dataset generation, training, optimization, evaluation, annotation
// and the debriefing service from one binary.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "act360/error.hpp"
#include "act360/pipeline.hpp"
#include "act360/serialize.hpp"

using namespace act360;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", c.overrides, "override a config value, e.g. detector.epochs=5");
    cmd->add_option("--seed", c.seed, "experiment seed");
}

Settings load_settings(const Common& c) {
    Settings s;
    if (!c.config_path.empty()) {
        std::ifstream is(c.config_path);
        std::stringstream ss;
        ss << is.rdbuf();
        s = Settings::from_json(ss.str());
    }
    for (const auto& o : c.overrides) s.apply_override(o);
    if (c.seed) s.apply_override("seed=" + std::to_string(*c.seed));
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    os << text;
}

Box parse_box(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ValidationError("box '" + text + "' must be x1,y1,x2,y2");
        }
    }
    if (v.size() != 4) throw ValidationError("box '" + text + "' must be x1,y1,x2,y2");
    Box b{v[0], v[1], v[2], v[3]};
    b.validate();
    return b;
}

std::vector<Sample> pick_split(const Dataset& data, const SplitClips& clips, const std::string& split,
                               std::size_t clip_len) {
    if (split == "train") return clips.train;
    if (split == "val") return clips.val;
    if (split == "test") return clips.test;
    if (split == "all") return make_clips(data, clip_len);
    throw ValidationError("unknown split '" + split + "' (train, val, test, all)");
}

Predictor predictor_for(const std::string& model_path, const std::string& quantized_path,
                        std::shared_ptr<void>& keep, DetectorConfig& config) {
    if (!quantized_path.empty()) {
        auto qm = std::make_shared<QuantizedModel>(load_quantized(quantized_path));
        auto engine = std::make_shared<QuantizedEngine>(*qm);
        config = qm->config;
        keep = std::make_shared<std::pair<decltype(qm), decltype(engine)>>(qm, engine);
        return [engine](const Tensor& x) { return engine->forward(x); };
    }
    if (model_path.empty()) throw ValidationError("need --model or --quantized");
    auto model = std::make_shared<Model>(load_checkpoint(model_path).model);
    config = model->config;
    keep = model;
    return [model](const Tensor& x) { return infer_raw(x, *model); };
}

void check_geometry(const DetectorConfig& c, const Dataset& data) {
    const Shape& fs = data.videos.front().frames.front().shape();
    if (c.in_channels != fs[0] || c.height != fs[1] || c.width != fs[2] || c.num_classes != data.classes.size()) {
        throw ValidationError("model geometry does not match the dataset");
    }
}

std::vector<Detection> events_to_detections(const DetectionStore& store, const std::vector<std::string>& classes) {
    std::vector<Detection> out;
    for (const auto& id : store.ids()) {
        for (const auto& e : store.video(id).events) {
            auto it = std::find(classes.begin(), classes.end(), e.action);
            if (it == classes.end()) throw ValidationError("detection action '" + e.action + "' is not a dataset class");
            out.push_back({id, e.frame, e.box, static_cast<std::size_t>(it - classes.begin()), e.confidence});
        }
    }
    return out;
}

SummaryOptions summary_options(const Settings& s) {
    SummaryOptions o;
    o.subject = s.debrief.subject;
    if (!s.debrief.lexicon.empty()) {
        for (const auto& [k, v] : load_lexicon(s.debrief.lexicon)) o.lexicon[k] = v;
    }
    return o;
}

DebriefService* running_service = nullptr;

void stop_service(int) {
    if (running_service) running_service->stop();
}

void print_error(const char* kind, const std::string& message) {
    json j;
    j["error"] = {{"kind", kind}, {"message", message}};
    std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"act360: panoramic action detection toolkit"};
    app.require_subcommand(1);
    Common common;

    // gen
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "write a synthetic panoramic dataset");
    add_common(gen, common);
    gen->add_option("--out", gen_out, "dataset directory")->required();

    // train
    std::string data_dir, model_path, out_path;
    auto* train_cmd = app.add_subcommand("train", "train the detector on the training split");
    add_common(train_cmd, common);
    train_cmd->add_option("--data", data_dir, "dataset directory")->required();
    train_cmd->add_option("--out", out_path, "checkpoint to write")->required();

    // detect
    std::string quantized_path, store_dir, split = "all";
    bool no_frames = false;
    auto* detect_cmd = app.add_subcommand("detect", "run inference and write a detection store");
    add_common(detect_cmd, common);
    detect_cmd->add_option("--data", data_dir, "dataset directory")->required();
    detect_cmd->add_option("--model", model_path, "float checkpoint");
    detect_cmd->add_option("--quantized", quantized_path, "quantized checkpoint");
    detect_cmd->add_option("--store", store_dir, "detection store directory")->required();
    detect_cmd->add_option("--split", split, "train, val, test or all");
    detect_cmd->add_flag("--no-frames", no_frames, "do not copy frames for the overlay view");

    // optimize
    bool no_prune = false;
    auto* optimize_cmd = app.add_subcommand("optimize", "prune, fine-tune and quantize a checkpoint");
    add_common(optimize_cmd, common);
    optimize_cmd->add_option("--data", data_dir, "dataset directory")->required();
    optimize_cmd->add_option("--model", model_path, "float checkpoint")->required();
    optimize_cmd->add_option("--out", out_path, "quantized checkpoint to write")->required();
    optimize_cmd->add_flag("--no-prune", no_prune, "quantize only");

    // evaluate
    std::string detections_path, format = "text", eval_split = "test";
    auto* evaluate_cmd = app.add_subcommand("evaluate", "frame and video mAP per action and condition");
    add_common(evaluate_cmd, common);
    evaluate_cmd->add_option("--data", data_dir, "dataset directory")->required();
    evaluate_cmd->add_option("--model", model_path, "float checkpoint");
    evaluate_cmd->add_option("--quantized", quantized_path, "quantized checkpoint");
    evaluate_cmd->add_option("--detections", detections_path, "store directory, inference JSON or annotation CSV");
    evaluate_cmd->add_option("--split", eval_split, "train, val, test or all");
    evaluate_cmd->add_option("--format", format, "text, csv or json");

    // annotate
    std::string video, action, start_box, end_box, method = "ncc", validate_path;
    std::size_t first = 0, last = 0;
    auto* annotate_cmd = app.add_subcommand("annotate", "propagate a box between two manual keyframes");
    add_common(annotate_cmd, common);
    annotate_cmd->add_option("--data", data_dir, "dataset directory");
    annotate_cmd->add_option("--video", video, "video id");
    annotate_cmd->add_option("--action", action, "action label");
    annotate_cmd->add_option("--first", first, "first frame");
    annotate_cmd->add_option("--last", last, "last frame");
    annotate_cmd->add_option("--start", start_box, "box on the first frame: x1,y1,x2,y2");
    annotate_cmd->add_option("--end", end_box, "box on the last frame: x1,y1,x2,y2");
    annotate_cmd->add_option("--method", method, "interp or ncc");
    annotate_cmd->add_option("--out", out_path, "annotation CSV (rows are appended)");
    annotate_cmd->add_option("--validate", validate_path, "check an annotation CSV against the class list");

    // ingest
    std::vector<std::string> sources;
    auto* ingest_cmd = app.add_subcommand("ingest", "add inference JSON or annotation CSV files to a store");
    add_common(ingest_cmd, common);
    ingest_cmd->add_option("--store", store_dir, "detection store directory")->required();
    ingest_cmd->add_option("sources", sources, "files to ingest")->required()->check(CLI::ExistingFile);

    // summarize
    double t_from = 0.0, t_to = std::numeric_limits<double>::infinity(), min_conf = 0.0;
    std::vector<std::string> actions;
    std::string style = "timeline";
    bool external = false;
    auto* summarize_cmd = app.add_subcommand("summarize", "summarize the events of one video");
    add_common(summarize_cmd, common);
    summarize_cmd->add_option("--store", store_dir, "detection store directory")->required();
    summarize_cmd->add_option("--video", video, "video id")->required();
    summarize_cmd->add_option("--from", t_from, "start time in seconds");
    summarize_cmd->add_option("--to", t_to, "end time in seconds");
    summarize_cmd->add_option("--action", actions, "keep only these actions");
    summarize_cmd->add_option("--min-conf", min_conf, "minimum confidence");
    summarize_cmd->add_option("--style", style, "timeline or brief");
    summarize_cmd->add_flag("--external", external, "use the endpoint from ACT360_LLM_ENDPOINT");

    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
    auto* serve_cmd = app.add_subcommand("serve", "HTTP API over a detection store");
    add_common(serve_cmd, common);
    serve_cmd->add_option("--store", store_dir, "detection store directory")->required();
    serve_cmd->add_option("--host", host, "bind address");
    serve_cmd->add_option("--port", port, "port");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "baseline / +NTC / +NTCQ / +NTCQP ablation on the test split");
    add_common(bench_cmd, common);
    bench_cmd->add_option("--data", data_dir, "dataset directory")->required();
    bench_cmd->add_option("--model", model_path, "float checkpoint")->required();
    bench_cmd->add_option("--format", format, "text or json");
    bench_cmd->add_option("--out", out_path, "also write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("validation", e.what());
        return 1;
    }

    try {
        const Settings settings = load_settings(common);

        if (gen->parsed()) {
            const Dataset data = gen_synthetic(settings.synthetic, settings.seed);
            write_dataset(gen_out, data);
            json j{{"dataset", gen_out}, {"videos", data.videos.size()}, {"seed", settings.seed}};
            std::cout << j.dump() << '\n';
        } else if (train_cmd->parsed()) {
            const Dataset data = read_dataset(data_dir);
            const auto clips = split_clips(data, settings);
            const auto ckpt = train_detector(clips, detector_for(data, settings));
            save_checkpoint(out_path, ckpt);
            json j{{"checkpoint", out_path},
                   {"train_clips", clips.train.size()},
                   {"val_clips", clips.val.size()},
                   {"epochs_run", ckpt.epochs_run},
                   {"best_epoch", ckpt.best_epoch},
                   {"final_train_loss", ckpt.train_loss.empty() ? 0.0 : ckpt.train_loss.back()}};
            if (!ckpt.val_loss.empty()) j["best_val_loss"] = ckpt.val_loss[ckpt.best_epoch];
            std::cout << j.dump() << '\n';
        } else if (detect_cmd->parsed()) {
            const Dataset data = read_dataset(data_dir);
            std::shared_ptr<void> keep;
            DetectorConfig config;
            const auto predict = predictor_for(model_path, quantized_path, keep, config);
            check_geometry(config, data);
            const auto clips = split_clips(data, settings);
            const auto samples = pick_split(data, clips, split, config.clip_len);
            const auto dets = detect(samples, predict, config, settings.post);
            DetectionStore store = DetectionStore::load(store_dir);
            std::set<std::string> ids;
            for (const auto& s : samples) ids.insert(s.video_id);
            for (const auto& id : ids) {
                const auto& v = data.video(id);
                std::vector<Detection> mine;
                for (const auto& d : dets)
                    if (d.video_id == id) mine.push_back(d);
                VideoRecord r;
                r.info = {id, data.fps, static_cast<double>(v.frames.size()) / data.fps, v.condition};
                r.events = detections_to_events(mine, data.classes, data.fps);
                store.put(std::move(r));
                if (!no_frames) {
                    const auto dir = fs::path(store_dir) / id / "frames";
                    fs::create_directories(dir);
                    for (std::size_t f = 0; f < v.frames.size(); ++f) {
                        char name[32];
                        std::snprintf(name, sizeof(name), "%06zu.t", f);
                        std::ofstream os(dir / name, std::ios::binary);
                        write_tensor(os, v.frames[f]);
                    }
                }
            }
            store.save(store_dir);
            json j{{"store", store_dir}, {"videos", ids.size()}, {"detections", dets.size()}};
            std::cout << j.dump() << '\n';
        } else if (optimize_cmd->parsed()) {
            const Dataset data = read_dataset(data_dir);
            const Model model = load_checkpoint(model_path).model;
            check_geometry(model.config, data);
            const auto clips = split_clips(data, settings);
            const auto opt = optimize_model(model, clips, settings, !no_prune);
            save_quantized(out_path, opt.quantized);
            json layers = json::array();
            for (const auto& l : opt.quantized.layers) {
                json row{{"layer", l.name}, {"category", category_name(l.category)}, {"quantized", l.quantized}};
                if (l.quantized) {
                    row["payload_ratio"] = static_cast<double>(int8_weight_payload(l.weight)) /
                                           static_cast<double>(fp32_weight_payload(model.param(l.name + ".weight")));
                    row["activation_scale"] = l.input.scale;
                    row["activation_zero_point"] = l.input.zero_point;
                }
                layers.push_back(row);
            }
            json j{{"quantized_checkpoint", out_path},
                   {"prune_iterations", opt.pruned.iterations_run},
                   {"prune_stopped_early", opt.pruned.stopped_early},
                   {"sparsity", opt.pruned.mask.sparsity()},
                   {"unmasked_history", opt.pruned.mask.unmasked_history},
                   {"fp32_bytes", deployment_size(model)},
                   {"deployed_bytes", deployment_size(opt.quantized)},
                   {"layers", layers}};
            std::cout << j.dump(2) << '\n';
        } else if (evaluate_cmd->parsed()) {
            const Dataset data = read_dataset(data_dir);
            const auto clips = split_clips(data, settings);
            const auto samples = pick_split(data, clips, eval_split, settings.detector.clip_len);
            const auto gt = clip_ground_truth(samples);
            std::vector<Detection> dets;
            if (!detections_path.empty()) {
                DetectionStore store;
                if (fs::is_directory(detections_path)) {
                    store = DetectionStore::load(detections_path);
                } else {
                    ingest(store, detections_path);
                }
                std::set<std::pair<std::string, std::size_t>> keys;
                for (const auto& s : samples) keys.insert({s.video_id, s.frame});
                for (const auto& d : events_to_detections(store, data.classes))
                    if (keys.count({d.video_id, d.frame})) dets.push_back(d);
            } else {
                std::shared_ptr<void> keep;
                DetectorConfig config;
                const auto predict = predictor_for(model_path, quantized_path, keep, config);
                check_geometry(config, data);
                if (config.clip_len != settings.detector.clip_len) {
                    throw ValidationError("checkpoint clip_len differs from the configured detector.clip_len");
                }
                dets = detect(samples, predict, config, settings.post);
            }
            EvalConfig e = settings.eval;
            e.classes = data.classes;
            std::set<std::string> split_ids;
            for (const auto& smp : samples) split_ids.insert(smp.video_id);
            std::vector<VideoMeta> meta;
            for (const auto& m : dataset_metadata(data))
                if (split_ids.count(m.video_id)) meta.push_back(m);
            const auto report = build_report(dets, gt, meta, e, settings.post);
            if (format == "csv") {
                std::cout << report.to_csv();
            } else if (format == "json") {
                json rows = json::array();
                for (const auto& r : report.rows) {
                    rows.push_back({{"group", r.group},
                                    {"name", r.name},
                                    {"frame_ap", r.frame_ap ? json(*r.frame_ap) : json(nullptr)},
                                    {"video_ap", r.video_ap ? json(*r.video_ap) : json(nullptr)},
                                    {"videos", r.videos}});
                }
                json j{{"frame_map", report.frame_map ? json(*report.frame_map) : json(nullptr)},
                       {"video_map", report.video_map ? json(*report.video_map) : json(nullptr)},
                       {"rows", rows}};
                std::cout << j.dump(2) << '\n';
            } else if (format == "text") {
                std::cout << report.to_text();
            } else {
                throw ValidationError("unknown format '" + format + "'");
            }
        } else if (annotate_cmd->parsed()) {
            if (!validate_path.empty()) {
                const auto anns = import_csv_file(validate_path);
                const std::set<std::string> vocab(settings.synthetic.classes.begin(), settings.synthetic.classes.end());
                const auto issues = validate_annotations(anns, vocab);
                json j{{"annotations", anns.size()}, {"issues", issues}};
                std::cout << j.dump() << '\n';
                return issues.empty() ? 0 : 1;
            }
            if (data_dir.empty() || video.empty() || action.empty() || start_box.empty() || end_box.empty() ||
                out_path.empty()) {
                throw ValidationError("annotate needs --data --video --action --first --last --start --end --out");
            }
            const Dataset data = read_dataset(data_dir);
            const auto& v = data.video(video);
            const auto ann = annotate_range(video, action, v.frames, first, last, parse_box(start_box),
                                            parse_box(end_box), data.fps, track_method_from_name(method));
            std::vector<RoiAnnotation> all;
            if (fs::exists(out_path)) all = import_csv_file(out_path);
            all.push_back(ann);
            export_csv(fs::path(out_path), all);
            json j{{"csv", out_path}, {"frames", ann.frames.size()}, {"method", method}};
            std::cout << j.dump() << '\n';
        } else if (ingest_cmd->parsed()) {
            DetectionStore store = DetectionStore::load(store_dir);
            for (const auto& src : sources) ingest(store, src);
            store.save(store_dir);
            json j{{"store", store_dir}, {"videos", store.size()}};
            std::cout << j.dump() << '\n';
        } else if (summarize_cmd->parsed()) {
            const DetectionStore store = DetectionStore::load(store_dir);
            Query q;
            q.video_id = video;
            q.t0 = t_from;
            q.t1 = t_to;
            q.min_confidence = min_conf;
            if (!actions.empty()) q.actions = std::set<std::string>(actions.begin(), actions.end());
            const auto events = query(store, q);
            const auto opts = summary_options(settings);
            const auto st = summary_style_from_name(style);
            const Summary s = external ? llm_summarize(events, st, ExternalClientConfig::from_env(), opts)
                                       : summarize(events, st, opts);
            std::cout << summary_json(s) << '\n';
        } else if (serve_cmd->parsed()) {
            ServiceOptions opts;
            opts.summary = summary_options(settings);
            const auto ext = ExternalClientConfig::from_env();
            if (ext.configured()) opts.external = ext;
            DebriefService service(store_dir, opts);
            running_service = &service;
            std::signal(SIGINT, stop_service);
            std::signal(SIGTERM, stop_service);
            std::clog << "serving " << service.store().size() << " videos on http://" << host << ':' << port << '\n';
            service.run(host, port);
            running_service = nullptr;
        } else if (bench_cmd->parsed()) {
            const Dataset data = read_dataset(data_dir);
            const Model model = load_checkpoint(model_path).model;
            check_geometry(model.config, data);
            const auto clips = split_clips(data, settings);
            const auto report = run_bench(model, clips, settings);
            if (!out_path.empty()) write_text(out_path, report.to_json());
            std::cout << (format == "json" ? report.to_json() : report.to_text());
        }
    } catch (const ValidationError& e) {
        print_error("validation", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("runtime", e.what());
        return 2;
    }
    return 0;
}
