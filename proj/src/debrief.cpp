#include "act360/debrief.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>
#include <thread>
#include <tuple>

#include <httplib.h>
#include <json.hpp>

#include "act360/error.hpp"
#include "act360/serialize.hpp"

namespace act360 {

using ojson = nlohmann::ordered_json;

bool event_before(const Event& a, const Event& b) {
    return std::tie(a.t_seconds, a.action, b.confidence, a.frame, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
           std::tie(b.t_seconds, b.action, a.confidence, b.frame, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
}

namespace {

void validate_video_id(const std::string& id) {
    if (id.empty() || id == "." || id == "..") throw ValidationError("video id must be a non-empty name");
    for (char c : id) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
        if (!ok) throw ValidationError("video id '" + id + "' may only use letters, digits, '_', '-' and '.'");
    }
}

void validate_event(const Event& e, const std::string& where) {
    if (!std::isfinite(e.t_seconds) || e.t_seconds < 0.0) throw ValidationError(where + ": t_seconds must be >= 0");
    if (!(e.confidence >= 0.0 && e.confidence <= 1.0)) throw ValidationError(where + ": confidence must lie in [0,1]");
    if (e.action.empty()) throw ValidationError(where + ": empty action");
    try {
        e.box.validate();
    } catch (const ValidationError& err) {
        throw ValidationError(where + ": " + err.what());
    }
}

double default_duration(const VideoRecord& r) {
    double end = 0.0;
    for (const auto& e : r.events) end = std::max(end, e.t_seconds + 1.0 / r.info.fps);
    return end;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw RuntimeFailure("write failed: " + path.string());
}

ojson event_to_json(const Event& e) {
    ojson j;
    j["frame"] = e.frame;
    j["t_seconds"] = e.t_seconds;
    j["action"] = e.action;
    j["confidence"] = e.confidence;
    j["box"] = {e.box.x1, e.box.y1, e.box.x2, e.box.y2};
    j["wraps"] = e.box.wraps() ? 1 : 0;
    return j;
}

const ojson& field(const ojson& obj, const std::string& key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ValidationError(where + ": missing field '" + key + "'");
    return *it;
}

double number_field(const ojson& obj, const std::string& key, const std::string& where) {
    const auto& v = field(obj, key, where);
    if (!v.is_number()) throw ValidationError(where + "." + key + ": expected a number");
    return v.get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Store.

void DetectionStore::put(VideoRecord record) {
    validate_video_id(record.info.video_id);
    if (!(record.info.fps > 0.0) || !std::isfinite(record.info.fps)) {
        throw ValidationError("video " + record.info.video_id + ": fps must be positive");
    }
    for (std::size_t i = 0; i < record.events.size(); ++i) {
        validate_event(record.events[i], record.info.video_id + " event " + std::to_string(i));
    }
    std::stable_sort(record.events.begin(), record.events.end(), event_before);
    record.events.erase(std::unique(record.events.begin(), record.events.end()), record.events.end());
    if (!std::isfinite(record.info.duration) || record.info.duration < 0.0) {
        throw ValidationError("video " + record.info.video_id + ": duration must be >= 0");
    }
    if (record.info.duration == 0.0) record.info.duration = default_duration(record);
    const std::string id = record.info.video_id;
    videos_[id] = std::move(record);
}

const VideoRecord& DetectionStore::video(const std::string& video_id) const {
    auto it = videos_.find(video_id);
    if (it == videos_.end()) throw NotFound("unknown video '" + video_id + "'");
    return it->second;
}

std::vector<std::string> DetectionStore::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, r] : videos_) out.push_back(id);
    return out;
}

void DetectionStore::save(const std::filesystem::path& root) const {
    std::filesystem::create_directories(root);
    for (const auto& [id, r] : videos_) {
        const auto dir = root / id;
        std::filesystem::create_directories(dir);
        ojson meta;
        meta["video_id"] = id;
        meta["fps"] = r.info.fps;
        meta["duration"] = r.info.duration;
        meta["condition"] = r.info.condition;
        write_file(dir / "meta.json", meta.dump(2) + "\n");
        write_file(dir / "events.json", inference_json(r.info, r.events));
    }
}

DetectionStore DetectionStore::load(const std::filesystem::path& root) {
    DetectionStore store;
    if (!std::filesystem::exists(root)) return store;
    if (!std::filesystem::is_directory(root)) throw ValidationError(root.string() + " is not a directory");
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (!entry.is_directory() || !std::filesystem::exists(entry.path() / "meta.json")) continue;
        const std::string where = (entry.path() / "meta.json").string();
        ojson meta;
        try {
            meta = ojson::parse(read_file(entry.path() / "meta.json"));
        } catch (const ojson::parse_error& e) {
            throw ValidationError(where + ": " + e.what());
        }
        VideoRecord r = parse_inference_json(read_file(entry.path() / "events.json"));
        r.info.fps = number_field(meta, "fps", where);
        r.info.duration = number_field(meta, "duration", where);
        r.info.condition = field(meta, "condition", where).get<std::string>();
        if (field(meta, "video_id", where).get<std::string>() != r.info.video_id) {
            throw ValidationError(where + ": video_id disagrees with events.json");
        }
        store.put(std::move(r));
    }
    return store;
}

// ---------------------------------------------------------------------------
// Ingest.

std::string inference_json(const VideoInfo& info, const std::vector<Event>& events) {
    ojson j;
    j["video_id"] = info.video_id;
    j["fps"] = info.fps;
    if (info.duration > 0.0) j["duration"] = info.duration;
    if (!info.condition.empty()) j["condition"] = info.condition;
    j["events"] = ojson::array();
    for (const auto& e : events) j["events"].push_back(event_to_json(e));
    return j.dump(2) + "\n";
}

std::vector<Event> detections_to_events(const std::vector<Detection>& dets, const std::vector<std::string>& classes,
                                        double fps) {
    if (!(fps > 0.0)) throw ValidationError("fps must be positive");
    std::vector<Event> out;
    for (const auto& d : dets) {
        if (d.label >= classes.size()) throw ValidationError("detection label " + std::to_string(d.label) + " has no class");
        out.push_back({d.frame, static_cast<double>(d.frame) / fps, classes[d.label], d.confidence, d.box});
    }
    std::stable_sort(out.begin(), out.end(), event_before);
    return out;
}

VideoRecord parse_inference_json(const std::string& text) {
    ojson j;
    try {
        j = ojson::parse(text);
    } catch (const ojson::parse_error& e) {
        throw ValidationError(std::string("inference json: ") + e.what());
    }
    const std::string root = "inference json";
    if (!j.is_object()) throw ValidationError(root + ": expected an object");
    VideoRecord r;
    const auto& id = field(j, "video_id", root);
    if (!id.is_string()) throw ValidationError(root + ".video_id: expected a string");
    r.info.video_id = id.get<std::string>();
    r.info.fps = number_field(j, "fps", root);
    if (j.contains("duration")) r.info.duration = number_field(j, "duration", root);
    if (j.contains("condition")) {
        if (!j["condition"].is_string()) throw ValidationError(root + ".condition: expected a string");
        r.info.condition = j["condition"].get<std::string>();
    }
    const auto& events = field(j, "events", root);
    if (!events.is_array()) throw ValidationError(root + ".events: expected an array");
    for (std::size_t i = 0; i < events.size(); ++i) {
        const std::string where = root + ".events[" + std::to_string(i) + "]";
        const auto& ej = events[i];
        if (!ej.is_object()) throw ValidationError(where + ": expected an object");
        Event e;
        const auto& frame = field(ej, "frame", where);
        if (!frame.is_number_unsigned()) throw ValidationError(where + ".frame: expected a non-negative integer");
        e.frame = frame.get<std::size_t>();
        e.t_seconds = number_field(ej, "t_seconds", where);
        const auto& action = field(ej, "action", where);
        if (!action.is_string()) throw ValidationError(where + ".action: expected a string");
        e.action = action.get<std::string>();
        e.confidence = number_field(ej, "confidence", where);
        const auto& box = field(ej, "box", where);
        if (!box.is_array() || box.size() != 4 ||
            !std::all_of(box.begin(), box.end(), [](const ojson& v) { return v.is_number(); })) {
            throw ValidationError(where + ".box: expected 4 numbers");
        }
        e.box = Box{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
        if (ej.contains("wraps")) {
            const auto& w = ej["wraps"];
            if (!w.is_number_integer() || (w.get<int>() != 0 && w.get<int>() != 1)) {
                throw ValidationError(where + ".wraps: expected 0 or 1");
            }
            if ((w.get<int>() == 1) != e.box.wraps()) throw ValidationError(where + ".wraps: disagrees with x1 > x2");
        }
        validate_event(e, where);
        r.events.push_back(std::move(e));
    }
    return r;
}

std::vector<VideoRecord> parse_annotation_events(const std::string& csv_text) {
    std::map<std::string, VideoRecord> by_video;
    for (const auto& ann : import_csv(csv_text)) {
        auto& r = by_video[ann.video_id];
        r.info.video_id = ann.video_id;
        for (const auto& f : ann.frames) r.events.push_back({f.frame, f.t_seconds, ann.action, 1.0, f.box});
    }
    std::vector<VideoRecord> out;
    for (auto& [id, r] : by_video) {
        for (const auto& e : r.events) {
            if (e.frame > 0 && e.t_seconds > 0.0) {
                r.info.fps = static_cast<double>(e.frame) / e.t_seconds;
                break;
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

void ingest_text(DetectionStore& store, const std::string& text, bool is_json) {
    if (std::all_of(text.begin(), text.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); })) {
        return;
    }
    if (is_json) {
        store.put(parse_inference_json(text));
    } else {
        for (auto& r : parse_annotation_events(text)) store.put(std::move(r));
    }
}

void ingest(DetectionStore& store, const std::filesystem::path& source) {
    const std::string text = read_file(source);
    const auto ext = source.extension().string();
    bool is_json = ext == ".json";
    if (ext != ".json" && ext != ".csv") {
        auto it = std::find_if(text.begin(), text.end(), [](char c) { return !std::isspace(static_cast<unsigned char>(c)); });
        is_json = it != text.end() && *it == '{';
    }
    try {
        ingest_text(store, text, is_json);
    } catch (const ValidationError& e) {
        throw ValidationError(source.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Query.

void Query::validate() const {
    if (std::isnan(t0) || std::isnan(t1)) throw ValidationError("query: time bounds must be numbers");
    if (t0 > t1) throw ValidationError("query: from must not exceed to");
    if (!(min_confidence >= 0.0 && min_confidence <= 1.0)) throw ValidationError("query: min_conf must lie in [0,1]");
}

std::vector<Event> query(const DetectionStore& store, const Query& q) {
    q.validate();
    const auto& r = store.video(q.video_id);
    std::vector<Event> out;
    for (const auto& e : r.events) {
        if (e.t_seconds < q.t0 || e.t_seconds > q.t1) continue;
        if (q.actions && !q.actions->count(e.action)) continue;
        if (e.confidence < q.min_confidence) continue;
        out.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Summaries.

SummaryStyle summary_style_from_name(const std::string& name) {
    if (name == "timeline") return SummaryStyle::Timeline;
    if (name == "brief") return SummaryStyle::Brief;
    throw ValidationError("unknown summary style '" + name + "' (expected timeline or brief)");
}

std::string summary_style_name(SummaryStyle style) { return style == SummaryStyle::Brief ? "brief" : "timeline"; }

Lexicon default_lexicon() {
    return {
        {"climb_ladder", "climbed the ladder"},
        {"carry_civilian", "carried a civilian"},
        {"dress_gear", "dressed in firefighting gear"},
        {"drive_vehicle", "drove the vehicle"},
        {"break_door", "breached the door"},
        {"break_window", "broke the window"},
        {"operate_hose", "operated the hose"},
    };
}

Lexicon parse_lexicon(const std::string& text) {
    Lexicon lex;
    std::istringstream is(text);
    std::string line;
    std::size_t n = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++n;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("lexicon line " + std::to_string(n) + ": expected 'action = phrase'");
        const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ValidationError("lexicon line " + std::to_string(n) + ": empty action or phrase");
        lex[key] = value;
    }
    return lex;
}

Lexicon load_lexicon(const std::filesystem::path& path) { return parse_lexicon(read_file(path)); }

std::string format_seconds(double t) {
    const double r = std::round(t);
    if (std::abs(t - r) < 1e-9) {
        const auto i = static_cast<long long>(r);
        return std::to_string(i);
    }
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), t, std::chars_format::fixed, 2);
    std::string s(buf, end);
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
    return s;
}

std::string verb_phrase(const std::string& action, const Lexicon& lexicon) {
    auto it = lexicon.find(action);
    if (it != lexicon.end()) return it->second;
    std::string words = action;
    std::replace(words.begin(), words.end(), '_', ' ');
    return "performed " + words;
}

Summary summarize(const std::vector<Event>& events, SummaryStyle style, const SummaryOptions& options) {
    Summary s;
    s.events = events;
    if (events.empty()) {
        s.text = kEmptySummary;
        return s;
    }
    std::string& text = s.text;
    if (style == SummaryStyle::Timeline) {
        for (std::size_t i = 0; i < events.size(); ++i) {
            const auto t = format_seconds(events[i].t_seconds);
            const auto vp = verb_phrase(events[i].action, options.lexicon);
            switch (i % 3) {
            case 0:
                if (i) text += ' ';
                text += "At " + t + " seconds, " + (i ? std::string("they") : options.subject) + " " + vp + ".";
                break;
            case 1:
                text += " By " + t + " seconds, they " + vp;
                if (i + 1 == events.size()) text += ".";
                break;
            default:
                text += " and then at " + t + " seconds they " + vp + ".";
                break;
            }
        }
        return s;
    }
    std::size_t sentence = 0;
    for (std::size_t i = 0; i < events.size();) {
        std::size_t j = i + 1;
        while (j < events.size() && events[j].action == events[i].action) ++j;
        const auto subject = sentence ? std::string("they") : options.subject;
        const auto vp = verb_phrase(events[i].action, options.lexicon);
        if (sentence) text += ' ';
        if (j - i == 1) {
            text += "At " + format_seconds(events[i].t_seconds) + " seconds, " + subject + " " + vp + ".";
        } else {
            text += "From " + format_seconds(events[i].t_seconds) + " to " + format_seconds(events[j - 1].t_seconds) +
                    " seconds, " + subject + " " + vp + " (" + std::to_string(j - i) + " detections).";
        }
        ++sentence;
        i = j;
    }
    return s;
}

ExternalClientConfig ExternalClientConfig::from_env() {
    ExternalClientConfig c;
    if (const char* v = std::getenv("ACT360_LLM_ENDPOINT")) c.endpoint = v;
    if (const char* v = std::getenv("ACT360_LLM_KEY")) c.key = v;
    if (const char* v = std::getenv("ACT360_LLM_TIMEOUT")) {
        char* end = nullptr;
        const double t = std::strtod(v, &end);
        if (end == v || *end != '\0' || !(t > 0.0)) throw ValidationError("ACT360_LLM_TIMEOUT must be a positive number");
        c.timeout_s = t;
    }
    return c;
}

std::string summary_prompt(const std::vector<Event>& events, SummaryStyle style, const SummaryOptions& options) {
    std::ostringstream os;
    os << "Summarize a firefighter training video for an instructor debriefing. Refer to the trainee as \""
       << options.subject << "\".\n";
    if (style == SummaryStyle::Timeline) {
        os << "Write one clause per event in chronological order and state each time in seconds.\n";
    } else {
        os << "Write a brief summary that groups consecutive repeats of the same action.\n";
    }
    os << "Events (t_seconds | action | confidence):\n";
    for (const auto& e : events) {
        char conf[32];
        auto [end, ec] = std::to_chars(conf, conf + sizeof(conf), e.confidence, std::chars_format::fixed, 3);
        os << format_seconds(e.t_seconds) << " | " << e.action << " | " << std::string(conf, end) << '\n';
    }
    return os.str();
}

namespace {

struct Endpoint {
    std::string scheme, host, path;
    int port = 80;
};

Endpoint parse_endpoint(const std::string& url) {
    static const std::regex re(R"(^(https?)://([^/:]+)(?::(\d+))?(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ValidationError("malformed endpoint '" + url + "'");
    Endpoint e;
    e.scheme = m[1];
    e.host = m[2];
    e.port = m[3].matched ? std::stoi(m[3]) : (e.scheme == "https" ? 443 : 80);
    e.path = m[4].matched ? std::string(m[4]) : "/";
    return e;
}

Summary fallback(const std::vector<Event>& events, SummaryStyle style, const SummaryOptions& options,
                 const std::string& reason) {
    Summary s = summarize(events, style, options);
    s.warning = "external summarizer unavailable, used template: " + reason;
    std::clog << "warning: " << *s.warning << '\n';
    return s;
}

}  // namespace

Summary llm_summarize(const std::vector<Event>& events, SummaryStyle style, const ExternalClientConfig& client,
                      const SummaryOptions& options) {
    if (!client.configured()) return fallback(events, style, options, "no endpoint configured");
    Endpoint ep;
    try {
        ep = parse_endpoint(client.endpoint);
    } catch (const ValidationError& e) {
        return fallback(events, style, options, e.what());
    }
    if (ep.scheme != "http") return fallback(events, style, options, "https endpoints are not supported by this build");
    httplib::Client cli(ep.host, ep.port);
    const auto secs = static_cast<time_t>(client.timeout_s);
    const auto usecs = static_cast<time_t>((client.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!client.key.empty()) headers.emplace("Authorization", "Bearer " + client.key);
    ojson body;
    body["prompt"] = summary_prompt(events, style, options);
    body["max_tokens"] = client.max_tokens;
    auto res = cli.Post(ep.path, headers, body.dump(), "application/json");
    if (!res) return fallback(events, style, options, httplib::to_string(res.error()));
    if (res->status != 200) return fallback(events, style, options, "HTTP status " + std::to_string(res->status));
    std::string text = res->body;
    auto parsed = ojson::parse(res->body, nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object() && parsed.contains("text") && parsed["text"].is_string()) {
        text = parsed["text"].get<std::string>();
    }
    if (text.empty()) return fallback(events, style, options, "empty response");
    Summary s;
    s.text = text;
    s.events = events;
    s.generator = "external";
    return s;
}

// ---------------------------------------------------------------------------
// JSON views.

std::string events_json(const std::vector<Event>& events) {
    ojson j = ojson::array();
    for (const auto& e : events) j.push_back(event_to_json(e));
    return j.dump();
}

std::string summary_json(const Summary& summary) {
    ojson j;
    j["text"] = summary.text;
    j["generator"] = summary.generator;
    j["events"] = ojson::array();
    for (const auto& e : summary.events) j["events"].push_back(event_to_json(e));
    if (summary.warning) j["warning"] = *summary.warning;
    return j.dump();
}

std::string videos_json(const DetectionStore& store) {
    ojson j = ojson::array();
    for (const auto& id : store.ids()) {
        const auto& r = store.video(id);
        ojson v;
        v["video_id"] = id;
        v["fps"] = r.info.fps;
        v["duration"] = r.info.duration;
        v["condition"] = r.info.condition;
        v["events"] = r.events.size();
        j.push_back(std::move(v));
    }
    return j.dump();
}

std::string frame_bmp(const Tensor& frame) {
    if (frame.rank() != 3 || (frame.dim(0) != 1 && frame.dim(0) != 3)) {
        throw ValidationError("frame must be [1,H,W] or [3,H,W], got " + shape_str(frame.shape()));
    }
    const std::size_t c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    const std::size_t stride = (3 * w + 3) / 4 * 4;
    const std::size_t pixels = stride * h, total = 54 + pixels;
    std::string out(total, '\0');
    auto put = [&](std::size_t at, std::uint32_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) out[at + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    };
    out[0] = 'B';
    out[1] = 'M';
    put(2, static_cast<std::uint32_t>(total), 4);
    put(10, 54, 4);
    put(14, 40, 4);
    put(18, static_cast<std::uint32_t>(w), 4);
    put(22, static_cast<std::uint32_t>(h), 4);
    put(26, 1, 2);
    put(28, 24, 2);
    put(34, static_cast<std::uint32_t>(pixels), 4);
    put(38, 2835, 4);
    put(42, 2835, 4);
    auto byte = [](float v) {
        return static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    };
    for (std::size_t y = 0; y < h; ++y) {
        const std::size_t row = 54 + (h - 1 - y) * stride;
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t k = 0; k < 3; ++k) {
                const std::size_t ch = c == 1 ? 0 : 2 - k;  // BGR
                out[row + 3 * x + k] = byte(frame.at({ch, y, x}));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Service.

struct DebriefService::Impl {
    httplib::Server server;
    std::thread worker;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
    ojson j;
    j["error"] = message;
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

double parse_number(const std::string& text, const std::string& name) {
    double v = 0.0;
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ValidationError("parameter '" + name + "' is not a number: " + text);
    return v;
}

std::set<std::string> split_actions(const std::string& list) {
    std::set<std::string> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.insert(item);
    return out;
}

Query query_from_params(const std::string& video, const httplib::Request& req) {
    Query q;
    q.video_id = video;
    if (req.has_param("from")) q.t0 = parse_number(req.get_param_value("from"), "from");
    if (req.has_param("to")) q.t1 = parse_number(req.get_param_value("to"), "to");
    if (req.has_param("min_conf")) q.min_confidence = parse_number(req.get_param_value("min_conf"), "min_conf");
    if (req.has_param("action")) {
        std::set<std::string> actions;
        for (std::size_t i = 0; i < req.get_param_value_count("action"); ++i) {
            auto part = split_actions(req.get_param_value("action", i));
            actions.insert(part.begin(), part.end());
        }
        q.actions = std::move(actions);
    }
    q.validate();
    return q;
}

struct SummarizeRequest {
    Query query;
    SummaryStyle style = SummaryStyle::Timeline;
};

SummarizeRequest summarize_request(const std::string& body) {
    auto j = ojson::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ValidationError("summarize: body must be a JSON object");
    SummarizeRequest r;
    const auto& video = field(j, "video", "summarize");
    if (!video.is_string()) throw ValidationError("summarize.video: expected a string");
    r.query.video_id = video.get<std::string>();
    if (j.contains("from")) r.query.t0 = number_field(j, "from", "summarize");
    if (j.contains("to")) r.query.t1 = number_field(j, "to", "summarize");
    if (j.contains("min_conf")) r.query.min_confidence = number_field(j, "min_conf", "summarize");
    if (j.contains("actions")) {
        const auto& a = j["actions"];
        if (!a.is_array() || !std::all_of(a.begin(), a.end(), [](const ojson& v) { return v.is_string(); })) {
            throw ValidationError("summarize.actions: expected an array of strings");
        }
        std::set<std::string> actions;
        for (const auto& v : a) actions.insert(v.get<std::string>());
        r.query.actions = std::move(actions);
    }
    if (j.contains("style")) {
        if (!j["style"].is_string()) throw ValidationError("summarize.style: expected a string");
        r.style = summary_style_from_name(j["style"].get<std::string>());
    }
    r.query.validate();
    return r;
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const NotFound& e) {
        send_error(res, 404, e.what());
    } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, e.what());
    }
}

}  // namespace

DebriefService::DebriefService(const std::filesystem::path& root, ServiceOptions options)
    : root_(root),
      store_(std::make_shared<const DetectionStore>(DetectionStore::load(root))),
      options_(std::move(options)),
      impl_(std::make_unique<Impl>()) {
    auto& srv = impl_->server;
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                             {"Access-Control-Allow-Headers", "Content-Type"}});
    srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    srv.Get("/videos", [this](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] { res.set_content(videos_json(*store_), "application/json"); });
    });

    srv.Get(R"(/videos/([^/]+)/detections)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            store_->video(id);
            res.set_content(events_json(query(*store_, query_from_params(id, req))), "application/json");
        });
    });

    srv.Post("/summarize", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto r = summarize_request(req.body);
            const auto events = query(*store_, r.query);
            const Summary s = options_.external && options_.external->configured()
                                  ? llm_summarize(events, r.style, *options_.external, options_.summary)
                                  : summarize(events, r.style, options_.summary);
            res.set_content(summary_json(s), "application/json");
        });
    });

    srv.Get(R"(/videos/([^/]+)/frames/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            store_->video(id);
            char name[32];
            std::snprintf(name, sizeof(name), "%06llu.t", std::stoull(req.matches[2]));
            const auto path = root_ / id / "frames" / name;
            if (!std::filesystem::exists(path)) throw NotFound("video '" + id + "' has no frame " + std::string(req.matches[2]));
            std::ifstream is(path, std::ios::binary);
            res.set_content(frame_bmp(read_tensor(is)), "image/bmp");
        });
    });

    srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "no such endpoint" : "request failed");
    });
}

DebriefService::~DebriefService() { stop(); }

int DebriefService::start(const std::string& host, int port) {
    auto& srv = impl_->server;
    int bound = port;
    if (port == 0) {
        bound = srv.bind_to_any_port(host);
    } else if (!srv.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw RuntimeFailure("cannot bind " + host + ":" + std::to_string(port));
    impl_->worker = std::thread([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    return bound;
}

void DebriefService::run(const std::string& host, int port) {
    if (!impl_->server.listen(host, port)) throw RuntimeFailure("cannot listen on " + host + ":" + std::to_string(port));
}

void DebriefService::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->worker.joinable()) impl_->worker.join();
}

}  // namespace act360
