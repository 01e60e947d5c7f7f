#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "act360/annotate.hpp"
#include "act360/box.hpp"

namespace act360 {

struct Event {
    std::size_t frame = 0;
    double t_seconds = 0.0;
    std::string action;
    double confidence = 1.0;
    Box box;

    friend bool operator==(const Event&, const Event&) = default;
};

/// Chronological, then by action, confidence (desc), frame and box.
bool event_before(const Event& a, const Event& b);

struct VideoInfo {
    std::string video_id;
    double fps = 1.0;
    double duration = 0.0;  // seconds
    std::string condition;

    friend bool operator==(const VideoInfo&, const VideoInfo&) = default;
};

struct VideoRecord {
    VideoInfo info;
    std::vector<Event> events;  // sorted, deduplicated

    friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

/// Events per video. Stored on disk as <root>/<video_id>/meta.json and
/// events.json, with optional frames/<n>.t tensors for the overlay view.
class DetectionStore {
public:
    /// Validates, sorts and deduplicates, replacing any previous record.
    void put(VideoRecord record);
    bool contains(const std::string& video_id) const { return videos_.count(video_id) > 0; }
    /// Throws NotFound for unknown ids.
    const VideoRecord& video(const std::string& video_id) const;
    std::vector<std::string> ids() const;
    std::size_t size() const { return videos_.size(); }

    void save(const std::filesystem::path& root) const;
    static DetectionStore load(const std::filesystem::path& root);

    friend bool operator==(const DetectionStore&, const DetectionStore&) = default;

private:
    std::map<std::string, VideoRecord> videos_;
};

/// Inference output: {video_id, fps, events:[{frame, t_seconds, action,
/// confidence, box:[x1,y1,x2,y2], wraps}]}, optional condition and duration.
std::string inference_json(const VideoInfo& info, const std::vector<Event>& events);
std::vector<Event> detections_to_events(const std::vector<Detection>& dets, const std::vector<std::string>& classes,
                                        double fps);

VideoRecord parse_inference_json(const std::string& text);
/// Annotation CSV rows become events with confidence 1; fps is recovered
/// from frame/t_seconds when possible.
std::vector<VideoRecord> parse_annotation_events(const std::string& csv_text);

/// Reads a .json inference file or an annotation .csv and adds its videos.
void ingest(DetectionStore& store, const std::filesystem::path& source);
void ingest_text(DetectionStore& store, const std::string& text, bool is_json);

struct Query {
    std::string video_id;
    double t0 = 0.0;
    double t1 = std::numeric_limits<double>::infinity();
    std::optional<std::set<std::string>> actions;
    double min_confidence = 0.0;

    void validate() const;
};

std::vector<Event> query(const DetectionStore& store, const Query& q);

// ---------------------------------------------------------------------------
// Summaries.

enum class SummaryStyle { Timeline, Brief };

SummaryStyle summary_style_from_name(const std::string& name);
std::string summary_style_name(SummaryStyle style);

/// action id -> verb phrase in the past tense.
using Lexicon = std::map<std::string, std::string>;

Lexicon default_lexicon();
/// Lines of "action_id = verb phrase"; '#' starts a comment.
Lexicon parse_lexicon(const std::string& text);
Lexicon load_lexicon(const std::filesystem::path& path);

struct SummaryOptions {
    std::string subject = "the firefighter";
    Lexicon lexicon = default_lexicon();
};

struct Summary {
    std::string text;
    std::vector<Event> events;
    std::string generator = "template";  // or "external"
    std::optional<std::string> warning;  // set when an external request fell back
};

inline constexpr const char* kEmptySummary = "No detected actions in the selected range.";

std::string format_seconds(double t);
std::string verb_phrase(const std::string& action, const Lexicon& lexicon);

Summary summarize(const std::vector<Event>& events, SummaryStyle style, const SummaryOptions& options = {});

struct ExternalClientConfig {
    std::string endpoint;  // http://host[:port]/path
    std::string key;
    double timeout_s = 10.0;
    int max_tokens = 256;

    /// ACT360_LLM_ENDPOINT, ACT360_LLM_KEY, ACT360_LLM_TIMEOUT.
    static ExternalClientConfig from_env();
    bool configured() const { return !endpoint.empty(); }
};

std::string summary_prompt(const std::vector<Event>& events, SummaryStyle style, const SummaryOptions& options);

/// Posts {prompt, max_tokens}; the reply is either JSON with a "text" field or
/// plain text. Any failure falls back to summarize() with a warning.
Summary llm_summarize(const std::vector<Event>& events, SummaryStyle style, const ExternalClientConfig& client,
                      const SummaryOptions& options = {});

// ---------------------------------------------------------------------------
// JSON views shared by the service and in-process callers.

std::string events_json(const std::vector<Event>& events);
std::string summary_json(const Summary& summary);
std::string videos_json(const DetectionStore& store);

/// Uncompressed 24-bit BMP of a [C,H,W] frame, values clamped to [0,1].
std::string frame_bmp(const Tensor& frame);

struct ServiceOptions {
    SummaryOptions summary;
    std::optional<ExternalClientConfig> external;
};

/// HTTP front end over a store directory, loaded once at construction.
class DebriefService {
public:
    DebriefService(const std::filesystem::path& root, ServiceOptions options = {});
    ~DebriefService();
    DebriefService(const DebriefService&) = delete;
    DebriefService& operator=(const DebriefService&) = delete;

    /// Binds and serves on a background thread; returns the bound port
    /// (port 0 picks a free one).
    int start(const std::string& host, int port);
    /// Binds and blocks until stop().
    void run(const std::string& host, int port);
    void stop();

    const DetectionStore& store() const { return *store_; }

private:
    struct Impl;
    std::filesystem::path root_;
    std::shared_ptr<const DetectionStore> store_;
    ServiceOptions options_;
    std::unique_ptr<Impl> impl_;
};

}  // namespace act360
