#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>

#include "act360/annotate.hpp"
#include "act360/debrief.hpp"
#include "act360/error.hpp"
#include "act360/rng.hpp"
#include "act360/serialize.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace act360;
namespace fs = std::filesystem;

namespace {

Event event(std::size_t frame, double t, const std::string& action, double conf = 0.9) {
    return Event{frame, t, action, conf, Box{0.1, 0.2, 0.3, 0.6}};
}

VideoRecord drill() {
    VideoRecord r;
    r.info = VideoInfo{"drill1", 1.0, 40.0, "smoke"};
    r.events = {event(10, 10, "climb_ladder"), event(22, 22, "break_door", 0.6), event(30, 30, "carry_civilian")};
    return r;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Minimal stand-in for an external text generator.
struct MockGenerator {
    httplib::Server server;
    std::thread worker;
    int port = 0;
    std::string last_body, last_auth;
    int status = 200;
    std::string reply = R"({"text":"External summary."})";

    MockGenerator() {
        server.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
            last_body = req.body;
            last_auth = req.get_header_value("Authorization");
            res.status = status;
            res.set_content(reply, "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        worker = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~MockGenerator() {
        server.stop();
        worker.join();
    }
};

}  // namespace

TEST_CASE("query by range, action and confidence") {
    DetectionStore store;
    store.put(drill());
    Query q{"drill1", 15, 31};
    auto hits = query(store, q);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].action == "break_door");
    CHECK(hits[1].action == "carry_civilian");

    q.min_confidence = 0.7;
    CHECK(query(store, q).size() == 1);
    q = Query{"drill1"};
    q.actions = std::set<std::string>{"climb_ladder", "carry_civilian"};
    CHECK(query(store, q).size() == 2);
    CHECK(query(store, Query{"drill1", 10, 10}).size() == 1);

    CHECK_THROWS_AS(query(store, Query{"nope"}), NotFound);
    CHECK_THROWS_AS(query(store, Query{"drill1", 5, 1}), ValidationError);
    Query bad{"drill1"};
    bad.min_confidence = 1.5;
    CHECK_THROWS_AS(query(store, bad), ValidationError);
}

TEST_CASE("store sorts, deduplicates and rejects bad records") {
    DetectionStore store;
    VideoRecord r = drill();
    std::reverse(r.events.begin(), r.events.end());
    r.events.push_back(r.events.front());
    store.put(r);
    const auto& kept = store.video("drill1").events;
    REQUIRE(kept.size() == 3);
    CHECK(std::is_sorted(kept.begin(), kept.end(), event_before));

    VideoRecord bad = drill();
    bad.events[1].confidence = 2.0;
    CHECK_THROWS_AS(store.put(bad), ValidationError);
    bad = drill();
    bad.info.video_id = "../escape";
    CHECK_THROWS_AS(store.put(bad), ValidationError);
    bad = drill();
    bad.info.fps = 0.0;
    CHECK_THROWS_AS(store.put(bad), ValidationError);
}

TEST_CASE("template summaries") {
    DetectionStore store;
    store.put(drill());
    const auto all = query(store, Query{"drill1"});
    auto s = summarize(all, SummaryStyle::Timeline);
    CHECK(s.text ==
          "At 10 seconds, the firefighter climbed the ladder. By 22 seconds, they breached the door and then at "
          "30 seconds they carried a civilian.");
    CHECK(s.generator == "template");
    CHECK(s.events == all);
    CHECK(summarize({}, SummaryStyle::Timeline).text == kEmptySummary);

    std::vector<Event> repeats{event(1, 1, "operate_hose"), event(2, 2, "operate_hose"), event(3, 3.5, "operate_hose"),
                               event(4, 4, "juggle_axes")};
    auto brief = summarize(repeats, SummaryStyle::Brief);
    CHECK(brief.text ==
          "From 1 to 3.5 seconds, the firefighter operated the hose (3 detections). At 4 seconds, they performed "
          "juggle axes.");

    SummaryOptions custom;
    custom.subject = "Trainee B";
    custom.lexicon = parse_lexicon("# local terms\nclimb_ladder = went up the ladder\n");
    CHECK(summarize({all[0]}, SummaryStyle::Timeline, custom).text == "At 10 seconds, Trainee B went up the ladder.");
    CHECK_THROWS_AS(parse_lexicon("climb_ladder went up"), ValidationError);
    CHECK_THROWS_AS(summary_style_from_name("haiku"), ValidationError);

    CHECK(format_seconds(10.0) == "10");
    CHECK(format_seconds(2.25) == "2.25");
    CHECK(format_seconds(2.5) == "2.5");
}

TEST_CASE("prompt lists every event once in order") {
    DetectionStore store;
    store.put(drill());
    const auto all = query(store, Query{"drill1"});
    const auto prompt = summary_prompt(all, SummaryStyle::Timeline, {});
    std::size_t at = 0;
    for (const auto& line : {"10 | climb_ladder | 0.900", "22 | break_door | 0.600", "30 | carry_civilian | 0.900"}) {
        const auto pos = prompt.find(line);
        REQUIRE(pos != std::string::npos);
        CHECK(pos >= at);
        CHECK(prompt.find(line, pos + 1) == std::string::npos);
        at = pos;
    }
    CHECK(prompt.find("the firefighter") != std::string::npos);
}

TEST_CASE("external summarizer and its fallback") {
    DetectionStore store;
    store.put(drill());
    const auto all = query(store, Query{"drill1"});
    MockGenerator mock;
    ExternalClientConfig client;
    client.endpoint = "http://127.0.0.1:" + std::to_string(mock.port) + "/v1/generate";
    client.key = "secret";
    client.timeout_s = 2.0;
    auto s = llm_summarize(all, SummaryStyle::Timeline, client);
    CHECK(s.text == "External summary.");
    CHECK(s.generator == "external");
    CHECK_FALSE(s.warning.has_value());
    CHECK(mock.last_auth == "Bearer secret");
    auto body = nlohmann::json::parse(mock.last_body);
    CHECK(body["prompt"] == summary_prompt(all, SummaryStyle::Timeline, {}));
    CHECK(body["max_tokens"] == 256);

    mock.reply = "Plain words.";
    CHECK(llm_summarize(all, SummaryStyle::Timeline, client).text == "Plain words.");

    mock.status = 500;
    auto failed = llm_summarize(all, SummaryStyle::Timeline, client);
    CHECK(failed.generator == "template");
    CHECK(failed.text == summarize(all, SummaryStyle::Timeline).text);
    REQUIRE(failed.warning.has_value());
    CHECK(failed.warning->find("500") != std::string::npos);

    ExternalClientConfig dead;
    dead.endpoint = "http://127.0.0.1:1/v1/generate";
    dead.timeout_s = 0.5;
    auto offline = llm_summarize(all, SummaryStyle::Timeline, dead);
    CHECK(offline.generator == "template");
    CHECK(offline.warning.has_value());
    CHECK(llm_summarize(all, SummaryStyle::Timeline, ExternalClientConfig{}).warning.has_value());
}

TEST_CASE("inference json and annotation ingest") {
    const VideoRecord r = drill();
    const std::string text = inference_json(r.info, r.events);
    auto back = parse_inference_json(text);
    CHECK(back == r);
    CHECK_THROWS_AS(parse_inference_json("{\"video_id\": 3}"), ValidationError);
    CHECK_THROWS_AS(parse_inference_json("not json"), ValidationError);

    std::vector<Detection> dets{{"drill1", 20, Box{0.9, 0.1, 0.1, 0.5}, 1, 0.8}};
    auto events = detections_to_events(dets, {"climb_ladder", "break_door"}, 10.0);
    REQUIRE(events.size() == 1);
    CHECK(events[0].action == "break_door");
    CHECK(events[0].t_seconds == doctest::Approx(2.0));
    CHECK(events[0].box.wraps());
    auto seam = parse_inference_json(inference_json(r.info, events));
    CHECK(seam.events == events);

    RoiAnnotation ann{"clipA", "climb_ladder", {}};
    for (std::size_t f = 0; f < 3; ++f) ann.frames.push_back({f, double(f) * 0.5, Box{0.1, 0.1, 0.2, 0.3}});
    DetectionStore store;
    ingest_text(store, export_csv(std::vector<RoiAnnotation>{ann}), false);
    ingest_text(store, text, true);
    CHECK(store.ids() == std::vector<std::string>{"clipA", "drill1"});
    CHECK(store.video("clipA").info.fps == doctest::Approx(2.0));
    CHECK(store.video("clipA").events.size() == 3);
    CHECK(store.video("clipA").events[0].confidence == 1.0);

    auto dir = fresh_dir("act360_store_test");
    store.save(dir);
    CHECK(DetectionStore::load(dir) == store);
    fs::remove_all(dir);
}

TEST_CASE("HTTP service matches the in-process API byte for byte") {
    auto root = fresh_dir("act360_service_test");
    DetectionStore store;
    store.put(drill());
    store.save(root);
    Rng rng(3);
    const Tensor frame = act360::testing::random_tensor({3, 6, 10}, rng, -0.2, 1.2);
    fs::create_directories(root / "drill1" / "frames");
    {
        std::ofstream os(root / "drill1" / "frames" / "000003.t", std::ios::binary);
        write_tensor(os, frame);
    }

    DebriefService service(root);
    const int port = service.start("127.0.0.1", 0);
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);

    auto videos = cli.Get("/videos");
    REQUIRE(videos);
    CHECK(videos->status == 200);
    CHECK(videos->body == videos_json(store));
    CHECK(videos->get_header_value("Access-Control-Allow-Origin") == "*");

    auto dets = cli.Get("/videos/drill1/detections?from=15&to=31");
    REQUIRE(dets);
    CHECK(dets->status == 200);
    CHECK(dets->body == events_json(query(store, Query{"drill1", 15, 31})));
    Query filtered{"drill1"};
    filtered.actions = std::set<std::string>{"climb_ladder", "break_door"};
    filtered.min_confidence = 0.5;
    auto by_action = cli.Get("/videos/drill1/detections?action=climb_ladder,break_door&min_conf=0.5");
    REQUIRE(by_action);
    CHECK(by_action->body == events_json(query(store, filtered)));

    nlohmann::json req{{"video", "drill1"}, {"from", 0}, {"to", 40}, {"style", "timeline"}};
    auto sum = cli.Post("/summarize", req.dump(), "application/json");
    REQUIRE(sum);
    CHECK(sum->status == 200);
    const auto expected = summarize(query(store, Query{"drill1", 0, 40}), SummaryStyle::Timeline);
    CHECK(sum->body == summary_json(expected));
    CHECK(nlohmann::json::parse(sum->body)["text"].get<std::string>().rfind("At 10 seconds", 0) == 0);

    auto bmp = cli.Get("/videos/drill1/frames/3");
    REQUIRE(bmp);
    CHECK(bmp->status == 200);
    CHECK(bmp->get_header_value("Content-Type") == "image/bmp");
    CHECK(bmp->body == frame_bmp(frame));
    CHECK(bmp->body.substr(0, 2) == "BM");
    CHECK(bmp->body.size() == 54 + 6 * 32);

    for (const char* path : {"/videos/ghost/detections", "/videos/drill1/frames/9", "/nothing/here"}) {
        auto r = cli.Get(path);
        REQUIRE(r);
        CAPTURE(path);
        CHECK(r->status == 404);
        CHECK(nlohmann::json::parse(r->body).contains("error"));
    }
    for (const char* path : {"/videos/drill1/detections?from=20&to=10", "/videos/drill1/detections?from=abc"}) {
        auto r = cli.Get(path);
        REQUIRE(r);
        CHECK(r->status == 400);
    }
    auto bad = cli.Post("/summarize", "{\"video\": 7}", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    auto ghost = cli.Post("/summarize", R"({"video":"ghost"})", "application/json");
    REQUIRE(ghost);
    CHECK(ghost->status == 404);

    auto pre = cli.Options("/summarize");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    service.stop();
    fs::remove_all(root);
}
