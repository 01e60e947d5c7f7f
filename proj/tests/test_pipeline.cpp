#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "act360/error.hpp"
#include "act360/pipeline.hpp"
#include "doctest.h"

using namespace act360;
namespace fs = std::filesystem;

namespace {

SyntheticConfig tiny_synthetic() {
    SyntheticConfig c;
    c.videos = 10;
    c.frames = 5;
    c.height = 16;
    return c;
}

void reject(const std::string& text, const std::string& expect) {
    try {
        Settings::from_json(text);
        FAIL("accepted " << text);
    } catch (const ValidationError& e) {
        CAPTURE(e.what());
        CHECK(std::string(e.what()).find(expect) != std::string::npos);
    }
}

}  // namespace

TEST_CASE("settings json") {
    Settings defaults;
    CHECK(Settings::from_json("{}").to_json() == defaults.to_json());
    CHECK(Settings::from_json(defaults.to_json()).to_json() == defaults.to_json());

    auto s = Settings::from_json(R"({"seed": 4, "detector": {"clip_len": 4, "use_eac": false}})");
    CHECK(s.seed == 4);
    CHECK(s.detector.clip_len == 4);
    CHECK_FALSE(s.detector.use_eac);
    CHECK(s.detector.epochs == defaults.detector.epochs);

    reject(R"({"detector": {"clip_length": 4}})", "config.detector.clip_length");
    reject(R"({"detector": {"clip_len": "four"}})", "config.detector.clip_len");
    reject(R"({"bogus": 1})", "config.bogus");
    reject(R"({"postprocess": {"smooth_window": 4}})", "smooth_window");
    reject("[1, 2]", "config");
    reject("{", "config");
}

TEST_CASE("settings overrides") {
    Settings s;
    s.apply_override("detector.epochs=3");
    CHECK(s.detector.epochs == 3);
    s.apply_override("debrief.subject=Trainee A");
    CHECK(s.debrief.subject == "Trainee A");
    s.apply_override("synthetic.classes=[\"climb_ladder\"]");
    CHECK(s.synthetic.classes == std::vector<std::string>{"climb_ladder"});
    s.apply_override("postprocess.confidence_threshold=0.1");
    CHECK(s.post.confidence_threshold == 0.1);

    const auto before = s.to_json();
    CHECK_THROWS_AS(s.apply_override("detector.nope=1"), ValidationError);
    CHECK_THROWS_AS(s.apply_override("detector.epochs=many"), ValidationError);
    CHECK_THROWS_AS(s.apply_override("optimize.rate=1.5"), ValidationError);
    CHECK_THROWS_AS(s.apply_override("epochs"), ValidationError);
    CHECK(s.to_json() == before);
}

TEST_CASE("synthetic data is deterministic and round trips through disk") {
    auto cfg = tiny_synthetic();
    Dataset a = gen_synthetic(cfg, 3), b = gen_synthetic(cfg, 3);
    REQUIRE(a.videos.size() == 10);
    for (std::size_t v = 0; v < a.videos.size(); ++v) {
        CHECK(a.videos[v].frames == b.videos[v].frames);
        CHECK(a.videos[v].objects == b.videos[v].objects);
        CHECK(a.videos[v].frames.front().shape() == Shape{3, 16, 32});
    }
    CHECK_FALSE(gen_synthetic(cfg, 4).videos[0].frames == a.videos[0].frames);

    auto dir = fs::temp_directory_path() / "act360_dataset_test";
    fs::remove_all(dir);
    write_dataset(dir, a);
    CHECK(fs::exists(dir / "clips" / "manifest.json"));
    CHECK(fs::exists(dir / "annotations.csv"));
    Dataset back = read_dataset(dir);
    CHECK(back.classes == a.classes);
    REQUIRE(back.videos.size() == a.videos.size());
    for (std::size_t v = 0; v < a.videos.size(); ++v) {
        CHECK(back.videos[v].video_id == a.videos[v].video_id);
        CHECK(back.videos[v].frames == a.videos[v].frames);
        CHECK(back.videos[v].objects.size() == a.videos[v].objects.size());
    }
    fs::remove_all(dir);
}

TEST_CASE("cap boxes") {
    const double pi = std::numbers::pi;
    Box eq = cap_box(0.0, 0.0, 0.2);
    CHECK(eq.center_x() == doctest::Approx(0.5));
    CHECK(eq.center_y() == doctest::Approx(0.5));
    CHECK(eq.width() == doctest::Approx(0.4 / (2 * pi)));
    CHECK(eq.height() == doctest::Approx(0.4 / pi));
    CHECK(cap_box(0.0, pi - 0.05, 0.2).wraps());
    // Higher latitude stretches the box horizontally.
    CHECK(cap_box(1.0, 0.0, 0.2).width() > eq.width());
}

TEST_CASE("split_clips keeps videos whole") {
    Dataset data = gen_synthetic(tiny_synthetic(), 1);
    Settings s;
    s.detector.clip_len = 3;
    auto split = split_clips(data, s);
    std::set<std::string> train_ids, test_ids;
    for (const auto& c : split.train) train_ids.insert(c.video_id);
    for (const auto& c : split.test) test_ids.insert(c.video_id);
    for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
    CHECK(split.train.size() + split.val.size() + split.test.size() == 10 * (5 - 3 + 1));
    for (const auto& c : split.train) {
        CHECK(c.clip.shape() == Shape{3, 3, 16, 32});
        CHECK(c.frame >= 2);
    }

    auto cfg = detector_for(data, s);
    CHECK(cfg.height == 16);
    CHECK(cfg.width == 32);
    CHECK(cfg.num_classes == data.classes.size());
}
