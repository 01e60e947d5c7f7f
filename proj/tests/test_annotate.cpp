#include <cmath>

#include "act360/annotate.hpp"
#include "act360/error.hpp"
#include "act360/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace act360;

namespace {

RoiAnnotation make_annotation(const std::string& video, const std::string& action, std::size_t first,
                              std::size_t count, Box start, double dx) {
    RoiAnnotation a{video, action, {}};
    for (std::size_t i = 0; i < count; ++i) {
        Box b = start;
        b.x1 = std::round(wrap_unit(start.x1 + dx * double(i)) * 1e6) / 1e6;
        b.x2 = std::round(wrap_unit(start.x2 + dx * double(i)) * 1e6) / 1e6;
        a.frames.push_back({first + i, double(first + i) * 0.5, b});
    }
    return a;
}

}  // namespace

TEST_CASE("track_roi interp") {
    std::vector<Tensor> frames(5, Tensor({1, 8, 16}));
    Box a{0.1, 0.2, 0.3, 0.4};
    for (const auto& b : track_roi(frames, a, a, TrackMethod::Interp)) CHECK(b == a);

    Box end{0.5, 0.4, 0.7, 0.8};
    auto boxes = track_roi(frames, a, end, TrackMethod::Interp);
    REQUIRE(boxes.size() == 5);
    CHECK(boxes.front() == a);
    CHECK(boxes.back() == end);
    CHECK(boxes[2].x1 == doctest::Approx(0.3));
    CHECK(boxes[2].y1 == doctest::Approx(0.3));
    CHECK(boxes[2].x2 == doctest::Approx(0.5));
    CHECK(boxes[2].y2 == doctest::Approx(0.6));

    // Across the seam the short way round.
    Box left{0.9, 0.2, 0.95, 0.4}, right{0.05, 0.2, 0.1, 0.4};
    auto seam = track_roi({frames[0], frames[1], frames[2]}, left, right, TrackMethod::Interp);
    CHECK(seam[1].x1 == doctest::Approx(0.975));
    CHECK(seam[1].x2 == doctest::Approx(0.025));

    CHECK_THROWS_AS(track_roi({frames[0]}, a, a, TrackMethod::Interp), ValidationError);
    CHECK_THROWS_AS(track_roi(frames, Box{0.1, 0.2, 0.3, 0.2}, a, TrackMethod::Interp), ValidationError);
    CHECK_THROWS_AS(track_method_from_name("kalman"), ValidationError);
}

TEST_CASE("track_roi ncc follows a moving target through the seam") {
    std::vector<Tensor> frames;
    std::vector<Box> truth;
    act360::testing::moving_target(frames, truth);
    auto boxes = track_roi(frames, truth.front(), truth.back(), TrackMethod::Ncc);
    REQUIRE(boxes.size() == truth.size());
    CHECK(boxes.front() == truth.front());
    CHECK(boxes.back() == truth.back());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        CAPTURE(i);
        CHECK(wrap_iou(boxes[i], truth[i]) >= 0.8);
    }
}

TEST_CASE("track_roi ncc falls back to interp on a featureless clip") {
    std::vector<Tensor> flat(4, Tensor({1, 16, 32}, 0.5f));
    Box a{0.1, 0.2, 0.3, 0.4}, b{0.3, 0.2, 0.5, 0.4};
    CHECK(track_roi(flat, a, b, TrackMethod::Ncc) == track_roi(flat, a, b, TrackMethod::Interp));
}

TEST_CASE("annotation CSV round trip") {
    CHECK(export_csv(std::vector<RoiAnnotation>{}) == std::string(kAnnotationCsvHeader) + "\n");
    CHECK(import_csv(export_csv(std::vector<RoiAnnotation>{})).empty());

    std::vector<RoiAnnotation> set{
        make_annotation("vid_a", "climb_ladder", 0, 4, Box{0.1, 0.2, 0.25, 0.5}, 0.01),
        make_annotation("vid_a", "break_door", 2, 3, Box{0.96, 0.1, 0.04, 0.3}, 0.005),
        make_annotation("vid_b", "climb_ladder", 5, 2, Box{0.5, 0.5, 0.6, 0.9}, 0.0),
    };
    const std::string text = export_csv(set);
    CHECK(import_csv(text) == set);
    CHECK(export_csv(import_csv(text)) == text);
    CHECK(text.find(",1\n") != std::string::npos);
}

TEST_CASE("malformed CSV rows are rejected with line and column") {
    const std::string header = std::string(kAnnotationCsvHeader) + "\n";
    const std::string good = "v,a,0,0.000000,0.100000,0.100000,0.200000,0.200000,0\n";
    auto reject = [](const std::string& text, const std::string& expect) {
        try {
            import_csv(text);
            FAIL("accepted malformed csv");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(expect) != std::string::npos);
        }
    };
    reject(header + good + "v,a,1,1.000000,0.300000,0.100000,0.200000,0.200000,0\n", "line 3");
    reject(header + good + "v,a,1,1.000000,0.300000,0.100000,0.200000,0.200000,0\n", "column");
    reject(header + "v,a,x,0.0,0.1,0.1,0.2,0.2,0\n", "line 2");
    reject(header + "v,a,0,0.0,0.1,0.1,0.2\n", "expected 9 fields");
    reject("video,action\n", "header");
}

TEST_CASE("validate_annotations") {
    std::set<std::string> vocab{"climb_ladder", "break_door"};
    std::vector<RoiAnnotation> clean{make_annotation("v", "climb_ladder", 0, 3, Box{0.1, 0.1, 0.2, 0.2}, 0.01)};
    CHECK(validate_annotations(clean, vocab).empty());

    auto regress = clean;
    regress[0].frames[2].t_seconds = 0.1;
    auto issues = validate_annotations(regress, vocab);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].find("timestamp") != std::string::npos);

    auto unknown = clean;
    unknown[0].action = "juggle";
    issues = validate_annotations(unknown, vocab);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].find("unknown label") != std::string::npos);

    auto bad_box = clean;
    bad_box[0].frames[1].box.y2 = 1.5;
    CHECK(validate_annotations(bad_box, vocab).size() == 1);

    auto gap = clean;
    gap[0].frames[2].frame = 7;
    CHECK(validate_annotations(gap, vocab).size() == 1);
}

TEST_CASE("cohens kappa") {
    std::vector<std::string> a{"x", "y", "x", "z"};
    CHECK(cohens_kappa(a, a) == doctest::Approx(1.0));

    std::vector<std::string> r1, r2;
    auto add = [&](const char* p, const char* q, int n) {
        for (int i = 0; i < n; ++i) {
            r1.push_back(p);
            r2.push_back(q);
        }
    };
    add("yes", "yes", 20);
    add("no", "no", 20);
    add("yes", "no", 5);
    add("no", "yes", 5);
    CHECK(cohens_kappa(r1, r2) == doctest::Approx(0.6));
    CHECK(cohens_kappa(r2, r1) == doctest::Approx(cohens_kappa(r1, r2)));

    auto rename = [](std::vector<std::string> v) {
        for (auto& s : v) s = s == "yes" ? "positive" : "negative";
        return v;
    };
    CHECK(cohens_kappa(rename(r1), rename(r2)) == doctest::Approx(0.6));

    Rng rng(1);
    std::vector<std::string> ra, rb;
    const char* labels[3] = {"a", "b", "c"};
    for (int i = 0; i < 10000; ++i) {
        ra.push_back(labels[rng.index(3)]);
        rb.push_back(labels[rng.index(3)]);
    }
    CHECK(std::abs(cohens_kappa(ra, rb)) < 0.1);

    std::vector<std::string> same(5, "k");
    CHECK(cohens_kappa(same, same) == 1.0);
    std::vector<std::string> other(5, "j");
    CHECK(cohens_kappa(same, other) == 0.0);
    CHECK_THROWS_AS(cohens_kappa(a, {"x"}), ValidationError);
    CHECK_THROWS_AS(cohens_kappa({}, {}), ValidationError);
}
