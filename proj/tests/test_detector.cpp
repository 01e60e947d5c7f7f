#include <cmath>
#include <filesystem>

#include "act360/detector.hpp"
#include "act360/error.hpp"
#include "act360/kernels.hpp"
#include "act360/synthetic.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace act360;
using act360::testing::random_tensor;

namespace {

DetectorConfig tiny_config() {
    DetectorConfig c;
    c.clip_len = 2;
    c.height = 8;
    c.width = 16;
    c.in_channels = 2;
    c.num_classes = 2;
    c.spatial_channels1 = 3;
    c.spatial_channels2 = 4;
    c.motion_channels1 = 3;
    c.motion_channels2 = 4;
    c.fusion_channels = 4;
    return c;
}

DetectorConfig small_config() {
    DetectorConfig c;
    c.clip_len = 3;
    c.height = 16;
    c.width = 32;
    c.batch_size = 1;
    return c;
}

Sample one_target_sample(const DetectorConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    Sample s;
    s.video_id = "toy";
    s.frame = c.clip_len - 1;
    s.clip = random_tensor({c.clip_len, c.in_channels, c.height, c.width}, rng, 0.0, 0.2);
    for (std::size_t t = 0; t < c.clip_len; ++t)
        for (std::size_t ch = 0; ch < c.in_channels; ++ch)
            for (std::size_t y = c.height * 5 / 16; y < c.height * 10 / 16; ++y)
                for (std::size_t x = c.width * 10 / 32 + t; x < c.width / 2 + t; ++x) s.clip.at({t, ch, y, x}) = 0.9f;
    s.objects.push_back({Box{10.0 / 32, 5.0 / 16, 0.5, 10.0 / 16}, 1});
    return s;
}

Tensor shift_columns(const Tensor& clip, std::size_t s) {
    Tensor out(clip.shape());
    const std::size_t t = clip.dim(0), c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    for (std::size_t a = 0; a < t; ++a)
        for (std::size_t b = 0; b < c; ++b)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) out.at({a, b, y, (x + s) % w}) = clip.at({a, b, y, x});
    return out;
}

}  // namespace

TEST_CASE("forward output shape and zero clip") {
    DetectorConfig c;
    c.num_classes = 2;
    Model m = init_model(c, 1);
    CHECK(m.parameter_count() <= 50000);
    Tensor zero({8, 3, 32, 64});
    Tensor out = forward(zero, m);
    CHECK(out.shape() == Shape{7, 8, 16});
    for (std::size_t i = 0; i < 8 * 16; ++i) CHECK(kernels::sigmoid(out[4 * 128 + i]) == doctest::Approx(0.5));

    Rng rng(2);
    Tensor clip = random_tensor({8, 3, 32, 64}, rng, 0.0, 1.0);
    Tensor a = forward(clip, m), b = forward(clip, init_model(c, 1));
    CHECK(a == b);
    CHECK(infer_raw(clip, m) == a);
    CHECK_THROWS_AS(forward(Tensor({8, 3, 32, 32}), m), ValidationError);

    DetectorConfig bad = c;
    bad.clip_len = 1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.num_classes = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("loss closed forms") {
    DetectorConfig c;
    Tape<double> tape;
    auto pred = tape.constant(TensorD({7, 8, 16}, 0.0));
    const double loss = detection_loss(pred, {}, 2).value()[0];
    CHECK(std::abs(loss - 128 * std::log(2.0)) < 1e-6);

    // Saturated perfect prediction of a single target.
    CellTarget t{3, 5, 0.5, 0.5, 0.1, -0.2, 1};
    TensorD p({7, 8, 16}, 0.0);
    for (std::size_t i = 0; i < 128; ++i) p[4 * 128 + i] = -30.0;
    const std::size_t cell = 3 * 16 + 5;
    p[4 * 128 + cell] = 30.0;
    p[2 * 128 + cell] = 0.1;
    p[3 * 128 + cell] = -0.2;
    p[5 * 128 + cell] = -30.0;
    p[6 * 128 + cell] = 30.0;
    Tape<double> t2;
    CHECK(detection_loss(t2.constant(p), {t}, 2).value()[0] < 1e-3);
    CHECK(detection_loss(t2.constant(p), {t}, 2).value()[0] >= 0.0);
}

TEST_CASE("loss gradient with respect to head weights") {
    DetectorConfig c = tiny_config();
    Model m = init_model(c, 4);
    Sample s = one_target_sample(c, 4);
    s.objects[0].box = Box{0.3, 0.2, 0.6, 0.7};
    const auto targets = build_targets(s.objects, c);
    REQUIRE(targets.size() == 1);
    auto params = m.params_as<double>();
    const TensorD clip = s.clip.cast<double>();

    Tape<double> tape;
    auto grads = tape.backward(detection_loss(build_forward(tape, c, params, clip), targets, c.num_classes));
    double worst = 0.0;
    std::size_t checked = 0;
    for (const auto& [name, value] : params) {
        if (name.rfind("head", 0) != 0) continue;
        ++checked;
        auto f = [&, name = name](const TensorD& probe) {
            auto p2 = params;
            p2[name] = probe;
            Tape<double> t2;
            return detection_loss(build_forward(t2, c, p2, clip), targets, c.num_classes).value()[0];
        };
        worst = std::max(worst, gradient_relative_error(grads.at(name), finite_diff_grad(f, value, 1e-5)));
    }
    CHECK(checked > 0);
    CHECK(worst < 1e-4);
}

TEST_CASE("end-to-end gradient check on the toy model") {
    for (bool eac : {true, false}) {
        DetectorConfig c = tiny_config();
        c.use_eac = eac;
        Model m = init_model(c, 9);
        Sample s = one_target_sample(c, 9);
        s.objects[0].box = Box{0.3, 0.2, 0.6, 0.7};
        const auto targets = build_targets(s.objects, c);
        CAPTURE(eac);
        CHECK(act360::testing::detector_grad_error(c, m, s.clip.cast<double>(), targets) < 1e-3);
    }
}

TEST_CASE("training: overfit, determinism, zero learning rate") {
    DetectorConfig c = small_config();
    c.learning_rate = 3e-3;
    c.epochs = 200;
    Sample s = one_target_sample(c, 1);
    TrainOptions opt;
    opt.max_steps = 200;
    auto ck = train({s}, {}, c, opt);
    REQUIRE(ck.step_loss.size() == 200);
    CHECK(ck.step_loss.back() <= 0.1 * ck.step_loss.front());

    c.epochs = 5;
    auto a = train({s, one_target_sample(c, 2)}, {}, c);
    auto b = train({s, one_target_sample(c, 2)}, {}, c);
    CHECK(a.train_loss.back() == b.train_loss.back());
    CHECK(a.model == b.model);

    c.learning_rate = 0.0;
    auto z = train({s}, {}, c);
    CHECK(z.model.params == init_model(c, c.seed).params);
}

TEST_CASE("inference threshold and latency contract") {
    DetectorConfig c = small_config();
    Model m = init_model(c, 3);
    std::vector<Sample> clips;
    for (int i = 0; i < 4; ++i) {
        Sample s = one_target_sample(c, 10 + i);
        s.frame = c.clip_len - 1 + i;
        clips.push_back(s);
    }
    PostprocessSettings ps;
    ps.confidence_threshold = 0.99;
    auto res = infer(clips, m, ps);
    for (const auto& d : res.detections) CHECK(d.confidence >= 0.99);
    REQUIRE(res.latency.per_frame_ms.size() == 4);
    CHECK(res.latency.mean_ms() > 0.0);
    CHECK(res.latency.median_ms() > 0.0);
    CHECK(res.latency.p95_ms() > 0.0);
    CHECK(res.latency.p95_ms() >= res.latency.median_ms());
}

TEST_CASE("checkpoint save, load, infer is bit-identical") {
    DetectorConfig c = small_config();
    c.epochs = 2;
    Sample s = one_target_sample(c, 5);
    auto ck = train({s}, {s}, c);
    auto path = std::filesystem::temp_directory_path() / "act360_ckpt_test.bin";
    save_checkpoint(path, ck);
    auto back = load_checkpoint(path);
    CHECK(back == ck);
    CHECK(infer_raw(s.clip, back.model) == infer_raw(s.clip, ck.model));
    std::filesystem::remove(path);
}

TEST_CASE("trained detector finds a planted target and is wrap consistent") {
    SyntheticConfig sc;
    sc.videos = 14;
    sc.frames = 8;
    sc.height = 32;
    sc.classes = {"climb_ladder"};
    sc.second_blob_fraction = 0.0;
    sc.blob_radius = 0.4;
    Dataset data = gen_synthetic(sc, 0);
    DetectorConfig c;
    c.clip_len = 3;
    c.num_classes = 1;
    c.learning_rate = 2e-3;
    c.epochs = 20;
    auto ids = data.video_ids();
    std::vector<std::string> train_ids(ids.begin(), ids.end() - 3), test_ids(ids.end() - 3, ids.end());
    auto train_clips = make_clips(data, c.clip_len, train_ids);
    auto test_clips = make_clips(data, c.clip_len, test_ids);
    auto ck = train(train_clips, {}, c);

    PostprocessSettings ps;
    ps.smooth = false;
    std::size_t hits = 0, total = 0;
    for (const auto& s : test_clips) {
        if (s.objects.size() != 1) continue;
        auto res = infer({s}, ck.model, ps);
        ++total;
        if (res.detections.empty()) continue;
        auto best = *std::max_element(res.detections.begin(), res.detections.end(),
                                      [](const Detection& a, const Detection& b) { return a.confidence < b.confidence; });
        if (wrap_iou(best.box, s.objects[0].box) >= 0.5) ++hits;
    }
    REQUIRE(total > 0);
    MESSAGE("planted-target hits " << hits << "/" << total);
    CHECK(double(hits) >= 0.5 * double(total));

    // Circular shift of the input moves the top decoded box by s/W, within a cell.
    std::size_t consistent = 0, checked = 0;
    for (const auto& s : test_clips) {
        auto top = [&](const Tensor& clip) {
            auto dets = decode_predictions(infer_raw(clip, ck.model), c, s.video_id, s.frame);
            return *std::max_element(dets.begin(), dets.end(),
                                     [](const Detection& a, const Detection& b) { return a.confidence < b.confidence; });
        };
        const Detection base = top(s.clip);
        for (std::size_t shift : {4u, 12u, 20u}) {
            const Detection moved = top(shift_columns(s.clip, shift));
            const double expect = wrap_unit(base.box.center_x() + double(shift) / c.width);
            ++checked;
            if (std::abs(circular_delta(moved.box.center_x(), expect)) <= 1.0 / c.grid_w() + 1e-9) ++consistent;
        }
    }
    MESSAGE("wrap-consistent top boxes " << consistent << "/" << checked);
    CHECK(consistent == checked);
}
