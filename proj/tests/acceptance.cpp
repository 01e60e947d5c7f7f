// One PASS/FAIL line per acceptance criterion. Arguments, when given, select
// criteria by name. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "act360/annotate.hpp"
#include "act360/attention.hpp"
#include "act360/debrief.hpp"
#include "act360/eac.hpp"
#include "act360/pipeline.hpp"
#include "act360/serialize.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace act360;
using namespace act360::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

std::string num(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

Outcome eac_fidelity() {
    Outcome o;
    double worst = 0.0;
    ErpGrid grid(16);
    const auto table = cos_lat_table(grid);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Tensor in = random_tensor({3, 16, 32}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tensor out = eac_conv2d(in, EacKernelBank(w, std::vector<float>(4, 0.0f), grid));
        Tensor ref = conv2d_reference(in, w, PaddingRule::WrapClamp);
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    worst = std::max(worst, std::abs(double(out.at({c, y, x})) - table[y] * ref.at({c, y, x})));
    }
    // Odd height: the middle pixel row lies on the equator.
    ErpGrid odd(33);
    const std::size_t eq = 16;
    Rng rng(9);
    Tensor in = random_tensor({3, 33, 66}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor out = eac_conv2d(in, EacKernelBank(w, std::vector<float>(4, 0.0f), odd));
    Tensor ref = conv2d_reference(in, w, PaddingRule::WrapClamp);
    double equator = 0.0;
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t x = 0; x < 66; ++x)
            equator = std::max(equator, std::abs(double(out.at({c, eq, x})) - double(ref.at({c, eq, x}))));
    o.detail << "max |eac - cos*ref| " << num(worst) << " over 5 seeds (3x16x32); equator row diff " << num(equator)
             << " (H=33, cos=" << cos_lat_table(odd)[eq] << ")";
    o.require(worst < 1e-5, "cos-scaled diff < 1e-5");
    o.require(equator < 1e-6, "equator diff < 1e-6");
    return o;
}

Outcome attention_fidelity() {
    Outcome o;
    const double pi = std::numbers::pi;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(200 + seed);
        const std::size_t c = 2 + seed % 3, h = 8, w = 16;
        const double cap = 2.0 + double(seed);
        Tensor ft = random_tensor({c, h, w}, rng), fp = random_tensor({c, h, w}, rng);
        AttentionParams p;
        p.weight = random_tensor({1, 2 * c, 1, 1}, rng);
        p.bias = float(rng.uniform(-0.5, 0.5));
        p.erp_cap = cap;
        ErpGrid grid(h);
        Tensor out = apply_attention(ft, fp, grid, p);
        for (std::size_t y = 0; y < h; ++y) {
            const double lat = pi * ((double(y) + 0.5) / double(h) - 0.5);
            const double map = std::min(1.0 / std::cos(lat), cap);
            for (std::size_t x = 0; x < w; ++x) {
                double pre = p.bias;
                for (std::size_t k = 0; k < c; ++k)
                    pre += double(p.weight[k]) * ft.at({k, y, x}) + double(p.weight[c + k]) * fp.at({k, y, x});
                const double gate = 1.0 / (1.0 + std::exp(-pre));
                for (std::size_t k = 0; k < c; ++k)
                    worst = std::max(worst, std::abs(double(out.at({k, y, x})) - gate * map * ft.at({k, y, x})));
            }
        }
    }
    const double at_60 = erp_attention_at_latitude(pi / 3, 8.0);
    Tensor pole_map = erp_attention_map(ErpGrid(512), 10.0);
    float peak = 0.0f;
    for (float v : pole_map.values()) peak = std::max(peak, v);
    o.detail << "max |apply - gate*map*F| " << num(worst) << " over 5 cases; A(pi/3) = " << num(at_60, 17)
             << " (float " << float(at_60) << "); H=512 cap 10 peak " << peak;
    o.require(worst < 1e-6, "composition diff < 1e-6");
    o.require(std::abs(at_60 - 2.0) <= 2.0 * std::numeric_limits<double>::epsilon() && float(at_60) == 2.0f,
              "A(pi/3) = 2");
    o.require(peak == 10.0f && pole_map[0] == 10.0f, "cap at poles");
    return o;
}

Outcome gradient_suite() {
    Outcome o;
    double ops = 0.0;
    std::size_t count = 0;
    std::string worst_op;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(100 + seed);
        for (const auto& c : op_gradient_cases(rng)) {
            const double e = worst_grad_error(c.inputs, c.build);
            ++count;
            if (e >= ops) {
                ops = e;
                worst_op = c.name;
            }
        }
    }
    Rng rng(3);
    const auto toy = toy_net_case(rng);
    const double toy_err = worst_grad_error(toy.inputs, toy.build, 1e-3);

    double detector = 0.0;
    for (bool eac : {true, false}) {
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
        c.use_eac = eac;
        Model m = init_model(c, 9);
        Rng r(9);
        TensorD clip = random_tensor<double>({2, 2, 8, 16}, r, 0.0, 1.0);
        const auto targets = build_targets({{Box{0.3, 0.2, 0.6, 0.7}, 1}}, c);
        detector = std::max(detector, detector_grad_error(c, m, clip, targets));
    }
    o.detail << count << " op checks, worst " << num(ops) << " (" << worst_op << "); toy net " << num(toy_err)
             << "; detector end-to-end " << num(detector);
    o.require(ops < 1e-4, "per-op < 1e-4");
    o.require(toy_err < 1e-4, "toy net < 1e-4");
    o.require(detector < 1e-3, "end-to-end < 1e-3");
    return o;
}

Outcome quantization() {
    Outcome o;
    std::size_t total = 0, within = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Model m = init_model(DetectorConfig{}, seed);
        for (const auto& [name, t] : m.params) {
            if (t.rank() < 2) continue;
            auto cq = quantize_per_channel(t);
            const std::size_t per = t.size() / t.dim(0);
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double s = cq.scales[i / per];
                ++total;
                if (std::abs(double(t[i]) - s * cq.q.data[i]) <= s / 2 + 1e-7) ++within;
            }
        }
    }
    Rng rng(4);
    Tensor toy = random_tensor({16, 16, 3, 3}, rng);
    const double ratio = double(int8_weight_payload(quantize_per_channel(toy))) / double(fp32_weight_payload(toy));

    Model m = init_model(DetectorConfig{}, 0);
    OptimizationPolicy policy;
    std::size_t q_bytes = 0, f_bytes = 0;
    for (const auto& spec : layer_specs(m.config)) {
        if (!policy.quantizes(spec)) continue;
        const Tensor& w = m.param(spec.name + ".weight");
        q_bytes += int8_weight_payload(quantize_per_channel(w));
        f_bytes += fp32_weight_payload(w);
    }
    o.detail << within << "/" << total << " weights within s/2; toy [16,16,3,3] payload ratio " << num(ratio, 4)
             << "; default detector quantized layers overall " << num(double(q_bytes) / double(f_bytes), 4);
    o.require(within == total, "every weight within s/2 + 1e-7");
    o.require(ratio <= 0.26, "toy layer payload ratio <= 0.26");
    return o;
}

Outcome pruning() {
    Outcome o;
    DetectorConfig c;
    Model m = init_model(c, 8);
    OptimizationPolicy policy;
    const auto order = removal_order(m, policy);
    auto mask = initial_mask(m, policy);
    const std::size_t total = mask.total();
    std::size_t u = total, count_ok = 0, set_ok = 0;
    for (std::size_t n = 1; n <= 20; ++n) {
        mask = prune_step(m, mask, 0.02, policy);
        u -= (2 * u + 99) / 100;
        if (mask.unmasked() == u) ++count_ok;
        bool same = true;
        for (std::size_t k = 0; k < total; ++k)
            same &= (mask.masks.at(order[k].name)[order[k].index] == 0) == (k < total - u);
        if (same) ++set_ok;
    }
    bool eac_in_mask = false;
    for (const auto& [name, bits] : mask.masks)
        eac_in_mask |= name.rfind("spatial", 0) == 0 || name.rfind("attention", 0) == 0;

    auto pruned = prune_iterative(m, 20, 0.02, {}, policy);
    const bool eac_exact = pruned.model.param("spatial1.weight") == m.param("spatial1.weight") &&
                           pruned.model.param("spatial2.weight") == m.param("spatial2.weight");
    const bool attention_exact = pruned.model.param("attention.weight") == m.param("attention.weight") &&
                                 pruned.model.param("attention.bias") == m.param("attention.bias");
    Rng rng(1);
    std::vector<Tensor> calib;
    for (int i = 0; i < 4; ++i) calib.push_back(random_tensor({c.clip_len, c.in_channels, c.height, c.width}, rng, 0.0, 1.0));
    auto qm = quantize(pruned.model, policy, calibrate(pruned.model, calib, policy));
    const auto& att = qm.layer("attention");
    const bool att_float = !att.quantized && att.float_weight == m.param("attention.weight") &&
                           qm.layer("spatial1").quantized && qm.layer("spatial1").category == LayerCategory::Eac;

    o.detail << "count recurrence " << count_ok << "/20, masked set = sort oracle " << set_ok << "/20 (" << total
             << " prunable, " << u << " left); EAC/attention never masked " << (eac_in_mask ? "no" : "yes")
             << "; EAC bit-exact after 20 steps " << (eac_exact ? "yes" : "no") << "; attention float bit-exact "
             << (attention_exact && att_float ? "yes" : "no");
    o.require(count_ok == 20 && set_ok == 20, "recurrence and oracle");
    o.require(!eac_in_mask && eac_exact, "EAC never pruned");
    o.require(attention_exact && att_float, "attention never quantized or pruned");
    return o;
}

Outcome postprocessing() {
    Outcome o;
    std::size_t agree = 0, unique = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto dets = random_nms_instance(seed);
        int solutions = 0;
        if (nms(dets, 0.4) == exhaustive_nms(dets, 0.4, &solutions)) ++agree;
        if (solutions == 1) ++unique;
    }
    Rng rng(17);
    double asym = 0.0, shift = 0.0, oracle = 0.0;
    for (int i = 0; i < 500; ++i) {
        Box a = random_nms_box(rng), b = random_nms_box(rng);
        asym = std::max(asym, std::abs(wrap_iou(a, b) - wrap_iou(b, a)));
        oracle = std::max(oracle, std::abs(wrap_iou(a, b) - unrolled_iou(a, b)));
        const double s = rng.uniform();
        Box as = a, bs = b;
        as.x1 = wrap_unit(a.x1 + s);
        as.x2 = wrap_unit(a.x2 + s);
        bs.x1 = wrap_unit(b.x1 + s);
        bs.x2 = wrap_unit(b.x2 + s);
        if (as.x1 == as.x2 || bs.x1 == bs.x2) continue;
        shift = std::max(shift, std::abs(wrap_iou(as, bs) - wrap_iou(a, b)));
    }
    const double seam = wrap_iou(Box{30.0 / 32, 0.1, 2.0 / 32, 0.5}, Box{0.0, 0.1, 2.0 / 32, 0.5});
    o.detail << "nms = exhaustive oracle " << agree << "/20 (<= 10 boxes); wrap_iou asymmetry " << num(asym)
             << ", shift drift " << num(shift) << ", vs unrolled " << num(oracle) << "; seam fixture " << num(seam, 12);
    o.require(agree == 20 && unique == 20, "nms oracle");
    o.require(asym == 0.0 && shift < 1e-9, "symmetric and shift invariant");
    o.require(std::abs(seam - 0.5) < 1e-12, "seam fixture 0.5");
    return o;
}

Outcome metrics() {
    Outcome o;
    EvalConfig cfg;
    cfg.iou_threshold = 0.3;
    double worst = 0.0;
    std::size_t classes = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto inst = random_metric_instance(seed);
        const auto rep = frame_map(inst.dets, inst.gt, cfg);
        for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
            if (!rep.per_class[c]) continue;
            ++classes;
            worst = std::max(worst, std::abs(*rep.per_class[c] - reference_ap(inst.dets, inst.gt, c, cfg.iou_threshold)));
        }
    }
    EvalConfig fx;
    const Box g{0.1, 0.1, 0.3, 0.4}, miss{0.6, 0.1, 0.8, 0.4};
    const std::vector<Detection> gt{{"v", 0, g, 0, 1.0}};
    const double first = *frame_map({{"v", 0, g, 0, 0.9}, {"v", 0, miss, 0, 0.8}}, gt, fx).mean;
    const double second = *frame_map({{"v", 0, g, 0, 0.8}, {"v", 0, miss, 0, 0.9}}, gt, fx).mean;
    o.detail << "max |frame_map - brute force| " << num(worst) << " over 20 instances (" << classes
             << " class APs); ordering fixture " << first << " vs " << second;
    o.require(worst < 1e-9, "brute-force agreement");
    o.require(first == 1.0 && second == 0.5, "ordering fixture");
    return o;
}

Outcome end_to_end() {
    Outcome o;
    std::size_t wins = 0;
    double base_sum = 0.0, ntcqp_sum = 0.0;
    bool latency_ok = true, size_ok = true;
    std::ostringstream rows;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Settings s;
        s.seed = seed;
        s.synthetic.blob_radius = 0.4;
        s.synthetic.pole_fraction = 0.5;
        s.synthetic.seam_fraction = 0.25;
        s.detector.learning_rate = 2e-3;
        s.detector.epochs = 30;
        s.post.confidence_threshold = 0.1;
        const Dataset data = gen_synthetic(s.synthetic, seed);
        const SplitClips clips = split_clips(data, s);
        const auto gt = clip_ground_truth(clips.test);
        EvalConfig e = s.eval;
        e.classes = data.classes;
        PostprocessSettings raw = s.post;
        raw.threshold = raw.suppress = raw.smooth = false;

        double map[2] = {0.0, 0.0};
        Model full;
        for (int variant = 0; variant < 2; ++variant) {
            DetectorConfig c = detector_for(data, s);
            c.use_eac = c.use_attention = variant == 1;
            const auto ck = train_detector(clips, c);
            const auto pred = [&ck](const Tensor& x) { return infer_raw(x, ck.model); };
            map[variant] = frame_map(detect(clips.test, pred, c, raw), gt, e).mean.value_or(0.0);
            if (variant == 1) full = ck.model;
        }
        if (map[1] >= map[0]) ++wins;

        const BenchReport bench = run_bench(full, clips, s);
        const auto& base = bench.rows.front();
        const auto& last = bench.rows.back();
        const double loss = base.map.value_or(0.0) - last.map.value_or(0.0);
        const double faster = 1.0 - last.median_ms / base.median_ms;
        const double smaller = 1.0 - double(last.size_bytes) / double(base.size_bytes);
        base_sum += base.map.value_or(0.0);
        ntcqp_sum += last.map.value_or(0.0);
        latency_ok &= faster >= 0.10;
        size_ok &= smaller >= 0.60;
        rows << "\n    seed " << seed << ": " << clips.train.size() + clips.val.size() + clips.test.size()
             << " clips, plain " << num(map[0]) << " vs eac+attention " << num(map[1]) << "; NTCQP mAP "
             << num(last.map.value_or(0.0)) << " vs baseline " << num(base.map.value_or(0.0)) << " (loss "
             << num(loss) << "), median ms " << num(last.median_ms) << " vs " << num(base.median_ms) << " (-"
             << num(100 * faster) << "%), bytes " << last.size_bytes << " vs " << base.size_bytes << " (-"
             << num(100 * smaller) << "%)";
        std::fflush(stdout);
    }
    const double mean_loss = (base_sum - ntcqp_sum) / 5.0;
    o.detail << "eac+attention >= plain in " << wins << "/5 seeds; mean NTCQP mAP loss " << num(mean_loss)
             << rows.str();
    o.require(wins >= 4, "eac+attention wins >= 4/5");
    o.require(mean_loss <= 0.02, "mean NTCQP mAP loss <= 0.02");
    o.require(latency_ok, "median latency -10% every seed");
    o.require(size_ok, "size -60% every seed");
    return o;
}

Outcome annotation() {
    Outcome o;
    std::vector<RoiAnnotation> set;
    for (int k = 0; k < 3; ++k) {
        RoiAnnotation a{"vid_" + std::to_string(k % 2), k == 1 ? "break_door" : "climb_ladder", {}};
        for (std::size_t f = 0; f < 4; ++f) {
            const double x = std::round(std::fmod(0.9 + 0.05 * double(f) + 0.2 * k, 1.0) * 1e6) / 1e6;
            a.frames.push_back({f + 2 * k, double(f + 2 * k) * 0.5,
                                Box{x, 0.2, std::round(std::fmod(x + 0.15, 1.0) * 1e6) / 1e6, 0.6}});
        }
        set.push_back(a);
    }
    const std::string text = export_csv(set);
    const bool csv_ok = export_csv(import_csv(text)) == text && import_csv(text) == set;

    std::vector<Tensor> frames;
    std::vector<Box> truth;
    moving_target(frames, truth);
    const auto boxes = track_roi(frames, truth.front(), truth.back(), TrackMethod::Ncc);
    double worst = 1.0;
    for (std::size_t i = 0; i < truth.size(); ++i) worst = std::min(worst, wrap_iou(boxes[i], truth[i]));

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
    const double k_same = cohens_kappa(r1, r1), k_mixed = cohens_kappa(r1, r2);
    o.detail << "CSV round trip byte-identical " << (csv_ok ? "yes" : "no") << " (" << text.size()
             << " bytes); ncc min IoU " << num(worst) << " over " << truth.size() << " frames; kappa " << k_same
             << " and " << num(k_mixed, 15);
    o.require(csv_ok, "CSV round trip");
    o.require(worst >= 0.8, "ncc IoU >= 0.8");
    o.require(k_same == 1.0 && std::abs(k_mixed - 0.6) < 1e-9, "kappa fixtures");
    return o;
}

Outcome service_parity() {
    Outcome o;
    const auto root = fs::temp_directory_path() / "act360_acceptance_store";
    fs::remove_all(root);
    DetectionStore store;
    VideoRecord r;
    r.info = VideoInfo{"drill1", 1.0, 40.0, "smoke"};
    r.events = {{10, 10.0, "climb_ladder", 0.9, Box{0.1, 0.2, 0.3, 0.6}},
                {22, 22.0, "break_door", 0.8, Box{0.95, 0.2, 0.05, 0.6}},
                {30, 30.0, "carry_civilian", 0.85, Box{0.4, 0.3, 0.6, 0.7}}};
    store.put(r);
    store.save(root);
    Rng rng(3);
    const Tensor frame = random_tensor({3, 8, 16}, rng, 0.0, 1.0);
    fs::create_directories(root / "drill1" / "frames");
    {
        std::ofstream os(root / "drill1" / "frames" / "000010.t", std::ios::binary);
        write_tensor(os, frame);
    }
    DebriefService service(root);
    const int port = service.start("127.0.0.1", 0);
    httplib::Client cli("127.0.0.1", port);
    std::size_t same = 0, checked = 0;
    auto compare = [&](const httplib::Result& res, const std::string& expect) {
        ++checked;
        if (res && res->status == 200 && res->body == expect) ++same;
    };
    compare(cli.Get("/videos"), videos_json(store));
    compare(cli.Get("/videos/drill1/detections"), events_json(query(store, Query{"drill1"})));
    compare(cli.Get("/videos/drill1/detections?from=15&to=31"), events_json(query(store, Query{"drill1", 15, 31})));
    Query by_action{"drill1"};
    by_action.actions = std::set<std::string>{"break_door"};
    compare(cli.Get("/videos/drill1/detections?action=break_door"), events_json(query(store, by_action)));
    const auto timeline = summarize(query(store, Query{"drill1"}), SummaryStyle::Timeline);
    compare(cli.Post("/summarize", R"({"video":"drill1"})", "application/json"), summary_json(timeline));
    compare(cli.Post("/summarize", R"({"video":"drill1","from":15,"style":"brief"})", "application/json"),
            summary_json(summarize(query(store, Query{"drill1", 15}), SummaryStyle::Brief)));
    compare(cli.Get("/videos/drill1/frames/10"), frame_bmp(frame));
    auto missing = cli.Get("/videos/ghost/detections");
    const bool not_found = missing && missing->status == 404;
    service.stop();
    fs::remove_all(root);

    const bool phrasing = timeline.text.rfind("At 10 seconds, the firefighter climbed the ladder.", 0) == 0;
    o.detail << same << "/" << checked << " endpoint bodies byte-identical to in-process calls; unknown video -> "
             << (missing ? missing->status : 0) << "; summary: \"" << timeline.text << "\"";
    o.require(same == checked, "byte parity");
    o.require(not_found, "404 for unknown video");
    o.require(phrasing, "temporal phrasing");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        const char* name;
        std::function<Outcome()> run;
        double budget_s;  // 0 = no runtime bound
    };
    const std::vector<Criterion> criteria{
        {"eac_fidelity", eac_fidelity, 10.0},
        {"attention_fidelity", attention_fidelity, 0.0},
        {"gradient_suite", gradient_suite, 120.0},
        {"quantization", quantization, 0.0},
        {"pruning", pruning, 0.0},
        {"postprocessing", postprocessing, 0.0},
        {"metrics", metrics, 0.0},
        {"end_to_end_directional", end_to_end, 900.0},
        {"annotation", annotation, 0.0},
        {"service_parity", service_parity, 0.0},
    };
    int failures = 0;
    const std::vector<std::string> only(argv + 1, argv + argc);
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "threw: " << e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0.0 && secs >= c.budget_s) o.require(false, "runtime < " + num(c.budget_s) + " s");
        std::printf("%s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.str().c_str(), secs);
        std::fflush(stdout);
        if (!o.pass) ++failures;
    }
    return failures;
}
