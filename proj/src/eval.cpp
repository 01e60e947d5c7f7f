#include "act360/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "act360/error.hpp"
#include "act360/rng.hpp"

namespace act360 {

void EvalConfig::validate() const {
    auto in_open = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_open(iou_threshold) || !in_open(tube_iou_threshold)) {
        throw ValidationError("eval: IoU thresholds must lie in (0,1)");
    }
    if (train_ratio < 0.0 || val_ratio < 0.0 || test_ratio < 0.0) throw ValidationError("eval: negative split ratio");
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
        throw ValidationError("eval: split ratios must sum to 1");
    }
}

DatasetSplit split_dataset(const std::vector<std::string>& video_ids, const EvalConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (video_ids.size() < 3) throw ValidationError("split_dataset: need at least 3 videos");
    std::set<std::string> unique(video_ids.begin(), video_ids.end());
    if (unique.size() != video_ids.size()) throw ValidationError("split_dataset: duplicate video id");
    std::vector<std::string> ids(unique.begin(), unique.end());
    Rng rng = Rng(seed).split("split");
    rng.shuffle(ids);
    const double n = static_cast<double>(ids.size());
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_ratio * n));
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_ratio * n));
    if (n_val + n_test > ids.size()) throw ValidationError("split_dataset: ratios leave no room for training");
    DatasetSplit s;
    s.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val),
                  ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), ids.end());
    for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

double average_precision(const std::vector<ScoredMatch>& ranked, std::size_t num_gt) {
    if (num_gt == 0) throw ValidationError("average_precision: no ground truth");
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].true_positive) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    }
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

namespace {

std::size_t class_count(const EvalConfig& cfg, const std::vector<std::size_t>& labels) {
    std::size_t k = cfg.classes.size();
    for (auto l : labels) k = std::max(k, l + 1);
    return k;
}

ApReport finish(std::vector<std::optional<double>> per_class, std::vector<std::size_t> counts) {
    ApReport r;
    r.per_class = std::move(per_class);
    r.gt_counts = std::move(counts);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& ap : r.per_class) {
        if (ap) {
            sum += *ap;
            ++n;
        }
    }
    if (n) r.mean = sum / static_cast<double>(n);
    return r;
}

template <typename Pred, typename Gt, typename SameGroup, typename Iou>
std::vector<ScoredMatch> greedy_match(const std::vector<const Pred*>& ranked, const std::vector<const Gt*>& gts,
                                      double thr, SameGroup same_group, Iou iou) {
    std::vector<bool> used(gts.size(), false);
    std::vector<ScoredMatch> out;
    out.reserve(ranked.size());
    for (const auto* p : ranked) {
        double best = -1.0;
        std::size_t best_idx = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || !same_group(*p, *gts[g])) continue;
            const double v = iou(*p, *gts[g]);
            if (v >= thr && v > best) {
                best = v;
                best_idx = g;
            }
        }
        const bool tp = best_idx < gts.size();
        if (tp) used[best_idx] = true;
        out.push_back({0.0, tp});
    }
    return out;
}

}  // namespace

ApReport frame_map(const std::vector<Detection>& dets, const std::vector<Detection>& gt, const EvalConfig& cfg) {
    cfg.validate();
    std::vector<std::size_t> labels;
    for (const auto& d : dets) labels.push_back(d.label);
    for (const auto& g : gt) labels.push_back(g.label);
    const std::size_t k = class_count(cfg, labels);
    std::vector<std::optional<double>> per_class(k);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<const Detection*> ranked, gts;
        for (const auto& d : dets)
            if (d.label == c) ranked.push_back(&d);
        for (const auto& g : gt)
            if (g.label == c) gts.push_back(&g);
        counts[c] = gts.size();
        if (gts.empty()) continue;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const Detection* a, const Detection* b) { return a->confidence > b->confidence; });
        auto matches = greedy_match(
            ranked, gts, cfg.iou_threshold,
            [](const Detection& a, const Detection& b) { return a.video_id == b.video_id && a.frame == b.frame; },
            [](const Detection& a, const Detection& b) { return wrap_iou(a.box, b.box); });
        for (std::size_t i = 0; i < matches.size(); ++i) matches[i].confidence = ranked[i]->confidence;
        per_class[c] = average_precision(matches, gts.size());
    }
    return finish(std::move(per_class), std::move(counts));
}

double tube_iou(const ActionTube& a, const ActionTube& b) {
    std::map<std::size_t, const Box*> fa, fb;
    for (const auto& e : a.entries) fa[e.frame] = &e.box;
    for (const auto& e : b.entries) fb[e.frame] = &e.box;
    double inter = 0.0, uni = 0.0;
    for (const auto& [f, box] : fa) {
        auto it = fb.find(f);
        if (it == fb.end()) {
            uni += box->area();
        } else {
            const double i = wrap_intersection(*box, *it->second);
            inter += i;
            uni += box->area() + it->second->area() - i;
        }
    }
    for (const auto& [f, box] : fb)
        if (!fa.count(f)) uni += box->area();
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

ApReport video_map(const std::vector<ActionTube>& pred, const std::vector<ActionTube>& gt, const EvalConfig& cfg) {
    cfg.validate();
    std::vector<std::size_t> labels;
    for (const auto& t : pred) labels.push_back(t.label);
    for (const auto& t : gt) labels.push_back(t.label);
    const std::size_t k = class_count(cfg, labels);
    std::vector<std::optional<double>> per_class(k);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<const ActionTube*> ranked, gts;
        for (const auto& t : pred)
            if (t.label == c && !t.entries.empty()) ranked.push_back(&t);
        for (const auto& t : gt)
            if (t.label == c && !t.entries.empty()) gts.push_back(&t);
        counts[c] = gts.size();
        if (gts.empty()) continue;
        std::vector<double> conf;
        for (const auto* t : ranked) conf.push_back(t->mean_confidence());
        std::vector<std::size_t> order(ranked.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
        std::vector<const ActionTube*> sorted;
        for (auto i : order) sorted.push_back(ranked[i]);
        auto matches = greedy_match(
            sorted, gts, cfg.tube_iou_threshold,
            [](const ActionTube& a, const ActionTube& b) { return a.video_id == b.video_id; },
            [](const ActionTube& a, const ActionTube& b) { return tube_iou(a, b); });
        for (std::size_t i = 0; i < matches.size(); ++i) matches[i].confidence = conf[order[i]];
        per_class[c] = average_precision(matches, gts.size());
    }
    return finish(std::move(per_class), std::move(counts));
}

std::vector<ActionTube> gt_tubes(const std::vector<Detection>& gt) {
    using Key = std::pair<std::string, std::size_t>;
    std::map<Key, std::map<std::size_t, std::vector<const Detection*>>> grouped;
    for (const auto& g : gt) grouped[{g.video_id, g.label}][g.frame].push_back(&g);
    std::vector<ActionTube> out;
    for (const auto& [key, frames] : grouped) {
        // several objects of one label in a frame start parallel tubes
        std::vector<ActionTube> open;
        for (const auto& [f, boxes] : frames) {
            std::vector<ActionTube> next;
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                if (i < open.size() && open[i].entries.back().frame + 1 == f) {
                    open[i].entries.push_back({f, boxes[i]->box, 1.0});
                    next.push_back(std::move(open[i]));
                } else {
                    if (i < open.size()) out.push_back(std::move(open[i]));
                    next.push_back(ActionTube{key.first, key.second, {{f, boxes[i]->box, 1.0}}});
                }
            }
            for (std::size_t i = boxes.size(); i < open.size(); ++i) out.push_back(std::move(open[i]));
            open = std::move(next);
        }
        for (auto& t : open) out.push_back(std::move(t));
    }
    return out;
}

std::vector<VideoMeta> read_metadata(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open metadata " + path);
    std::vector<VideoMeta> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        VideoMeta m;
        if (!(ls >> m.video_id >> m.condition)) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 'id condition action...'");
        }
        std::string a;
        while (ls >> a) m.actions.push_back(a);
        out.push_back(std::move(m));
    }
    return out;
}

void write_metadata(const std::string& path, const std::vector<VideoMeta>& meta) {
    std::ofstream os(path);
    if (!os) throw RuntimeFailure("cannot write " + path);
    for (const auto& m : meta) {
        os << m.video_id << ' ' << m.condition;
        for (const auto& a : m.actions) os << ' ' << a;
        os << '\n';
    }
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

}  // namespace

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "group,name,videos,frame_ap,video_ap\n";
    for (const auto& r : rows)
        os << r.group << ',' << r.name << ',' << r.videos << ',' << fmt_opt(r.frame_ap) << ',' << fmt_opt(r.video_ap)
           << '\n';
    os << "overall,all,," << fmt_opt(frame_map) << ',' << fmt_opt(video_map) << '\n';
    return os.str();
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    auto show = [](const std::optional<double>& v) { return v ? fmt_opt(v) : std::string("n/a"); };
    os << std::left << std::setw(11) << "group" << std::setw(18) << "name" << std::setw(8) << "videos"
       << std::setw(10) << "frame_ap" << "video_ap\n";
    for (const auto& r : rows)
        os << std::setw(11) << r.group << std::setw(18) << r.name << std::setw(8) << r.videos << std::setw(10)
           << show(r.frame_ap) << show(r.video_ap) << '\n';
    os << "frame mAP " << show(frame_map) << ", video mAP " << show(video_map) << '\n';
    return os.str();
}

EvalReport build_report(const std::vector<Detection>& dets, const std::vector<Detection>& gt,
                        const std::vector<VideoMeta>& meta, const EvalConfig& cfg, const PostprocessSettings& linking) {
    cfg.validate();
    auto tubes_of = [&](const std::vector<Detection>& d) {
        auto tubes = link_tubes_by_label(d, linking.link_iou);
        return tubes;
    };
    EvalReport rep;
    const auto fm = frame_map(dets, gt, cfg);
    const auto gtt = gt_tubes(gt);
    const auto vm = video_map(tubes_of(dets), gtt, cfg);
    rep.frame_map = fm.mean;
    rep.video_map = vm.mean;

    std::map<std::string, std::size_t> videos_per_label;
    for (const auto& m : meta)
        for (const auto& a : m.actions) ++videos_per_label[a];
    for (std::size_t c = 0; c < fm.per_class.size(); ++c) {
        ReportRow r;
        r.group = "action";
        r.name = c < cfg.classes.size() ? cfg.classes[c] : "class" + std::to_string(c);
        r.frame_ap = fm.per_class[c];
        r.video_ap = c < vm.per_class.size() ? vm.per_class[c] : std::nullopt;
        r.videos = videos_per_label.count(r.name) ? videos_per_label[r.name] : 0;
        if (!r.frame_ap && fm.gt_counts[c] == 0 && r.videos == 0) continue;
        rep.rows.push_back(std::move(r));
    }

    std::map<std::string, std::set<std::string>> by_condition;
    for (const auto& m : meta) by_condition[m.condition].insert(m.video_id);
    for (const auto& [cond, ids] : by_condition) {
        if (ids.empty()) continue;
        std::vector<Detection> d, g;
        for (const auto& x : dets)
            if (ids.count(x.video_id)) d.push_back(x);
        for (const auto& x : gt)
            if (ids.count(x.video_id)) g.push_back(x);
        ReportRow r;
        r.group = "condition";
        r.name = cond;
        r.videos = ids.size();
        r.frame_ap = frame_map(d, g, cfg).mean;
        r.video_ap = video_map(tubes_of(d), gt_tubes(g), cfg).mean;
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

}  // namespace act360
