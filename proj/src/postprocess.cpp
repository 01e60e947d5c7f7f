#include "act360/postprocess.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <tuple>

#include "act360/error.hpp"

namespace act360 {

double ActionTube::mean_confidence() const {
    if (entries.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : entries) s += e.confidence;
    return s / static_cast<double>(entries.size());
}

std::vector<Detection> confidence_filter(const std::vector<Detection>& dets, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("confidence_filter: tau must lie in [0,1]");
    std::vector<Detection> out;
    std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
                 [tau](const Detection& d) { return d.confidence >= tau; });
    return out;
}

bool nms_precedes(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    return a.box.y1 < b.box.y1;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr) {
    if (!(iou_thr > 0.0 && iou_thr < 1.0)) throw ValidationError("nms: iou threshold must lie in (0,1)");
    using Key = std::tuple<std::string, std::size_t, std::size_t>;
    std::map<Key, std::vector<Detection>> groups;
    std::vector<Key> order;
    for (const auto& d : dets) {
        Key key{d.video_id, d.frame, d.label};
        auto [it, inserted] = groups.try_emplace(key);
        if (inserted) order.push_back(key);
        it->second.push_back(d);
    }
    std::vector<Detection> out;
    for (const auto& key : order) {
        auto& group = groups[key];
        std::stable_sort(group.begin(), group.end(), nms_precedes);
        std::vector<Detection> kept;
        for (const auto& cand : group) {
            bool suppressed = false;
            for (const auto& k : kept) {
                if (wrap_iou(k.box, cand.box) > iou_thr) {
                    suppressed = true;
                    break;
                }
            }
            if (!suppressed) kept.push_back(cand);
        }
        out.insert(out.end(), kept.begin(), kept.end());
    }
    return out;
}

std::vector<ActionTube> link_tubes(const std::vector<std::vector<Detection>>& per_frame, double link_iou) {
    std::vector<ActionTube> tubes;
    for (const auto& frame_dets : per_frame) {
        if (frame_dets.empty()) continue;
        const std::size_t frame = frame_dets.front().frame;
        struct Pair {
            double iou;
            std::size_t tube;
            std::size_t det;
        };
        std::vector<Pair> pairs;
        for (std::size_t t = 0; t < tubes.size(); ++t) {
            const auto& last = tubes[t].entries.back();
            if (last.frame + 1 != frame) continue;
            for (std::size_t d = 0; d < frame_dets.size(); ++d) {
                if (frame_dets[d].label != tubes[t].label) continue;
                const double iou = wrap_iou(last.box, frame_dets[d].box);
                if (iou >= link_iou) pairs.push_back({iou, t, d});
            }
        }
        std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
            if (a.iou != b.iou) return a.iou > b.iou;
            if (a.tube != b.tube) return a.tube < b.tube;
            return a.det < b.det;
        });
        std::vector<bool> tube_used(tubes.size(), false), det_used(frame_dets.size(), false);
        for (const auto& p : pairs) {
            if (tube_used[p.tube] || det_used[p.det]) continue;
            tube_used[p.tube] = det_used[p.det] = true;
            const auto& d = frame_dets[p.det];
            tubes[p.tube].entries.push_back({d.frame, d.box, d.confidence});
        }
        for (std::size_t d = 0; d < frame_dets.size(); ++d) {
            if (det_used[d]) continue;
            const auto& det = frame_dets[d];
            tubes.push_back(ActionTube{det.video_id, det.label, {{det.frame, det.box, det.confidence}}});
        }
    }
    return tubes;
}

std::vector<ActionTube> link_tubes_by_label(const std::vector<Detection>& dets, double link_iou) {
    using Key = std::pair<std::string, std::size_t>;
    std::map<Key, std::map<std::size_t, std::vector<Detection>>> grouped;
    for (const auto& d : dets) grouped[{d.video_id, d.label}][d.frame].push_back(d);
    std::vector<ActionTube> out;
    for (auto& [key, frames] : grouped) {
        std::vector<std::vector<Detection>> per_frame;
        for (auto& [f, v] : frames) per_frame.push_back(std::move(v));
        auto tubes = link_tubes(per_frame, link_iou);
        out.insert(out.end(), std::make_move_iterator(tubes.begin()), std::make_move_iterator(tubes.end()));
    }
    return out;
}

namespace {

// Mean of values[lo..hi] written as center + mean of offsets, so equal inputs
// give back the exact input.
template <typename F>
double centered_mean(std::size_t lo, std::size_t hi, F offset_of) {
    double acc = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) acc += offset_of(j);
    return acc / static_cast<double>(hi - lo + 1);
}

}  // namespace

ActionTube temporal_smooth(const ActionTube& tube, std::size_t window) {
    if (window < 1) throw ValidationError("temporal_smooth: window must be >= 1");
    const std::size_t half = window / 2;
    const auto& e = tube.entries;
    ActionTube out = tube;
    for (std::size_t i = 0; i < e.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(e.size() - 1, i + half);
        auto& o = out.entries[i];
        o.confidence = e[i].confidence +
                       centered_mean(lo, hi, [&](std::size_t j) { return e[j].confidence - e[i].confidence; });
        const double x1 = e[i].box.x1 + centered_mean(lo, hi, [&](std::size_t j) {
                              return circular_delta(e[j].box.x1, e[i].box.x1);
                          });
        const double x2 = e[i].box.x2 + centered_mean(lo, hi, [&](std::size_t j) {
                              return circular_delta(e[j].box.x2, e[i].box.x2);
                          });
        o.box.x1 = wrap_unit(x1);
        o.box.x2 = x2 == 1.0 ? 1.0 : wrap_unit(x2);
        o.box.y1 = e[i].box.y1 + centered_mean(lo, hi, [&](std::size_t j) { return e[j].box.y1 - e[i].box.y1; });
        o.box.y2 = e[i].box.y2 + centered_mean(lo, hi, [&](std::size_t j) { return e[j].box.y2 - e[i].box.y2; });
    }
    return out;
}

std::vector<Detection> tubes_to_detections(const std::vector<ActionTube>& tubes) {
    std::vector<Detection> out;
    for (const auto& t : tubes)
        for (const auto& e : t.entries) out.push_back(Detection{t.video_id, e.frame, e.box, t.label, e.confidence});
    std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
        if (a.video_id != b.video_id) return a.video_id < b.video_id;
        if (a.frame != b.frame) return a.frame < b.frame;
        if (a.label != b.label) return a.label < b.label;
        return nms_precedes(a, b);
    });
    return out;
}

std::vector<Detection> run_postprocess(const std::vector<Detection>& dets, const PostprocessSettings& s) {
    std::vector<Detection> cur = dets;
    if (s.threshold) cur = confidence_filter(cur, s.confidence_threshold);
    if (s.suppress) cur = nms(cur, s.nms_iou);
    if (s.smooth) {
        auto tubes = link_tubes_by_label(cur, s.link_iou);
        for (auto& t : tubes) t = temporal_smooth(t, s.smooth_window);
        cur = tubes_to_detections(tubes);
    }
    return cur;
}

}  // namespace act360
