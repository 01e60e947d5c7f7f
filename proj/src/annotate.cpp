#include "act360/annotate.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "act360/erp.hpp"
#include "act360/error.hpp"

namespace act360 {

TrackMethod track_method_from_name(const std::string& name) {
    if (name == "interp") return TrackMethod::Interp;
    if (name == "ncc") return TrackMethod::Ncc;
    throw ValidationError("unknown tracking method '" + name + "' (expected interp or ncc)");
}

namespace {

Box lerp_box(const Box& a, const Box& b, double s) {
    Box out;
    out.x1 = wrap_unit(a.x1 + s * circular_delta(b.x1, a.x1));
    const double x2 = a.x2 + s * circular_delta(b.x2, a.x2);
    out.x2 = wrap_unit(x2);
    if (out.x2 == 0.0 && x2 > 0.5) out.x2 = 1.0;
    out.y1 = a.y1 + s * (b.y1 - a.y1);
    out.y2 = a.y2 + s * (b.y2 - a.y2);
    return out;
}

std::vector<double> grayscale(const Tensor& frame) {
    if (frame.rank() != 3) throw ValidationError("track_roi: frames must be [C,H,W], got " + shape_str(frame.shape()));
    const std::size_t c = frame.dim(0), plane = frame.dim(1) * frame.dim(2);
    std::vector<double> g(plane, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) g[i] += frame[ch * plane + i];
    for (auto& v : g) v /= static_cast<double>(c);
    return g;
}

struct Patch {
    std::vector<double> values;  // zero mean
    double norm = 0.0;
};

Patch extract(const std::vector<double>& img, std::int64_t h, std::int64_t w, std::int64_t x0, std::int64_t y0,
              std::int64_t pw, std::int64_t ph) {
    Patch p;
    p.values.reserve(static_cast<std::size_t>(pw * ph));
    double mean = 0.0;
    for (std::int64_t y = 0; y < ph; ++y) {
        const std::int64_t yy = std::clamp<std::int64_t>(y0 + y, 0, h - 1);
        for (std::int64_t x = 0; x < pw; ++x) {
            const double v = img[static_cast<std::size_t>(yy * w + wrap_x(x0 + x, w))];
            p.values.push_back(v);
            mean += v;
        }
    }
    mean /= static_cast<double>(p.values.size());
    for (auto& v : p.values) {
        v -= mean;
        p.norm += v * v;
    }
    p.norm = std::sqrt(p.norm);
    return p;
}

double ncc(const Patch& a, const Patch& b) {
    if (a.norm <= 1e-12 || b.norm <= 1e-12) return -1.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
    return s / (a.norm * b.norm);
}

// Vertex offset of the parabola through three samples, in [-0.5, 0.5].
double parabolic_offset(double left, double mid, double right) {
    const double denom = left - 2.0 * mid + right;
    if (denom >= 0.0) return 0.0;
    return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

}  // namespace

std::vector<Box> track_roi(const std::vector<Tensor>& frames, const Box& roi_start, const Box& roi_end,
                           TrackMethod method, const TrackOptions& options) {
    if (frames.size() < 2) throw ValidationError("track_roi: need at least 2 frames");
    for (const Box* b : {&roi_start, &roi_end}) {
        if (!(b->area() > 0.0)) throw ValidationError("track_roi: manual box has zero area");
        b->validate();
    }
    const std::size_t n = frames.size();
    std::vector<Box> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = lerp_box(roi_start, roi_end, static_cast<double>(i) / (n - 1));
    out.front() = roi_start;
    out.back() = roi_end;
    if (method == TrackMethod::Interp || n == 2) return out;

    const auto h = static_cast<std::int64_t>(frames[0].dim(1));
    const auto w = static_cast<std::int64_t>(frames[0].dim(2));
    const double px1 = roi_start.x1 * static_cast<double>(w);
    const double py1 = roi_start.y1 * static_cast<double>(h);
    const std::int64_t pw = std::max<std::int64_t>(2, std::llround(roi_start.width() * static_cast<double>(w)));
    const std::int64_t ph = std::max<std::int64_t>(2, std::llround(roi_start.height() * static_cast<double>(h)));
    const std::int64_t col0 = std::llround(px1), row0 = std::llround(py1);
    const Patch templ = extract(grayscale(frames[0]), h, w, col0, row0, pw, ph);
    // offset from the integer template origin to the box center, in pixels
    const double center_dx = px1 - static_cast<double>(col0) + 0.5 * roi_start.width() * static_cast<double>(w);
    const double center_dy = py1 - static_cast<double>(row0) + 0.5 * roi_start.height() * static_cast<double>(h);

    double pos_x = static_cast<double>(col0), pos_y = static_cast<double>(row0);
    const int r = options.search_radius_px;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const auto img = grayscale(frames[i]);
        const std::int64_t bx = std::llround(pos_x), by = std::llround(pos_y);
        const std::size_t side = static_cast<std::size_t>(2 * r + 1);
        std::vector<double> scores(side * side, -1.0);
        double best = -2.0;
        int best_dx = 0, best_dy = 0;
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                const double s = ncc(templ, extract(img, h, w, bx + dx, by + dy, pw, ph));
                scores[static_cast<std::size_t>((dy + r) * static_cast<int>(side) + dx + r)] = s;
                if (s > best) {
                    best = s;
                    best_dx = dx;
                    best_dy = dy;
                }
            }
        }
        const double s_interp = static_cast<double>(i) / static_cast<double>(n - 1);
        if (best < options.min_correlation) {
            const Box& b = out[i];
            pos_x = b.x1 * static_cast<double>(w) - (px1 - static_cast<double>(col0));
            pos_y = b.y1 * static_cast<double>(h) - (py1 - static_cast<double>(row0));
            continue;
        }
        auto score_at = [&](int dx, int dy) {
            return scores[static_cast<std::size_t>((dy + r) * static_cast<int>(side) + dx + r)];
        };
        double sub_x = 0.0, sub_y = 0.0;
        if (best_dx > -r && best_dx < r)
            sub_x = parabolic_offset(score_at(best_dx - 1, best_dy), best, score_at(best_dx + 1, best_dy));
        if (best_dy > -r && best_dy < r)
            sub_y = parabolic_offset(score_at(best_dx, best_dy - 1), best, score_at(best_dx, best_dy + 1));
        pos_x = static_cast<double>(bx + best_dx) + sub_x;
        pos_y = static_cast<double>(by + best_dy) + sub_y;
        const double bw = roi_start.width() + s_interp * (roi_end.width() - roi_start.width());
        const double bh = roi_start.height() + s_interp * (roi_end.height() - roi_start.height());
        const double cx = (pos_x + center_dx) / static_cast<double>(w);
        const double cy = std::clamp((pos_y + center_dy) / static_cast<double>(h), 0.0, 1.0);
        out[i] = Box::from_center(wrap_unit(cx), cy, bw, bh);
    }
    return out;
}

RoiAnnotation annotate_range(const std::string& video_id, const std::string& action,
                             const std::vector<Tensor>& video_frames, std::size_t first, std::size_t last,
                             const Box& roi_start, const Box& roi_end, double fps, TrackMethod method,
                             const TrackOptions& options) {
    if (!(fps > 0.0)) throw ValidationError("annotate: fps must be positive");
    if (first >= last || last >= video_frames.size()) throw ValidationError("annotate: invalid frame range");
    std::vector<Tensor> span(video_frames.begin() + static_cast<std::ptrdiff_t>(first),
                             video_frames.begin() + static_cast<std::ptrdiff_t>(last) + 1);
    const auto boxes = track_roi(span, roi_start, roi_end, method, options);
    RoiAnnotation a{video_id, action, {}};
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const std::size_t f = first + i;
        a.frames.push_back({f, static_cast<double>(f) / fps, boxes[i]});
    }
    return a;
}

namespace {

std::string fixed6(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
    std::string s(buf, res.ptr);
    if (s == "-0.000000") s = "0.000000";
    return s;
}

void check_field(const std::string& field, std::size_t line, const char* column) {
    if (field.find_first_of(",\n\r\"") != std::string::npos || field.empty()) {
        throw ValidationError("csv line " + std::to_string(line) + ", column " + column +
                              ": value must be non-empty and free of commas, quotes and newlines");
    }
}

}  // namespace

std::string export_csv(const std::vector<RoiAnnotation>& annotations) {
    std::ostringstream os;
    os << kAnnotationCsvHeader << '\n';
    std::size_t line = 1;
    for (const auto& a : annotations) {
        for (const auto& f : a.frames) {
            ++line;
            check_field(a.video_id, line, "video_id");
            check_field(a.action, line, "action");
            os << a.video_id << ',' << a.action << ',' << f.frame << ',' << fixed6(f.t_seconds) << ','
               << fixed6(f.box.x1) << ',' << fixed6(f.box.y1) << ',' << fixed6(f.box.x2) << ',' << fixed6(f.box.y2)
               << ',' << (f.box.wraps() ? 1 : 0) << '\n';
        }
    }
    return os.str();
}

void export_csv(const std::filesystem::path& path, const std::vector<RoiAnnotation>& annotations) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + path.string());
    os << export_csv(annotations);
}

std::vector<RoiAnnotation> import_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("csv line 1: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kAnnotationCsvHeader) {
        throw ValidationError(std::string("csv line 1: header must be '") + kAnnotationCsvHeader + "'");
    }
    static const char* columns[] = {"video_id", "action", "frame", "t_seconds", "x1", "y1", "x2", "y2", "wraps"};
    std::vector<RoiAnnotation> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const auto pos = line.find(',', start);
            fields.push_back(line.substr(start, pos - start));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        auto fail = [&](std::size_t col, const std::string& why) -> ValidationError {
            return ValidationError("csv line " + std::to_string(lineno) + ", column " + std::to_string(col + 1) + " (" +
                                   columns[std::min<std::size_t>(col, 8)] + "): " + why);
        };
        if (fields.size() != 9) throw fail(std::min<std::size_t>(fields.size(), 8), "expected 9 fields");
        for (std::size_t c = 0; c < 2; ++c)
            if (fields[c].empty()) throw fail(c, "empty value");
        auto num = [&](std::size_t col) {
            double v = 0.0;
            const auto& f = fields[col];
            auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v)) {
                throw fail(col, "not a number: '" + f + "'");
            }
            return v;
        };
        std::size_t frame = 0;
        {
            const auto& f = fields[2];
            auto res = std::from_chars(f.data(), f.data() + f.size(), frame);
            if (res.ec != std::errc() || res.ptr != f.data() + f.size()) throw fail(2, "not a frame index: '" + f + "'");
        }
        RoiFrame rf;
        rf.frame = frame;
        rf.t_seconds = num(3);
        rf.box = Box{num(4), num(5), num(6), num(7)};
        if (fields[8] != "0" && fields[8] != "1") throw fail(8, "wraps must be 0 or 1");
        const bool wraps = fields[8] == "1";
        if (rf.box.wraps() != wraps) {
            throw fail(wraps ? 4 : 6, wraps ? "wraps=1 requires x1 > x2" : "x2 < x1 without the wraps flag");
        }
        try {
            rf.box.validate();
        } catch (const ValidationError& e) {
            throw fail(4, e.what());
        }
        const bool extend = !out.empty() && out.back().video_id == fields[0] && out.back().action == fields[1] &&
                            out.back().frames.back().frame + 1 == frame;
        if (!extend) out.push_back(RoiAnnotation{fields[0], fields[1], {}});
        out.back().frames.push_back(rf);
    }
    return out;
}

std::vector<RoiAnnotation> import_csv_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return import_csv(ss.str());
}

std::vector<std::string> validate_annotations(const std::vector<RoiAnnotation>& annotations,
                                              const std::set<std::string>& vocabulary) {
    std::vector<std::string> issues;
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        const auto& a = annotations[i];
        const std::string where = "annotation " + std::to_string(i) + " (" + a.video_id + "/" + a.action + ")";
        if (a.frames.empty()) issues.push_back(where + ": no frames");
        if (!vocabulary.empty() && !vocabulary.count(a.action)) issues.push_back(where + ": unknown label");
        for (std::size_t j = 0; j < a.frames.size(); ++j) {
            const auto& f = a.frames[j];
            if (j > 0) {
                if (f.frame != a.frames[j - 1].frame + 1) {
                    issues.push_back(where + ": frame range not contiguous at frame " + std::to_string(f.frame));
                }
                if (!(f.t_seconds > a.frames[j - 1].t_seconds)) {
                    issues.push_back(where + ": timestamp does not increase at frame " + std::to_string(f.frame));
                }
            }
            if (f.t_seconds < 0.0) issues.push_back(where + ": negative timestamp at frame " + std::to_string(f.frame));
            try {
                f.box.validate();
            } catch (const ValidationError& e) {
                issues.push_back(where + ": frame " + std::to_string(f.frame) + ": " + e.what());
            }
        }
    }
    return issues;
}

double cohens_kappa(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.size() != b.size()) throw ValidationError("cohens_kappa: label lists differ in length");
    if (a.empty()) throw ValidationError("cohens_kappa: empty label lists");
    std::map<std::string, double> ma, mb;
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma[a[i]] += 1.0;
        mb[b[i]] += 1.0;
        if (a[i] == b[i]) agree += 1.0;
    }
    const double n = static_cast<double>(a.size());
    const double po = agree / n;
    double pe = 0.0;
    for (const auto& [label, count] : ma) {
        auto it = mb.find(label);
        if (it != mb.end()) pe += (count / n) * (it->second / n);
    }
    if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
    return (po - pe) / (1.0 - pe);
}

}  // namespace act360
