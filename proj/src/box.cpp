#include "act360/box.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "act360/error.hpp"

namespace act360 {

double wrap_unit(double x) {
    double r = x - std::floor(x);
    return r >= 1.0 ? 0.0 : r;
}

double circular_delta(double a, double b) {
    double d = wrap_unit(a - b);
    return d > 0.5 ? d - 1.0 : d;
}

double Box::center_x() const noexcept { return wrap_unit(x1 + 0.5 * width()); }

void Box::validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(x1) || !in_unit(x2) || !in_unit(y1) || !in_unit(y2)) {
        throw ValidationError("box coordinates must lie in [0,1]");
    }
    if (!(y1 < y2)) throw ValidationError("box needs y1 < y2");
    if (x1 == x2) throw ValidationError("box has zero width");
}

Box Box::from_center(double cx, double cy, double w, double h) {
    w = std::clamp(w, 0.0, 0.999);
    Box b;
    b.x1 = wrap_unit(cx - 0.5 * w);
    b.x2 = wrap_unit(cx + 0.5 * w);
    b.y1 = std::clamp(cy - 0.5 * h, 0.0, 1.0);
    b.y2 = std::clamp(cy + 0.5 * h, 0.0, 1.0);
    if (b.x2 == 0.0 && b.x1 > 0.0) b.x2 = 1.0;
    return b;
}

double arc_intersection(const Box& first, const Box& second) {
    // Canonical operand order makes the result exactly symmetric.
    const bool swap = std::tie(second.x1, second.x2) < std::tie(first.x1, first.x2);
    const Box& a = swap ? second : first;
    const Box& b = swap ? first : second;
    const double a0 = a.x1, a1 = a.x1 + a.width();
    const double b0 = b.x1, b1 = b.x1 + b.width();
    double total = 0.0;
    for (int k = -1; k <= 1; ++k) {
        const double lo = std::max(a0, b0 + k);
        const double hi = std::min(a1, b1 + k);
        if (hi > lo) total += hi - lo;
    }
    return total;
}

double wrap_intersection(const Box& a, const Box& b) {
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iy <= 0.0) return 0.0;
    return arc_intersection(a, b) * iy;
}

double wrap_iou(const Box& a, const Box& b) {
    const double inter = wrap_intersection(a, b);
    if (inter <= 0.0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

}  // namespace act360
