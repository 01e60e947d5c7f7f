#pragma once

#include <cstddef>
#include <string>

namespace act360 {

/// Normalized ERP box. x is periodic: x1 > x2 encodes an arc that crosses the
/// seam at x = 0. y is an ordinary interval with 0 <= y1 < y2 <= 1.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    bool wraps() const noexcept { return x1 > x2; }
    /// Arc length along x on the unit circle.
    double width() const noexcept { return wraps() ? 1.0 - x1 + x2 : x2 - x1; }
    double height() const noexcept { return y2 - y1; }
    double area() const noexcept { return width() * height(); }
    /// Arc midpoint in [0, 1).
    double center_x() const noexcept;
    double center_y() const noexcept { return 0.5 * (y1 + y2); }

    /// Throws ValidationError when the invariants fail.
    void validate() const;

    static Box from_center(double cx, double cy, double w, double h);

    friend bool operator==(const Box&, const Box&) = default;
};

/// Maps any real to [0, 1).
double wrap_unit(double x);
/// Signed circular difference a - b mapped to (-0.5, 0.5].
double circular_delta(double a, double b);

/// Length of the intersection of two arcs on the unit circle.
double arc_intersection(const Box& a, const Box& b);

/// Intersection-over-union with x treated as periodic. Symmetric; equals the
/// planar IoU when neither box wraps.
double wrap_iou(const Box& a, const Box& b);
/// Intersection area (periodic in x).
double wrap_intersection(const Box& a, const Box& b);

struct Detection {
    std::string video_id;
    std::size_t frame = 0;
    Box box;
    std::size_t label = 0;
    double confidence = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

}  // namespace act360
