#pragma once

#include <cstdint>
#include <vector>

namespace act360 {

/// Where latitude is sampled for a pixel row.
///  - Eq1Exact: phi(y) = pi (y/H - 1/2), y in [0, H]; hits the poles at the edges.
///  - PixelCenter: phi evaluated at y + 0.5, strictly inside the open interval.
enum class LatitudeMode { Eq1Exact, PixelCenter };

/// Equirectangular frame geometry. Width is always twice the height.
class ErpGrid {
public:
    explicit ErpGrid(std::size_t height_px, LatitudeMode mode = LatitudeMode::PixelCenter);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return 2 * height_; }
    LatitudeMode mode() const noexcept { return mode_; }

    friend bool operator==(const ErpGrid&, const ErpGrid&) = default;

private:
    std::size_t height_;
    LatitudeMode mode_;
};

/// Latitude (radians) of a row coordinate under the grid's mode.
double latitude_of_row(const ErpGrid& grid, double y);

/// cos(latitude_of_row(grid, y)) for every integer row y in [0, H).
std::vector<double> cos_lat_table(const ErpGrid& grid);

/// Periodic column index in [0, width).
std::int64_t wrap_x(std::int64_t x, std::int64_t width);

struct PixelCoord {
    double x;
    double y;
};

/// Sphere to ERP pixel coordinates: y = H (lat/pi + 1/2), x = W (lon/(2 pi) + 1/2).
PixelCoord erp_project(double lat, double lon, const ErpGrid& grid);

/// Inverse of erp_project under the Eq1Exact convention.
double latitude_of_pixel_y(const ErpGrid& grid, double y);
double longitude_of_pixel_x(const ErpGrid& grid, double x);

}  // namespace act360
