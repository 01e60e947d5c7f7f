#include "act360/erp.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "act360/error.hpp"

namespace act360 {

ErpGrid::ErpGrid(std::size_t height_px, LatitudeMode mode) : height_(height_px), mode_(mode) {
    if (height_px < 2) throw ValidationError("ErpGrid: height must be >= 2, got " + std::to_string(height_px));
}

double latitude_of_row(const ErpGrid& grid, double y) {
    const double h = static_cast<double>(grid.height());
    if (grid.mode() == LatitudeMode::Eq1Exact) {
        if (!(y >= 0.0 && y <= h)) {
            throw ValidationError("latitude_of_row: y=" + std::to_string(y) + " outside [0, H]");
        }
        return std::numbers::pi * (y / h - 0.5);
    }
    if (!(y >= 0.0 && y < h)) {
        throw ValidationError("latitude_of_row: y=" + std::to_string(y) + " outside [0, H)");
    }
    return std::numbers::pi * ((y + 0.5) / h - 0.5);
}

std::vector<double> cos_lat_table(const ErpGrid& grid) {
    std::vector<double> table(grid.height());
    for (std::size_t y = 0; y < grid.height(); ++y) {
        table[y] = std::cos(latitude_of_row(grid, static_cast<double>(y)));
    }
    return table;
}

std::int64_t wrap_x(std::int64_t x, std::int64_t width) {
    if (width < 1) throw ValidationError("wrap_x: width must be >= 1");
    const std::int64_t m = x % width;
    return m < 0 ? m + width : m;
}

PixelCoord erp_project(double lat, double lon, const ErpGrid& grid) {
    const double h = static_cast<double>(grid.height());
    const double w = static_cast<double>(grid.width());
    return {w * (lon / (2.0 * std::numbers::pi) + 0.5), h * (lat / std::numbers::pi + 0.5)};
}

double latitude_of_pixel_y(const ErpGrid& grid, double y) {
    return std::numbers::pi * (y / static_cast<double>(grid.height()) - 0.5);
}

double longitude_of_pixel_x(const ErpGrid& grid, double x) {
    return 2.0 * std::numbers::pi * (x / static_cast<double>(grid.width()) - 0.5);
}

}  // namespace act360
