#include "remap/grid.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "remap/error.hpp"

namespace remap {

std::size_t RegionSet::count_at_scale(int s) const {
    return static_cast<std::size_t>(
        std::count_if(regions.begin(), regions.end(), [s](const Region& r) { return r.scale == s; }));
}

namespace {

// round(2 * shortest / (s + 1)), half-up, never below one cell.
int side_for_scale(int shortest, int s) {
    const long long num = 4LL * shortest + (s + 1);
    const long long den = 2LL * (s + 1);
    return std::max(1, static_cast<int>(num / den));
}

}  // namespace

int axis_window_count(int axis_len, int shortest, int scale) {
    // Ideal side sigma = 2 shortest / (s + 1). Smallest n with overlap
    // sigma - (len - sigma) / (n - 1) >= 0.4 sigma, i.e.
    // n - 1 >= 5 (len (s + 1) - 2 shortest) / (6 shortest).
    const long long excess = static_cast<long long>(axis_len) * (scale + 1) - 2LL * shortest;
    if (excess <= 0) return 1;
    const long long need = 5 * excess;
    const long long per_gap = 6LL * shortest;
    return static_cast<int>((need + per_gap - 1) / per_gap) + 1;
}

std::vector<int> axis_placements(int axis_len, int side, int count) {
    if (side >= axis_len || count <= 1) return {0};
    const long long span = axis_len - side;
    const long long gaps = count - 1;
    std::vector<int> offsets;
    offsets.reserve(static_cast<std::size_t>(count));
    for (long long i = 0; i <= gaps; ++i) {
        // round-half-up of i * span / gaps
        const int offset = static_cast<int>((2 * i * span + gaps) / (2 * gaps));
        if (offsets.empty() || offsets.back() != offset) offsets.push_back(offset);
    }
    return offsets;
}

RegionSet build_grid(int width, int height, int max_scale) {
    if (width < 1 || height < 1 || max_scale < 1) {
        throw ContractError("build_grid needs width, height, scales >= 1 (got " + std::to_string(width) + ", " +
                            std::to_string(height) + ", " + std::to_string(max_scale) + ")");
    }
    RegionSet set;
    set.max_scale = max_scale;
    set.width = width;
    set.height = height;
    const int shortest = std::min(width, height);
    for (int s = 1; s <= max_scale; ++s) {
        const int side = side_for_scale(shortest, s);
        const auto xs = axis_placements(width, side, axis_window_count(width, shortest, s));
        const auto ys = axis_placements(height, side, axis_window_count(height, shortest, s));
        for (int y : ys) {
            for (int x : xs) {
                set.regions.push_back(Region{x, y, x + std::min(side, width), y + std::min(side, height), s});
            }
        }
    }
    return set;
}

RegionMatrix pool_regions(const FeatureMap& map, const RegionSet& regions) {
    RegionMatrix out;
    out.rows = regions.size();
    out.cols = map.depth;
    out.values.assign(out.rows * out.cols, -std::numeric_limits<float>::infinity());
    out.argmax.assign(out.rows * out.cols, 0);

    const int w = static_cast<int>(map.width);
    const int h = static_cast<int>(map.height);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const Region& r = regions.regions[i];
        if (r.x0 < 0 || r.y0 < 0 || r.x1 > w || r.y1 > h || r.x0 >= r.x1 || r.y0 >= r.y1) {
            throw ContractError("region " + std::to_string(i) + " [" + std::to_string(r.x0) + "," +
                                std::to_string(r.x1) + ")x[" + std::to_string(r.y0) + "," + std::to_string(r.y1) +
                                ") is outside the " + std::to_string(w) + "x" + std::to_string(h) + " map");
        }
        float* best = out.values.data() + i * out.cols;
        std::uint32_t* where = out.argmax.data() + i * out.cols;
        // Row-major cell order visits cell indices ascending, so strict '>'
        // keeps the lowest index on ties.
        for (int y = r.y0; y < r.y1; ++y) {
            for (int x = r.x0; x < r.x1; ++x) {
                const auto cell = map.cell(static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(x));
                const auto index = static_cast<std::uint32_t>(y * w + x);
                for (std::size_t c = 0; c < out.cols; ++c) {
                    if (cell[c] > best[c]) {
                        best[c] = cell[c];
                        where[c] = index;
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace remap
