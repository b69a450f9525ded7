#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "remap/tensor_io.hpp"

namespace remap {

/// Half-open rectangle of feature-map cells: columns [x0, x1), rows [y0, y1).
struct Region {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    int scale = 1;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool operator==(const Region&) const = default;
};

/// Rigid multi-scale grid, ordered by ascending (scale, y0, x0).
struct RegionSet {
    std::vector<Region> regions;
    int max_scale = 0;
    int width = 0;
    int height = 0;

    std::size_t size() const { return regions.size(); }
    /// Number of regions placed at scale `s`.
    std::size_t count_at_scale(int s) const;
};

/// Windows along one axis at scale `scale`: the fewest whose consecutive
/// overlap is at least 40% of the ideal side 2 shortest / (scale + 1).
/// Computed on the unrounded side so the count does not depend on cell
/// rounding.
int axis_window_count(int axis_len, int shortest, int scale);

/// Start offsets of `count` uniformly spaced `side`-long windows covering
/// the axis, rounded half-up to cells. Coinciding offsets are merged, so
/// fewer than `count` come back when the axis has too few cells.
std::vector<int> axis_placements(int axis_len, int side, int count);

/// Builds the overlapping square-region grid for a width x height map at
/// scales 1..max_scale. At scale s the side is round(2 min(w,h) / (s+1))
/// cells; the window count per axis comes from axis_window_count.
RegionSet build_grid(int width, int height, int max_scale);

/// Region-by-channel matrix of max-pooled activations, row-major.
struct RegionMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;
    /// Flat cell index (y * width + x) of the maximum, per (row, channel);
    /// ties resolve to the lowest cell index.
    std::vector<std::uint32_t> argmax;

    std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    std::span<float> row(std::size_t i) { return {values.data() + i * cols, cols}; }
};

/// Channelwise max over the cells of each region, one row per region in
/// RegionSet order. Throws ContractError if a region leaves the map.
RegionMatrix pool_regions(const FeatureMap& map, const RegionSet& regions);

}  // namespace remap
