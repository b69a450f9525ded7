#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace remap {

/// Dense activations of one backbone layer for one image, stored row-major
/// in (height, width, depth) order: element (y, x, c) lives at
/// (y * width + x) * depth + c.
struct FeatureMap {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t depth = 0;
    std::uint32_t layer_id = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(std::uint32_t width, std::uint32_t height, std::uint32_t depth, std::uint32_t layer_id);

    std::size_t cells() const { return static_cast<std::size_t>(width) * height; }

    float at(std::uint32_t y, std::uint32_t x, std::uint32_t c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * depth + c];
    }
    float& at(std::uint32_t y, std::uint32_t x, std::uint32_t c) {
        return data[(static_cast<std::size_t>(y) * width + x) * depth + c];
    }

    /// Channel vector of one spatial cell.
    std::span<const float> cell(std::uint32_t y, std::uint32_t x) const {
        return {data.data() + (static_cast<std::size_t>(y) * width + x) * depth, depth};
    }

    /// Throws DataError unless dims are positive, the payload length matches
    /// and every value is finite.
    void validate() const;
};

inline constexpr char kTensorMagic[8] = {'R', 'M', 'A', 'P', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 8 + 5 * 4;

void write_tensor(const FeatureMap& map, const std::filesystem::path& path);
FeatureMap read_tensor(const std::filesystem::path& path);

/// Feature files for one scale variant, keyed by layer id.
using LayerPaths = std::map<int, std::filesystem::path>;

struct ManifestEntry {
    std::string image_id;
    /// One LayerPaths per scale variant; index 0 is the primary scale.
    std::vector<LayerPaths> feature_paths;
    std::optional<int> class_id;
    bool is_query = false;
    /// Whether the image is part of the searchable database.
    bool in_database = true;
    std::vector<std::string> relevant_ids;
    std::vector<std::string> junk_ids;

    /// Loads every layer of scale variant `scale`.
    std::map<int, FeatureMap> load_maps(std::size_t scale = 0) const;
    /// Loads the requested layers of scale variant `scale`; missing layers throw.
    std::map<int, FeatureMap> load_maps(std::span<const int> layer_ids, std::size_t scale = 0) const;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    const ManifestEntry* find(const std::string& image_id) const;
    std::size_t index_of(const std::string& image_id) const;

    /// Checks id uniqueness, query ground truth and path existence.
    void validate() const;

    /// Rebuilds the id lookup; call after mutating `entries` directly.
    void reindex();

private:
    std::unordered_map<std::string, std::size_t> index_;
};

/// Reads a JSON-lines manifest. Relative feature paths resolve against the
/// manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes `manifest` as JSON-lines; feature paths are written relative to the
/// manifest's directory when they live below it.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace remap
