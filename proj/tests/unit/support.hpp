#pragma once
// Shared fixtures for the test binaries.

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "remap/rng.hpp"
#include "remap/tensor_io.hpp"

namespace remap::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("remap_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Map with entries drawn uniformly from [lo, hi).
inline FeatureMap random_map(SeededRng& rng, std::uint32_t w, std::uint32_t h, std::uint32_t d,
                             std::uint32_t layer = 1, double lo = 0.0, double hi = 1.0) {
    FeatureMap map(w, h, d, layer);
    for (auto& v : map.data) v = static_cast<float>(rng.uniform(lo, hi));
    return map;
}

}  // namespace remap::testing
