#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "remap/tensor_io.hpp"

namespace remap {

struct SynthLayerSpec {
    int layer_id = 1;
    int width = 8;
    int height = 6;
    int depth = 32;
};

/// Planted-signal feature-map generator. Every image shows one object of its
/// class in a fixed part of the frame (with jitter) over background clutter
/// drawn from a class-independent pattern dictionary. Layers see the object
/// through independent per-image noise, and each scale variant re-renders
/// the object with its own noise, so regions, layers and scales all carry
/// partly independent evidence.
struct SynthConfig {
    std::size_t classes = 5;
    std::size_t per_class = 20;
    /// Training split size; 0 copies the test split's value.
    std::size_t train_classes = 0;
    std::size_t train_per_class = 0;
    std::uint64_t seed = 0;
    std::vector<SynthLayerSpec> layers{{1, 8, 6, 32}, {2, 16, 12, 16}};
    /// Size multipliers of the scale variants; index 0 is the primary scale.
    std::vector<double> scales{1.0, 1.5};

    // Object box in normalized image coordinates, before jitter.
    double object_x0 = 0.05;
    double object_x1 = 0.45;
    double object_y0 = 0.2;
    double object_y1 = 0.8;
    double jitter = 0.08;

    double object_amplitude = 1.0;
    /// Log-normal per-image, per-layer channel noise on the class prototype.
    double instance_noise = 0.6;
    /// Log-normal per-scale channel noise on the rendered object.
    double render_noise = 0.45;
    double background_noise = 0.15;
    std::size_t clutter_blobs = 5;
    std::size_t clutter_patterns = 6;
    double clutter_amplitude = 1.2;
    double clutter_radius = 0.14;

    void validate() const;
};

struct SynthImage {
    std::string image_id;
    int class_id = 0;
    /// One map per layer for each scale variant.
    std::vector<std::map<int, FeatureMap>> scales;
};

enum class SynthSplit { Train, Test };

std::vector<SynthImage> generate_split(const SynthConfig& config, SynthSplit split);

struct SynthPaths {
    std::filesystem::path train_manifest;
    std::filesystem::path test_manifest;
};

/// Writes feature files under out_dir/features and two manifests:
/// train.jsonl (labeled, no queries) and test.jsonl (every image is a query
/// whose relevant set is the rest of its class).
SynthPaths write_synthetic_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace remap
