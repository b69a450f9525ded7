#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "remap/aggregate.hpp"
#include "remap/tensor_io.hpp"

namespace remap {

enum class PairLabel : std::uint8_t { Matching, NonMatching };

/// Distance between the L2-normalized pooled vectors of the same region in
/// two images.
struct PairDistanceSample {
    int region_index = 0;
    int layer_id = 0;
    double distance = 0.0;
    PairLabel label = PairLabel::Matching;
};

struct PairSamplingConfig {
    int max_scale = 3;
    std::vector<int> layer_ids;
    /// Matching pairs to draw; the same number of non-matching pairs follows.
    std::size_t pair_budget = 2000;
    std::uint64_t seed = 0;
    /// Scale variant of the manifest feature files to use.
    std::size_t scale_index = 0;
    std::size_t workers = 1;
};

/// Samples pairs among labeled images and emits one distance per
/// (pair, layer, region). `regions[i]` must hold the layers in the same order
/// for every image. Throws DataError if no matching or no non-matching pair
/// exists, or region counts differ between images.
std::vector<PairDistanceSample> collect_pair_distances(std::span<const int> class_ids,
                                                       std::span<const ImageRegions> regions,
                                                       const PairSamplingConfig& config);

/// Manifest front end: loads every entry carrying a class_id.
std::vector<PairDistanceSample> collect_pair_distances(const DatasetManifest& manifest,
                                                       const PairSamplingConfig& config);

/// KL(P_matching || P_nonmatching) between smoothed equal-width histograms
/// over [min(0, lowest value), highest value]; for distances that is
/// [0, max observed distance]. Inputs must be finite.
double kl_divergence(std::span<const double> matching, std::span<const double> nonmatching, int bins,
                     double epsilon);

enum class KlDirection { MatchingToNonMatching, NonMatchingToMatching };

struct KlConfig {
    int bins = 64;
    double epsilon = 1e-6;
    std::size_t min_samples = 50;
    KlDirection direction = KlDirection::MatchingToNonMatching;
};

struct EntropyWeights {
    struct Entry {
        int layer_id = 0;
        int region_index = 0;
        double weight = 0.0;
        std::size_t n_match = 0;
        std::size_t n_nonmatch = 0;
    };
    /// Sorted by (layer_id, region_index).
    std::vector<Entry> entries;
    KlConfig config;

    /// Weights of one layer in region order; throws DataError if the layer
    /// does not have exactly `region_count` regions.
    std::vector<double> for_layer(int layer_id, std::size_t region_count) const;
};

/// Per-(layer, region) KL divergence of the matching vs non-matching distance
/// distributions. Throws DataError listing every key with fewer than
/// config.min_samples samples of either label.
EntropyWeights init_weights(std::span<const PairDistanceSample> samples, const KlConfig& config = {});

void save_weights(const EntropyWeights& weights, const std::filesystem::path& path);
EntropyWeights load_weights(const std::filesystem::path& path);

}  // namespace remap
