#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "remap/aggregate.hpp"
#include "remap/entropy.hpp"
#include "remap/tensor_io.hpp"

namespace remap {

/// 0.5 * max(0, margin + d_qm^2 - d_qn^2).
double triplet_loss(double dqm2, double dqn2, double margin);

struct Triplet {
    std::size_t query = 0;
    std::size_t match = 0;
    std::size_t nonmatch = 0;
};

enum class AlphaInit { Ones, Entropy };

std::string_view to_string(AlphaInit init);
AlphaInit parse_alpha_init(std::string_view name);

struct TrainConfig {
    double margin = 0.1;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::size_t accumulate = 64;
    std::size_t remine_every = 3000;
    std::size_t epochs = 1;
    /// Stop after this many triplets; 0 means one full pass per epoch.
    std::size_t max_triplets = 0;
    std::uint64_t seed = 0;
    AlphaInit alpha_init = AlphaInit::Ones;
    /// Checkpoint the model every this many windows (0 disables).
    std::size_t checkpoint_every = 0;
    std::filesystem::path checkpoint_dir;
    std::size_t workers = 1;

    /// Throws ConfigError listing every invalid field.
    void validate() const;
};

/// Labeled training images with their pooled region vectors.
struct TrainingSet {
    std::vector<std::string> ids;
    std::vector<int> class_ids;
    std::vector<ImageRegions> regions;

    std::size_t size() const { return ids.size(); }
};

/// Loads every manifest entry that has a class_id.
TrainingSet load_training_set(const DatasetManifest& manifest, std::span<const int> layer_ids, int max_scale,
                              std::size_t scale_index = 0, std::size_t workers = 1);

/// Starting REMAP/RMAC model for `set`: alpha from `init` (entropy weights
/// required for AlphaInit::Entropy) and projection from PCA-whitening of the
/// training pre-projection vectors. `d_out` of 0 keeps D_cat dims.
AggregationModel initial_model(const TrainingSet& set, Method method, std::vector<int> layer_ids, int max_scale,
                               AlphaInit init, const EntropyWeights* entropy, Eigen::Index d_out = 0,
                               std::optional<double> regularizer = std::nullopt);

/// Forward intermediates of the three images of a triplet.
struct TripletCache {
    std::array<const ImageRegions*, 3> regions{};
    std::array<RemapTrace, 3> traces;
};

TripletCache forward_triplet(const ImageRegions& query, const ImageRegions& match, const ImageRegions& nonmatch,
                             const AggregationModel& model);

/// Dense parameter gradients, shaped like the model.
struct Gradients {
    std::vector<std::vector<double>> alpha;
    Eigen::MatrixXd projection;
    Eigen::VectorXd bias;

    static Gradients zeros_like(const AggregationModel& model);
    void scale(double factor);
    bool all_finite() const;
};

/// Gradient of one triplet kept in factored form: the projection gradient
/// is sum_k projected_grad[k] * concat[k]^T over the three images.
struct TripletGradient {
    double loss = 0.0;
    bool active = false;
    std::array<Eigen::VectorXd, 3> projected_grad;
    std::array<Eigen::VectorXd, 3> concat;
    std::vector<std::vector<double>> alpha;

    /// Adds this triplet's contribution to `into`.
    void accumulate(Gradients& into) const;
};

/// Exact gradient of the triplet loss with respect to alpha, projection and
/// bias, with region vectors held constant. Inactive hinge gives zeros.
TripletGradient backward(const TripletCache& cache, const AggregationModel& model, double margin);

/// Convenience: dense gradients of a single triplet.
Gradients triplet_gradients(const TripletCache& cache, const AggregationModel& model, double margin);

/// For each (query, match) pair, the different-class image whose descriptor
/// is closest to the query's; ties go to the lexically smaller id.
std::vector<Triplet> mine_hard_negatives(std::span<const Eigen::VectorXd> descriptors, std::span<const int> class_ids,
                                         std::span<const std::string> ids,
                                         std::span<const std::pair<std::size_t, std::size_t>> pairs);

/// Recomputes descriptors of `set` under `model`, then mines.
std::vector<Triplet> mine_hard_negatives(const AggregationModel& model, const TrainingSet& set,
                                         std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                         std::size_t workers = 1);

/// All unordered same-class pairs (i < j), query = i.
std::vector<std::pair<std::size_t, std::size_t>> matching_pairs(std::span<const int> class_ids);

struct WindowStats {
    std::size_t window_index = 0;
    double mean_loss = 0.0;
    double active_fraction = 0.0;
};

struct TrainResult {
    AggregationModel model;
    std::vector<WindowStats> trace;
    std::size_t triplets_seen = 0;
};

/// SGD with momentum on the triplet loss; gradients averaged per window of
/// config.accumulate triplets, negatives remined every config.remine_every
/// triplets, alpha clamped at zero after each step. RMAC models keep alpha
/// fixed at its initial value.
TrainResult train(AggregationModel model, const TrainingSet& set, const TrainConfig& config);

/// CSV: window_index,mean_loss,active_fraction
void save_loss_trace(std::span<const WindowStats> trace, const std::filesystem::path& path);

}  // namespace remap
