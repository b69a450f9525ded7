#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "remap/grid.hpp"
#include "remap/tensor_io.hpp"

namespace remap {

enum class Method { Remap, Rmac, Mac, Spoc };

std::string_view to_string(Method method);
/// Accepts REMAP, RMAC, MAC, SPoC (case-insensitive).
Method parse_method(std::string_view name);

/// x / ||x||; a zero vector is returned unchanged.
Eigen::VectorXd l2_normalized(const Eigen::VectorXd& x);

/// Max-pooled, row-wise L2-normalized region vectors of one layer.
struct LayerRegions {
    int layer_id = 0;
    RegionSet grid;
    RegionMatrix pooled;
    /// regions x depth; zero rows stay zero.
    Eigen::MatrixXd normalized;
};

/// Per-layer region vectors for one image, in model layer order.
struct ImageRegions {
    std::vector<LayerRegions> layers;
};

LayerRegions prepare_layer(const FeatureMap& map, int max_scale);

/// Pools every requested layer on a grid built from that layer's own dims.
/// Throws DataError naming the first missing layer.
ImageRegions prepare_regions(const std::map<int, FeatureMap>& maps, std::span<const int> layer_ids, int max_scale);

/// sum_i alpha_i * row_i of an already-normalized region matrix.
Eigen::VectorXd weighted_region_sum(const Eigen::MatrixXd& normalized, std::span<const double> alpha);

/// One ROI stream: pool, L2-normalize each region, weight and sum.
Eigen::VectorXd stream_forward(const FeatureMap& map, const RegionSet& grid, std::span<const double> alpha);

/// Trainable aggregation head plus the pipeline configuration it belongs to.
struct AggregationModel {
    Method method = Method::Remap;
    int grid_scale = 3;
    std::vector<int> layer_ids;
    std::vector<int> layer_depths;
    /// Per layer, one weight per grid region. Empty for MAC and SPoC.
    std::vector<std::vector<double>> alpha;
    /// D_out x D_cat.
    Eigen::MatrixXd projection;
    Eigen::VectorXd bias;
    /// "ones" or "entropy"; recorded for reports.
    std::string alpha_init = "ones";

    Eigen::Index d_cat() const;
    Eigen::Index d_out() const { return projection.rows(); }

    /// Throws ContractError when shapes or values break the model invariants.
    void validate() const;
};

/// Model with alpha = 1, identity projection and zero bias.
/// `region_counts` is ignored for MAC/SPoC.
AggregationModel make_identity_model(Method method, std::vector<int> layer_ids, std::vector<int> layer_depths,
                                     std::span<const std::size_t> region_counts, int grid_scale);

struct Descriptor {
    std::string image_id;
    Eigen::VectorXd values;
};

/// Intermediate values of a REMAP/RMAC forward pass, kept for backprop.
struct RemapTrace {
    struct Stream {
        Eigen::VectorXd sum;        // sum_i alpha_i r_i
        double norm = 0.0;          // ||sum||
        Eigen::VectorXd normalized; // sum / norm, or zero
    };
    std::vector<Stream> streams;
    Eigen::VectorXd concat;      // p
    Eigen::VectorXd projected;   // projection * p + bias
    double projected_norm = 0.0;
    Eigen::VectorXd descriptor;  // L2(projected)
};

/// Concatenated, per-stream-normalized pooling output before projection.
Eigen::VectorXd pre_projection(const ImageRegions& regions, const AggregationModel& model);

RemapTrace remap_forward_traced(const ImageRegions& regions, const AggregationModel& model);

Descriptor remap_forward(const ImageRegions& regions, const AggregationModel& model);
Descriptor remap_forward(const std::map<int, FeatureMap>& maps, const AggregationModel& model);

/// Global channelwise max (MAC) or sum (SPoC) of a whole map.
Eigen::VectorXd global_pool(const FeatureMap& map, Method method);

/// Single-layer baselines followed by projection + bias + L2. RMAC is the
/// REMAP pipeline with one layer and all weights fixed to one.
Descriptor baseline_forward(const FeatureMap& map, Method method, const Eigen::MatrixXd& projection,
                            const Eigen::VectorXd& bias, int grid_scale = 3);

/// Pre-projection vector for any method.
Eigen::VectorXd pre_projection(const std::map<int, FeatureMap>& maps, const AggregationModel& model);

/// Descriptor for any method.
Descriptor describe(const std::map<int, FeatureMap>& maps, const AggregationModel& model);

/// L2(projection * p + bias).
Eigen::VectorXd project(const Eigen::VectorXd& p, const AggregationModel& model);

struct Whitening {
    Eigen::MatrixXd projection;    // D_out x D_cat
    Eigen::VectorXd bias;          // -projection * mean
    Eigen::VectorXd eigenvalues;   // kept components, descending
    double regularizer = 0.0;
    Eigen::Index effective_rank = 0;
};

/// PCA + whitening on the rows of `samples` (n x D_cat). Covariance uses the
/// 1/n normalization. Rows of the projection are the leading eigenvectors
/// scaled by 1/sqrt(eigenvalue + regularizer); the default regularizer is
/// 1e-6 * trace / D_cat. Throws NumericError if the effective rank is
/// below `d_out`.
Whitening fit_whitening(const Eigen::MatrixXd& samples, Eigen::Index d_out,
                        std::optional<double> regularizer = std::nullopt);

/// 2 x1 + 1.4 x2, L2-normalized unless `normalize` is false.
Eigen::VectorXd multiscale_fuse(const Eigen::VectorXd& x1, const Eigen::VectorXd& x2, bool normalize = true);

void save_model(const AggregationModel& model, const std::filesystem::path& path);
AggregationModel load_model(const std::filesystem::path& path);

/// Named descriptors with a shared dimension.
struct DescriptorSet {
    std::vector<std::string> ids;
    std::vector<Eigen::VectorXd> vectors;

    std::size_t size() const { return ids.size(); }
    Eigen::Index dim() const { return vectors.empty() ? 0 : vectors.front().size(); }
    void add(Descriptor d) {
        ids.push_back(std::move(d.image_id));
        vectors.push_back(std::move(d.values));
    }
};

void save_descriptors(const DescriptorSet& set, const std::filesystem::path& path);
DescriptorSet load_descriptors(const std::filesystem::path& path);

}  // namespace remap
