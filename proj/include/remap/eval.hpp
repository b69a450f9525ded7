#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "remap/aggregate.hpp"
#include "remap/compact.hpp"
#include "remap/tensor_io.hpp"

namespace remap {

/// Ascending squared Euclidean distance, ties by id. `exclude_id` (usually
/// the query's own id) is left out. topk of 0 returns everything.
std::vector<SearchHit> search_exhaustive(const DescriptorSet& db, const Eigen::VectorXd& query, std::size_t topk,
                                         std::string_view exclude_id = {});

/// Non-interpolated AP: junk ids are dropped from the ranking, then the
/// precision at each relevant item's rank is averaged over all relevant ids
/// (unretrieved ones contribute zero).
double average_precision(std::span<const std::string> ranking, std::span<const std::string> relevant,
                         std::span<const std::string> junk = {});

/// Relevant items among the first four results. With `include_self` the
/// query counts as its own first result and as relevant.
double recall4(std::span<const std::string> ranking, std::span<const std::string> relevant,
               std::string_view query_id = {}, bool include_self = true);

/// Average query expansion: L2(query + sum of the top `topk_qe` hits).
Eigen::VectorXd query_expand(const Eigen::VectorXd& query, std::span<const SearchHit> ranking,
                             const DescriptorSet& db, std::size_t topk_qe);

enum class SearchMode { Exhaustive, Truncate, ProductQuantization };

std::string_view to_string(SearchMode mode);
SearchMode parse_search_mode(std::string_view name);

struct EvalOptions {
    SearchMode search = SearchMode::Exhaustive;
    /// Kept dimensions for SearchMode::Truncate.
    Eigen::Index truncate_dim = 0;
    PQTrainConfig pq{.m = 16, .k = 256};
    std::size_t qe_topk = 0;
    /// Fuse descriptors of scale variants 0 and 1.
    bool multiscale = false;
    bool recall4_self = true;
    std::size_t workers = 1;
};

struct QueryResult {
    std::string query_id;
    double average_precision = 0.0;
    double recall4 = 0.0;
    std::vector<std::string> top;  // first few ids, for inspection
};

struct Report {
    std::vector<QueryResult> queries;
    double mean_average_precision = 0.0;
    double mean_recall4 = 0.0;
    /// Queries whose candidates were all at the same distance; their ranking
    /// is decided by id order alone.
    std::size_t degenerate_queries = 0;
    /// Exhaustive-search mAP on the same descriptors when a compressed search
    /// mode ran.
    std::optional<double> exhaustive_map;
    nlohmann::json config;

    bool degenerate() const { return degenerate_queries > 0; }
    nlohmann::json to_json() const;
    void print_table(std::ostream& out) const;
};

/// Descriptors of every manifest entry; with `multiscale`, the fused
/// descriptor of scale variants 0 and 1.
DescriptorSet compute_descriptors(const DatasetManifest& manifest, const AggregationModel& model, bool multiscale,
                                  std::size_t workers = 1);

/// Scores `descriptors` (one per manifest entry, any order) against the
/// manifest's queries and ground truth.
Report evaluate_descriptors(const DatasetManifest& manifest, const DescriptorSet& descriptors,
                            const EvalOptions& options, nlohmann::json config = nlohmann::json::object());

Report evaluate(const DatasetManifest& manifest, const AggregationModel& model, const EvalOptions& options);

void save_report(const Report& report, const std::filesystem::path& path);

}  // namespace remap
