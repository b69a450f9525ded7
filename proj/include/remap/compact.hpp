#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace remap {

/// First `d` coordinates of a PCA-ordered descriptor, re-normalized.
Eigen::VectorXd truncate(const Eigen::VectorXd& descriptor, Eigen::Index d);

/// m sub-quantizers with k centroids each over consecutive D/m-dim blocks.
class PQCodebook {
public:
    PQCodebook() = default;
    /// Zero-initialized codebook; throws ContractError unless dim % m == 0
    /// and 1 <= k <= 256.
    PQCodebook(std::size_t dim, std::size_t m, std::size_t k);

    std::size_t dim() const { return dim_; }
    std::size_t m() const { return m_; }
    std::size_t k() const { return k_; }
    std::size_t sub_dim() const { return m_ == 0 ? 0 : dim_ / m_; }
    /// Bytes per encoded vector: one per sub-quantizer.
    std::size_t code_size() const { return m_; }
    /// Bits per encoded vector, m * ceil(log2 k).
    std::size_t code_bits() const;

    std::span<const double> centroid(std::size_t block, std::size_t index) const {
        return {centroids_.data() + (block * k_ + index) * sub_dim(), sub_dim()};
    }
    std::span<double> centroid(std::size_t block, std::size_t index) {
        return {centroids_.data() + (block * k_ + index) * sub_dim(), sub_dim()};
    }

    /// Per-block distortion (mean squared error) after seeding and after
    /// each Lloyd iteration of the last pq_train call.
    std::vector<std::vector<double>> training_distortion;

private:
    std::size_t dim_ = 0;
    std::size_t m_ = 0;
    std::size_t k_ = 0;
    std::vector<double> centroids_;
};

struct PQCode {
    std::string image_id;
    std::vector<std::uint8_t> codes;
};

struct PQTrainConfig {
    std::size_t m = 16;
    std::size_t k = 256;
    std::size_t max_iterations = 25;
    /// Stop when distortion improves by less than this fraction.
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

/// k-means++ seeded Lloyd iterations per block over the rows of `data`.
/// Empty clusters are re-seeded from the point farthest from its centroid.
PQCodebook pq_train(const Eigen::MatrixXd& data, const PQTrainConfig& config);

/// Nearest centroid per block; ties resolve to the lowest index.
std::vector<std::uint8_t> pq_encode(const PQCodebook& codebook, const Eigen::VectorXd& vector);
Eigen::VectorXd pq_decode(const PQCodebook& codebook, std::span<const std::uint8_t> codes);

struct SearchHit {
    std::string image_id;
    double distance = 0.0;
};

/// m x k table of squared distances between query blocks and centroids.
std::vector<double> adc_table(const PQCodebook& codebook, const Eigen::VectorXd& query);

/// Approximate squared distance of the query to every code (blocks summed in
/// index order), ranked ascending with ties by image id. topk of 0 returns
/// everything.
std::vector<SearchHit> adc_search(const PQCodebook& codebook, std::span<const PQCode> codes,
                                  const Eigen::VectorXd& query, std::size_t topk, std::size_t workers = 1);

void save_codebook(const PQCodebook& codebook, const std::filesystem::path& path);
PQCodebook load_codebook(const std::filesystem::path& path);

void save_codes(std::span<const PQCode> codes, std::size_t m, const std::filesystem::path& path);
std::vector<PQCode> load_codes(const std::filesystem::path& path);

}  // namespace remap
