#include "remap/compact.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "remap/aggregate.hpp"
#include "remap/binary_io.hpp"
#include "remap/error.hpp"
#include "remap/parallel.hpp"
#include "remap/rng.hpp"

namespace remap {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

VectorXd truncate(const VectorXd& descriptor, Index d) {
    if (d < 1 || d > descriptor.size()) {
        throw ContractError("cannot truncate a " + std::to_string(descriptor.size()) + "-dim descriptor to " +
                            std::to_string(d));
    }
    // Descriptors are unit-norm already; keeping all dims must not perturb them.
    if (d == descriptor.size()) return descriptor;
    return l2_normalized(descriptor.head(d));
}

PQCodebook::PQCodebook(std::size_t dim, std::size_t m, std::size_t k) : dim_(dim), m_(m), k_(k) {
    if (m == 0 || dim == 0 || dim % m != 0) {
        throw ContractError("PQ needs D divisible by m (D=" + std::to_string(dim) + ", m=" + std::to_string(m) + ")");
    }
    if (k < 1 || k > 256) throw ContractError("PQ needs 1 <= k <= 256 to fit one byte per sub-code");
    centroids_.assign(m * k * (dim / m), 0.0);
}

std::size_t PQCodebook::code_bits() const {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < k_) ++bits;
    return m_ * bits;
}

namespace {

double squared_distance(const double* a, const double* b, std::size_t n) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum;
}

struct Assignment {
    std::vector<std::size_t> label;
    std::vector<double> dist;
    double distortion = 0.0;
};

// points: n rows of `dim` contiguous doubles.
Assignment assign(const std::vector<double>& points, std::size_t n, std::size_t dim,
                  const std::vector<double>& centers, std::size_t k) {
    Assignment a;
    a.label.resize(n);
    a.dist.resize(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            const double d = squared_distance(&points[i * dim], &centers[j * dim], dim);
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        a.label[i] = best;
        a.dist[i] = best_d;
        total += best_d;
    }
    a.distortion = total / static_cast<double>(n);
    return a;
}

std::vector<double> kmeans_plus_plus(const std::vector<double>& points, std::size_t n, std::size_t dim, std::size_t k,
                                     SeededRng& rng) {
    std::vector<double> centers(k * dim);
    std::size_t first = rng.below(n);
    std::copy_n(&points[first * dim], dim, &centers[0]);
    std::vector<double> closest(n);
    for (std::size_t i = 0; i < n; ++i) closest[i] = squared_distance(&points[i * dim], &centers[0], dim);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double d : closest) total += d;
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double running = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                running += closest[i];
                if (running > target && closest[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            // Rounding can leave target beyond the last partial sum; fall
            // back to the last point with positive weight.
            if (closest[pick] <= 0.0) {
                for (std::size_t i = n; i-- > 0;) {
                    if (closest[i] > 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
        } else {
            pick = rng.below(n);
        }
        std::copy_n(&points[pick * dim], dim, &centers[c * dim]);
        for (std::size_t i = 0; i < n; ++i) {
            closest[i] = std::min(closest[i], squared_distance(&points[i * dim], &centers[c * dim], dim));
        }
    }
    return centers;
}

}  // namespace

PQCodebook pq_train(const MatrixXd& data, const PQTrainConfig& config) {
    const auto n = static_cast<std::size_t>(data.rows());
    const auto dim = static_cast<std::size_t>(data.cols());
    PQCodebook book(dim, config.m, config.k);
    if (n < config.k) {
        throw DataError("PQ training needs at least k=" + std::to_string(config.k) + " vectors, got " +
                        std::to_string(n));
    }
    if (!data.allFinite()) throw NumericError("PQ training data contains non-finite values");
    const std::size_t sub = book.sub_dim();
    const std::size_t k = config.k;
    book.training_distortion.assign(config.m, {});

    parallel_for(config.m, config.workers, [&](std::size_t block) {
        std::vector<double> points(n * sub);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < sub; ++c) {
                points[i * sub + c] = data(static_cast<Index>(i), static_cast<Index>(block * sub + c));
            }
        }
        SeededRng rng(config.seed * 0x100000001B3ULL + block + 1);
        auto centers = kmeans_plus_plus(points, n, sub, k, rng);
        auto current = assign(points, n, sub, centers, k);
        auto& history = book.training_distortion[block];
        history.push_back(current.distortion);

        for (std::size_t it = 0; it < config.max_iterations && current.distortion > 0.0; ++it) {
            std::vector<double> sums(k * sub, 0.0);
            std::vector<std::size_t> counts(k, 0);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t j = current.label[i];
                ++counts[j];
                for (std::size_t c = 0; c < sub; ++c) sums[j * sub + c] += points[i * sub + c];
            }
            std::vector<std::size_t> empty;
            for (std::size_t j = 0; j < k; ++j) {
                if (counts[j] == 0) {
                    empty.push_back(j);
                    continue;
                }
                for (std::size_t c = 0; c < sub; ++c) centers[j * sub + c] = sums[j * sub + c] / counts[j];
            }
            if (!empty.empty()) {
                // Distance of each point to its updated centroid; empty
                // clusters take the farthest points, each used once.
                std::vector<double> far(n);
                for (std::size_t i = 0; i < n; ++i) {
                    far[i] = squared_distance(&points[i * sub], &centers[current.label[i] * sub], sub);
                }
                for (std::size_t j : empty) {
                    std::size_t pick = 0;
                    for (std::size_t i = 1; i < n; ++i) {
                        if (far[i] > far[pick]) pick = i;
                    }
                    std::copy_n(&points[pick * sub], sub, &centers[j * sub]);
                    far[pick] = -1.0;
                }
            }
            const double previous = current.distortion;
            current = assign(points, n, sub, centers, k);
            history.push_back(current.distortion);
            if (previous <= 0.0 || (previous - current.distortion) / previous < config.tolerance) break;
        }
        for (std::size_t j = 0; j < k; ++j) {
            std::copy_n(&centers[j * sub], sub, book.centroid(block, j).data());
        }
    });
    return book;
}

std::vector<std::uint8_t> pq_encode(const PQCodebook& codebook, const VectorXd& vector) {
    if (static_cast<std::size_t>(vector.size()) != codebook.dim()) {
        throw ContractError("pq_encode: vector has " + std::to_string(vector.size()) + " dims, codebook expects " +
                            std::to_string(codebook.dim()));
    }
    const std::size_t sub = codebook.sub_dim();
    std::vector<std::uint8_t> codes(codebook.m());
    for (std::size_t b = 0; b < codebook.m(); ++b) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < codebook.k(); ++j) {
            const double d = squared_distance(vector.data() + b * sub, codebook.centroid(b, j).data(), sub);
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        codes[b] = static_cast<std::uint8_t>(best);
    }
    return codes;
}

VectorXd pq_decode(const PQCodebook& codebook, std::span<const std::uint8_t> codes) {
    if (codes.size() != codebook.m()) throw ContractError("pq_decode: code length differs from m");
    const std::size_t sub = codebook.sub_dim();
    VectorXd out(static_cast<Index>(codebook.dim()));
    for (std::size_t b = 0; b < codebook.m(); ++b) {
        if (codes[b] >= codebook.k()) throw DataError("PQ code " + std::to_string(codes[b]) + " is not below k");
        const auto c = codebook.centroid(b, codes[b]);
        std::copy(c.begin(), c.end(), out.data() + b * sub);
    }
    return out;
}

std::vector<double> adc_table(const PQCodebook& codebook, const VectorXd& query) {
    if (static_cast<std::size_t>(query.size()) != codebook.dim()) {
        throw ContractError("adc: query has " + std::to_string(query.size()) + " dims, codebook expects " +
                            std::to_string(codebook.dim()));
    }
    const std::size_t sub = codebook.sub_dim();
    std::vector<double> table(codebook.m() * codebook.k());
    for (std::size_t b = 0; b < codebook.m(); ++b) {
        for (std::size_t j = 0; j < codebook.k(); ++j) {
            table[b * codebook.k() + j] = squared_distance(query.data() + b * sub, codebook.centroid(b, j).data(), sub);
        }
    }
    return table;
}

std::vector<SearchHit> adc_search(const PQCodebook& codebook, std::span<const PQCode> codes, const VectorXd& query,
                                  std::size_t topk, std::size_t workers) {
    const auto table = adc_table(codebook, query);
    std::vector<SearchHit> hits(codes.size());
    parallel_for(codes.size(), workers, [&](std::size_t i) {
        const auto& code = codes[i].codes;
        if (code.size() != codebook.m()) throw DataError("code for " + codes[i].image_id + " has wrong length");
        double d = 0.0;
        for (std::size_t b = 0; b < codebook.m(); ++b) {
            if (code[b] >= codebook.k()) throw DataError("code for " + codes[i].image_id + " exceeds k");
            d += table[b * codebook.k() + code[b]];
        }
        hits[i] = SearchHit{codes[i].image_id, d};
    });
    const auto by_distance = [](const SearchHit& a, const SearchHit& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.image_id < b.image_id);
    };
    if (topk > 0 && topk < hits.size()) {
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(topk), hits.end(), by_distance);
        hits.resize(topk);
    } else {
        std::sort(hits.begin(), hits.end(), by_distance);
    }
    return hits;
}

// ---------------------------------------------------------------------------
// Files

namespace {
constexpr std::string_view kCodebookMagic = "RMAPPQCB";
constexpr std::string_view kCodesMagic = "RMAPCODE";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_codebook(const PQCodebook& codebook, const std::filesystem::path& path) {
    const nlohmann::json header = {
        {"dim", codebook.dim()}, {"m", codebook.m()}, {"k", codebook.k()}, {"sub_dim", codebook.sub_dim()}};
    const std::string text = header.dump();
    binary::Writer out;
    out.bytes(kCodebookMagic);
    out.u32(kVersion);
    out.u32(static_cast<std::uint32_t>(text.size()));
    out.bytes(text);
    for (std::size_t b = 0; b < codebook.m(); ++b) {
        for (std::size_t j = 0; j < codebook.k(); ++j) {
            for (double v : codebook.centroid(b, j)) out.f32(static_cast<float>(v));
        }
    }
    out.save(path);
}

PQCodebook load_codebook(const std::filesystem::path& path) {
    auto in = binary::Reader::open(path);
    if (in.size() < 16 || in.bytes(8) != kCodebookMagic) throw FormatError(path.string() + ": not a PQ codebook");
    if (in.u32() != kVersion) throw FormatError(path.string() + ": unsupported codebook version");
    std::size_t dim = 0, m = 0, k = 0;
    try {
        const auto header = nlohmann::json::parse(in.bytes(in.u32()));
        dim = header.at("dim").get<std::size_t>();
        m = header.at("m").get<std::size_t>();
        k = header.at("k").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad codebook header: " + e.what());
    }
    PQCodebook book(dim, m, k);
    if (in.remaining() != 4 * m * k * book.sub_dim()) throw CorruptionError(path.string() + ": centroid block size mismatch");
    for (std::size_t b = 0; b < m; ++b) {
        for (std::size_t j = 0; j < k; ++j) {
            for (double& v : book.centroid(b, j)) v = in.f32();
        }
    }
    return book;
}

void save_codes(std::span<const PQCode> codes, std::size_t m, const std::filesystem::path& path) {
    binary::Writer out;
    out.bytes(kCodesMagic);
    out.u32(kVersion);
    out.u32(static_cast<std::uint32_t>(m));
    out.u32(static_cast<std::uint32_t>(codes.size()));
    for (const auto& c : codes) {
        if (c.codes.size() != m) throw ContractError("code for " + c.image_id + " does not have m bytes");
        out.u32(static_cast<std::uint32_t>(c.image_id.size()));
        out.bytes(c.image_id);
        out.bytes(std::string_view(reinterpret_cast<const char*>(c.codes.data()), c.codes.size()));
    }
    out.save(path);
}

std::vector<PQCode> load_codes(const std::filesystem::path& path) {
    auto in = binary::Reader::open(path);
    if (in.size() < 20 || in.bytes(8) != kCodesMagic) throw FormatError(path.string() + ": not a PQ codes file");
    if (in.u32() != kVersion) throw FormatError(path.string() + ": unsupported codes version");
    const auto m = in.u32();
    const auto count = in.u32();
    std::vector<PQCode> codes;
    codes.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        PQCode c;
        c.image_id = in.bytes(in.u32());
        const auto raw = in.bytes(m);
        c.codes.assign(raw.begin(), raw.end());
        codes.push_back(std::move(c));
    }
    if (in.remaining() != 0) throw CorruptionError(path.string() + ": trailing bytes after codes");
    return codes;
}

}  // namespace remap
