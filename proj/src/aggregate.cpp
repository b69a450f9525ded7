#include "remap/aggregate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "remap/binary_io.hpp"
#include "remap/error.hpp"

namespace remap {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view to_string(Method method) {
    switch (method) {
        case Method::Remap: return "REMAP";
        case Method::Rmac: return "RMAC";
        case Method::Mac: return "MAC";
        case Method::Spoc: return "SPoC";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    if (upper == "REMAP") return Method::Remap;
    if (upper == "RMAC") return Method::Rmac;
    if (upper == "MAC") return Method::Mac;
    if (upper == "SPOC") return Method::Spoc;
    throw ConfigError("unknown method '" + std::string(name) + "' (expected REMAP, RMAC, MAC or SPoC)");
}

VectorXd l2_normalized(const VectorXd& x) {
    const double n = x.norm();
    return n > 0.0 ? VectorXd(x / n) : x;
}

namespace {

MatrixXd normalize_rows(const RegionMatrix& pooled) {
    MatrixXd out(static_cast<Index>(pooled.rows), static_cast<Index>(pooled.cols));
    for (Index i = 0; i < out.rows(); ++i) {
        const auto row = pooled.row(static_cast<std::size_t>(i));
        double sq = 0.0;
        for (Index c = 0; c < out.cols(); ++c) {
            const double v = row[static_cast<std::size_t>(c)];
            out(i, c) = v;
            sq += v * v;
        }
        if (sq > 0.0) out.row(i) /= std::sqrt(sq);
    }
    return out;
}

}  // namespace

LayerRegions prepare_layer(const FeatureMap& map, int max_scale) {
    LayerRegions layer;
    layer.layer_id = static_cast<int>(map.layer_id);
    layer.grid = build_grid(static_cast<int>(map.width), static_cast<int>(map.height), max_scale);
    layer.pooled = pool_regions(map, layer.grid);
    layer.normalized = normalize_rows(layer.pooled);
    return layer;
}

ImageRegions prepare_regions(const std::map<int, FeatureMap>& maps, std::span<const int> layer_ids, int max_scale) {
    ImageRegions image;
    image.layers.reserve(layer_ids.size());
    for (int layer : layer_ids) {
        const auto it = maps.find(layer);
        if (it == maps.end()) throw DataError("missing feature map for layer " + std::to_string(layer));
        image.layers.push_back(prepare_layer(it->second, max_scale));
        image.layers.back().layer_id = layer;
    }
    return image;
}

VectorXd weighted_region_sum(const MatrixXd& normalized, std::span<const double> alpha) {
    if (static_cast<Index>(alpha.size()) != normalized.rows()) {
        throw ContractError("alpha has " + std::to_string(alpha.size()) + " weights for " +
                            std::to_string(normalized.rows()) + " regions");
    }
    VectorXd sum = VectorXd::Zero(normalized.cols());
    for (Index i = 0; i < normalized.rows(); ++i) {
        sum += alpha[static_cast<std::size_t>(i)] * normalized.row(i).transpose();
    }
    return sum;
}

VectorXd stream_forward(const FeatureMap& map, const RegionSet& grid, std::span<const double> alpha) {
    if (grid.width != static_cast<int>(map.width) || grid.height != static_cast<int>(map.height)) {
        throw ContractError("grid built for " + std::to_string(grid.width) + "x" + std::to_string(grid.height) +
                            " applied to a " + std::to_string(map.width) + "x" + std::to_string(map.height) + " map");
    }
    if (alpha.size() != grid.size()) {
        throw ContractError("alpha has " + std::to_string(alpha.size()) + " weights for " +
                            std::to_string(grid.size()) + " regions");
    }
    const MatrixXd normalized = normalize_rows(pool_regions(map, grid));
    return weighted_region_sum(normalized, alpha);
}

// ---------------------------------------------------------------------------
// Model

Index AggregationModel::d_cat() const {
    Index total = 0;
    for (int d : layer_depths) total += d;
    return total;
}

void AggregationModel::validate() const {
    if (layer_ids.empty()) throw ContractError("model has no layers");
    if (layer_depths.size() != layer_ids.size()) throw ContractError("model layer_depths/layer_ids length mismatch");
    if (std::set<int>(layer_ids.begin(), layer_ids.end()).size() != layer_ids.size()) {
        throw ContractError("model layer_ids contain duplicates");
    }
    if (grid_scale < 1) throw ContractError("grid scale must be >= 1");
    const bool regional = method == Method::Remap || method == Method::Rmac;
    if (!regional && layer_ids.size() != 1) throw ContractError(std::string(to_string(method)) + " uses exactly one layer");
    if (regional) {
        if (alpha.size() != layer_ids.size()) throw ContractError("alpha must hold one weight vector per layer");
        for (std::size_t l = 0; l < alpha.size(); ++l) {
            for (double a : alpha[l]) {
                if (!std::isfinite(a) || a < 0.0) {
                    throw ContractError("alpha for layer " + std::to_string(layer_ids[l]) + " is negative or non-finite");
                }
            }
        }
    }
    if (projection.cols() != d_cat()) {
        throw ContractError("projection has " + std::to_string(projection.cols()) + " columns, D_cat is " +
                            std::to_string(d_cat()));
    }
    if (bias.size() != projection.rows()) throw ContractError("bias length differs from projection rows");
    if (projection.rows() > projection.cols()) throw ContractError("D_out exceeds D_cat");
    if (!projection.allFinite() || !bias.allFinite()) throw ContractError("projection or bias is not finite");
}

AggregationModel make_identity_model(Method method, std::vector<int> layer_ids, std::vector<int> layer_depths,
                                     std::span<const std::size_t> region_counts, int grid_scale) {
    AggregationModel model;
    model.method = method;
    model.grid_scale = grid_scale;
    model.layer_ids = std::move(layer_ids);
    model.layer_depths = std::move(layer_depths);
    if (method == Method::Remap || method == Method::Rmac) {
        if (region_counts.size() != model.layer_ids.size()) throw ContractError("one region count per layer required");
        for (std::size_t n : region_counts) model.alpha.emplace_back(n, 1.0);
    }
    const Index d = model.d_cat();
    model.projection = MatrixXd::Identity(d, d);
    model.bias = VectorXd::Zero(d);
    return model;
}

namespace {

void check_layer(const LayerRegions& layer, const AggregationModel& model, std::size_t l) {
    if (layer.layer_id != model.layer_ids[l]) {
        throw ContractError("stream " + std::to_string(l) + " is layer " + std::to_string(layer.layer_id) +
                            ", model expects " + std::to_string(model.layer_ids[l]));
    }
    if (layer.normalized.cols() != model.layer_depths[l]) {
        throw ContractError("layer " + std::to_string(layer.layer_id) + " has depth " +
                            std::to_string(layer.normalized.cols()) + ", model expects " +
                            std::to_string(model.layer_depths[l]));
    }
}

}  // namespace

RemapTrace remap_forward_traced(const ImageRegions& regions, const AggregationModel& model) {
    if (model.method != Method::Remap && model.method != Method::Rmac) {
        throw ContractError("regional forward pass requires a REMAP or RMAC model");
    }
    if (regions.layers.size() != model.layer_ids.size()) {
        throw ContractError("image has " + std::to_string(regions.layers.size()) + " layers, model expects " +
                            std::to_string(model.layer_ids.size()));
    }
    RemapTrace trace;
    trace.concat.resize(model.d_cat());
    Index offset = 0;
    for (std::size_t l = 0; l < regions.layers.size(); ++l) {
        const auto& layer = regions.layers[l];
        check_layer(layer, model, l);
        RemapTrace::Stream stream;
        stream.sum = weighted_region_sum(layer.normalized, model.alpha[l]);
        stream.norm = stream.sum.norm();
        stream.normalized = stream.norm > 0.0 ? VectorXd(stream.sum / stream.norm) : VectorXd(stream.sum);
        trace.concat.segment(offset, stream.normalized.size()) = stream.normalized;
        offset += stream.normalized.size();
        trace.streams.push_back(std::move(stream));
    }
    trace.projected = model.projection * trace.concat + model.bias;
    trace.projected_norm = trace.projected.norm();
    trace.descriptor = trace.projected_norm > 0.0 ? VectorXd(trace.projected / trace.projected_norm)
                                                  : VectorXd(trace.projected);
    return trace;
}

VectorXd pre_projection(const ImageRegions& regions, const AggregationModel& model) {
    return remap_forward_traced(regions, model).concat;
}

Descriptor remap_forward(const ImageRegions& regions, const AggregationModel& model) {
    return Descriptor{{}, remap_forward_traced(regions, model).descriptor};
}

Descriptor remap_forward(const std::map<int, FeatureMap>& maps, const AggregationModel& model) {
    return remap_forward(prepare_regions(maps, model.layer_ids, model.grid_scale), model);
}

VectorXd global_pool(const FeatureMap& map, Method method) {
    if (method != Method::Mac && method != Method::Spoc) throw ContractError("global_pool supports MAC and SPoC");
    VectorXd out(map.depth);
    if (method == Method::Mac) {
        out.setConstant(-std::numeric_limits<double>::infinity());
    } else {
        out.setZero();
    }
    for (std::size_t cell = 0; cell < map.cells(); ++cell) {
        const float* v = map.data.data() + cell * map.depth;
        for (Index c = 0; c < out.size(); ++c) {
            if (method == Method::Mac) {
                out[c] = std::max(out[c], static_cast<double>(v[c]));
            } else {
                out[c] += v[c];
            }
        }
    }
    return out;
}

VectorXd project(const VectorXd& p, const AggregationModel& model) {
    if (p.size() != model.projection.cols()) throw ContractError("pre-projection vector length differs from D_cat");
    return l2_normalized(model.projection * p + model.bias);
}

Descriptor baseline_forward(const FeatureMap& map, Method method, const MatrixXd& projection, const VectorXd& bias,
                            int grid_scale) {
    if (method == Method::Remap) throw ContractError("baseline_forward takes MAC, SPoC or RMAC");
    const int layer = static_cast<int>(map.layer_id);
    const std::map<int, FeatureMap> maps{{layer, map}};
    std::vector<std::size_t> counts;
    if (method == Method::Rmac) {
        counts.push_back(build_grid(static_cast<int>(map.width), static_cast<int>(map.height), grid_scale).size());
    }
    auto model = make_identity_model(method, {layer},
                                     {static_cast<int>(map.depth)}, counts, grid_scale);
    model.projection = projection;
    model.bias = bias;
    model.validate();
    return describe(maps, model);
}

VectorXd pre_projection(const std::map<int, FeatureMap>& maps, const AggregationModel& model) {
    if (model.method == Method::Mac || model.method == Method::Spoc) {
        const auto it = maps.find(model.layer_ids.front());
        if (it == maps.end()) throw DataError("missing feature map for layer " + std::to_string(model.layer_ids.front()));
        return global_pool(it->second, model.method);
    }
    return pre_projection(prepare_regions(maps, model.layer_ids, model.grid_scale), model);
}

Descriptor describe(const std::map<int, FeatureMap>& maps, const AggregationModel& model) {
    if (model.method == Method::Mac || model.method == Method::Spoc) {
        return Descriptor{{}, project(pre_projection(maps, model), model)};
    }
    return remap_forward(maps, model);
}

// ---------------------------------------------------------------------------
// Whitening and fusion

Whitening fit_whitening(const MatrixXd& samples, Index d_out, std::optional<double> regularizer) {
    const Index n = samples.rows();
    const Index dim = samples.cols();
    if (d_out < 1 || d_out > dim) {
        throw ContractError("whitening output dim " + std::to_string(d_out) + " must lie in [1, " +
                            std::to_string(dim) + "]");
    }
    if (n < d_out + 1) {
        throw DataError("whitening to " + std::to_string(d_out) + " dims needs at least " + std::to_string(d_out + 1) +
                        " training vectors, got " + std::to_string(n));
    }
    if (!samples.allFinite()) throw NumericError("whitening input contains non-finite values");

    const VectorXd mean = samples.colwise().mean().transpose();
    const MatrixXd centered = samples.rowwise() - mean.transpose();
    const MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
    // Eigen sorts ascending; flip to descending.
    const VectorXd values = solver.eigenvalues().reverse();
    const MatrixXd vectors = solver.eigenvectors().rowwise().reverse();

    const double top = std::max(values[0], 0.0);
    const double tol = top * 1e-10 * static_cast<double>(dim);
    Index rank = 0;
    for (Index i = 0; i < dim; ++i) {
        if (values[i] > tol) ++rank;
    }
    if (rank < d_out) {
        throw NumericError("training vectors have effective rank " + std::to_string(rank) + ", below requested D_out " +
                           std::to_string(d_out));
    }

    Whitening w;
    w.regularizer = regularizer.value_or(1e-6 * cov.trace() / static_cast<double>(dim));
    w.effective_rank = rank;
    w.eigenvalues = values.head(d_out);
    w.projection.resize(d_out, dim);
    for (Index k = 0; k < d_out; ++k) {
        VectorXd axis = vectors.col(k);
        // Sign convention: largest-magnitude component positive.
        Index arg = 0;
        axis.cwiseAbs().maxCoeff(&arg);
        if (axis[arg] < 0.0) axis = -axis;
        w.projection.row(k) = axis.transpose() / std::sqrt(values[k] + w.regularizer);
    }
    w.bias = -w.projection * mean;
    return w;
}

VectorXd multiscale_fuse(const VectorXd& x1, const VectorXd& x2, bool normalize) {
    if (x1.size() != x2.size()) {
        throw ContractError("multiscale_fuse length mismatch: " + std::to_string(x1.size()) + " vs " +
                            std::to_string(x2.size()));
    }
    VectorXd fused = 2.0 * x1 + 1.4 * x2;
    return normalize ? l2_normalized(fused) : fused;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr std::string_view kModelMagic = "RMAPMODL";
constexpr std::string_view kDescMagic = "RMAPDESC";
constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

void save_model(const AggregationModel& model, const std::filesystem::path& path) {
    model.validate();
    nlohmann::json header;
    header["method"] = std::string(to_string(model.method));
    header["grid_scale"] = model.grid_scale;
    header["layer_ids"] = model.layer_ids;
    header["layer_depths"] = model.layer_depths;
    std::vector<std::size_t> counts;
    for (const auto& a : model.alpha) counts.push_back(a.size());
    header["region_counts"] = counts;
    header["d_out"] = model.d_out();
    header["d_cat"] = model.d_cat();
    header["alpha_init"] = model.alpha_init;
    const std::string text = header.dump();

    binary::Writer out;
    out.bytes(kModelMagic);
    out.u32(kFormatVersion);
    out.u32(static_cast<std::uint32_t>(text.size()));
    out.bytes(text);
    for (const auto& a : model.alpha) {
        for (double v : a) out.f32(static_cast<float>(v));
    }
    for (Index r = 0; r < model.projection.rows(); ++r) {
        for (Index c = 0; c < model.projection.cols(); ++c) out.f32(static_cast<float>(model.projection(r, c)));
    }
    for (Index r = 0; r < model.bias.size(); ++r) out.f32(static_cast<float>(model.bias[r]));
    out.save(path);
}

AggregationModel load_model(const std::filesystem::path& path) {
    auto in = binary::Reader::open(path);
    if (in.size() < 16 || in.bytes(8) != kModelMagic) throw FormatError(path.string() + ": not a model file");
    if (in.u32() != kFormatVersion) throw FormatError(path.string() + ": unsupported model version");
    const auto header_len = in.u32();
    AggregationModel model;
    std::vector<std::size_t> counts;
    Index d_out = 0;
    try {
        const auto header = nlohmann::json::parse(in.bytes(header_len));
        model.method = parse_method(header.at("method").get<std::string>());
        model.grid_scale = header.at("grid_scale").get<int>();
        model.layer_ids = header.at("layer_ids").get<std::vector<int>>();
        model.layer_depths = header.at("layer_depths").get<std::vector<int>>();
        counts = header.at("region_counts").get<std::vector<std::size_t>>();
        d_out = header.at("d_out").get<Index>();
        model.alpha_init = header.value("alpha_init", "ones");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad model header: " + e.what());
    }
    const Index d_cat = model.d_cat();
    std::size_t alpha_total = 0;
    for (auto c : counts) alpha_total += c;
    const std::size_t expected = 4 * (alpha_total + static_cast<std::size_t>(d_out * d_cat + d_out));
    if (in.remaining() != expected) {
        throw CorruptionError(path.string() + ": model payload is " + std::to_string(in.remaining()) +
                              " bytes, header implies " + std::to_string(expected));
    }
    for (auto c : counts) {
        std::vector<double> a(c);
        for (auto& v : a) v = in.f32();
        model.alpha.push_back(std::move(a));
    }
    model.projection.resize(d_out, d_cat);
    for (Index r = 0; r < d_out; ++r) {
        for (Index c = 0; c < d_cat; ++c) model.projection(r, c) = in.f32();
    }
    model.bias.resize(d_out);
    for (Index r = 0; r < d_out; ++r) model.bias[r] = in.f32();
    try {
        model.validate();
    } catch (const ContractError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
    return model;
}

void save_descriptors(const DescriptorSet& set, const std::filesystem::path& path) {
    binary::Writer out;
    out.bytes(kDescMagic);
    out.u32(kFormatVersion);
    out.u32(static_cast<std::uint32_t>(set.dim()));
    out.u32(static_cast<std::uint32_t>(set.size()));
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (set.vectors[i].size() != set.dim()) throw ContractError("descriptor " + set.ids[i] + " has a different length");
        out.u32(static_cast<std::uint32_t>(set.ids[i].size()));
        out.bytes(set.ids[i]);
        for (Index c = 0; c < set.dim(); ++c) out.f32(static_cast<float>(set.vectors[i][c]));
    }
    out.save(path);
}

DescriptorSet load_descriptors(const std::filesystem::path& path) {
    auto in = binary::Reader::open(path);
    if (in.size() < 20 || in.bytes(8) != kDescMagic) throw FormatError(path.string() + ": not a descriptor file");
    if (in.u32() != kFormatVersion) throw FormatError(path.string() + ": unsupported descriptor version");
    const auto dim = in.u32();
    const auto count = in.u32();
    DescriptorSet set;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = in.u32();
        set.ids.push_back(in.bytes(len));
        VectorXd v(dim);
        for (std::uint32_t c = 0; c < dim; ++c) v[c] = in.f32();
        set.vectors.push_back(std::move(v));
    }
    if (in.remaining() != 0) throw CorruptionError(path.string() + ": trailing bytes after descriptors");
    return set;
}

}  // namespace remap
