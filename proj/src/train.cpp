#include "remap/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "remap/error.hpp"
#include "remap/parallel.hpp"
#include "remap/rng.hpp"

namespace remap {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

double triplet_loss(double dqm2, double dqn2, double margin) {
    return 0.5 * std::max(0.0, margin + dqm2 - dqn2);
}

std::string_view to_string(AlphaInit init) { return init == AlphaInit::Ones ? "ones" : "entropy"; }

AlphaInit parse_alpha_init(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "ones") return AlphaInit::Ones;
    if (lower == "entropy") return AlphaInit::Entropy;
    throw ConfigError("unknown alpha_init '" + std::string(name) + "' (expected ones or entropy)");
}

void TrainConfig::validate() const {
    std::vector<std::string> problems;
    if (!(margin >= 0.0)) problems.emplace_back("train.margin must be >= 0");
    if (!(learning_rate >= 0.0)) problems.emplace_back("train.learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) problems.emplace_back("train.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) problems.emplace_back("train.weight_decay must be >= 0");
    if (accumulate == 0) problems.emplace_back("train.accumulate must be positive");
    if (remine_every == 0) problems.emplace_back("train.remine_every must be positive");
    if (epochs == 0) problems.emplace_back("train.epochs must be positive");
    if (checkpoint_every > 0 && checkpoint_dir.empty()) {
        problems.emplace_back("train.checkpoint_every needs a checkpoint directory");
    }
    if (!problems.empty()) {
        std::string msg = "invalid training config:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
}

TrainingSet load_training_set(const DatasetManifest& manifest, std::span<const int> layer_ids, int max_scale,
                              std::size_t scale_index, std::size_t workers) {
    std::vector<const ManifestEntry*> labeled;
    for (const auto& e : manifest.entries) {
        if (e.class_id) labeled.push_back(&e);
    }
    TrainingSet set;
    set.ids.resize(labeled.size());
    set.class_ids.resize(labeled.size());
    set.regions.resize(labeled.size());
    parallel_for(labeled.size(), workers, [&](std::size_t i) {
        set.ids[i] = labeled[i]->image_id;
        set.class_ids[i] = *labeled[i]->class_id;
        set.regions[i] = prepare_regions(labeled[i]->load_maps(layer_ids, scale_index), layer_ids, max_scale);
    });
    return set;
}

AggregationModel initial_model(const TrainingSet& set, Method method, std::vector<int> layer_ids, int max_scale,
                               AlphaInit init, const EntropyWeights* entropy, Index d_out,
                               std::optional<double> regularizer) {
    if (method != Method::Remap && method != Method::Rmac) {
        throw ContractError("initial_model builds REMAP or RMAC models");
    }
    if (set.size() == 0) throw DataError("empty training set");
    if (method == Method::Rmac && init != AlphaInit::Ones) throw ConfigError("RMAC fixes alpha to ones");
    const auto& first = set.regions.front();
    bool same_layers = first.layers.size() == layer_ids.size();
    for (std::size_t l = 0; same_layers && l < layer_ids.size(); ++l) {
        same_layers = first.layers[l].layer_id == layer_ids[l];
    }
    if (!same_layers) throw ContractError("training set layers differ from the requested layer_ids");
    std::vector<int> depths;
    std::vector<std::size_t> counts;
    for (const auto& layer : first.layers) {
        depths.push_back(static_cast<int>(layer.normalized.cols()));
        counts.push_back(static_cast<std::size_t>(layer.normalized.rows()));
    }
    auto model = make_identity_model(method, std::move(layer_ids), std::move(depths), counts, max_scale);
    model.alpha_init = std::string(to_string(init));
    if (init == AlphaInit::Entropy) {
        if (entropy == nullptr) throw ConfigError("alpha_init=entropy requires entropy weights");
        for (std::size_t l = 0; l < model.layer_ids.size(); ++l) {
            model.alpha[l] = entropy->for_layer(model.layer_ids[l], counts[l]);
        }
    }
    MatrixXd samples(static_cast<Index>(set.size()), model.d_cat());
    for (std::size_t i = 0; i < set.size(); ++i) {
        samples.row(static_cast<Index>(i)) = pre_projection(set.regions[i], model).transpose();
    }
    const auto w = fit_whitening(samples, d_out > 0 ? d_out : model.d_cat(), regularizer);
    model.projection = w.projection;
    model.bias = w.bias;
    model.validate();
    return model;
}

TripletCache forward_triplet(const ImageRegions& query, const ImageRegions& match, const ImageRegions& nonmatch,
                             const AggregationModel& model) {
    TripletCache cache;
    cache.regions = {&query, &match, &nonmatch};
    for (std::size_t k = 0; k < 3; ++k) cache.traces[k] = remap_forward_traced(*cache.regions[k], model);
    return cache;
}

// ---------------------------------------------------------------------------
// Gradients

Gradients Gradients::zeros_like(const AggregationModel& model) {
    Gradients g;
    for (const auto& a : model.alpha) g.alpha.emplace_back(a.size(), 0.0);
    g.projection = MatrixXd::Zero(model.projection.rows(), model.projection.cols());
    g.bias = VectorXd::Zero(model.bias.size());
    return g;
}

void Gradients::scale(double factor) {
    for (auto& a : alpha) {
        for (auto& v : a) v *= factor;
    }
    projection *= factor;
    bias *= factor;
}

bool Gradients::all_finite() const {
    for (const auto& a : alpha) {
        for (double v : a) {
            if (!std::isfinite(v)) return false;
        }
    }
    return projection.allFinite() && bias.allFinite();
}

void TripletGradient::accumulate(Gradients& into) const {
    if (!active) return;
    for (std::size_t k = 0; k < 3; ++k) {
        into.projection.noalias() += projected_grad[k] * concat[k].transpose();
        into.bias += projected_grad[k];
    }
    for (std::size_t l = 0; l < alpha.size(); ++l) {
        for (std::size_t i = 0; i < alpha[l].size(); ++i) into.alpha[l][i] += alpha[l][i];
    }
}

TripletGradient backward(const TripletCache& cache, const AggregationModel& model, double margin) {
    for (std::size_t k = 0; k < 3; ++k) {
        if (cache.regions[k] == nullptr || cache.traces[k].descriptor.size() == 0 ||
            cache.traces[k].streams.size() != model.layer_ids.size()) {
            throw ContractError("backward called without a complete forward cache");
        }
    }
    const auto& xq = cache.traces[0].descriptor;
    const auto& xm = cache.traces[1].descriptor;
    const auto& xn = cache.traces[2].descriptor;
    const double dqm2 = (xq - xm).squaredNorm();
    const double dqn2 = (xq - xn).squaredNorm();

    TripletGradient out;
    out.loss = triplet_loss(dqm2, dqn2, margin);
    out.active = margin + dqm2 - dqn2 > 0.0;
    for (const auto& a : model.alpha) out.alpha.emplace_back(a.size(), 0.0);
    for (std::size_t k = 0; k < 3; ++k) {
        out.concat[k] = cache.traces[k].concat;
        out.projected_grad[k] = VectorXd::Zero(model.d_out());
    }
    if (!out.active) return out;

    // dL/dx for query, match, non-match.
    const std::array<VectorXd, 3> grad_x = {xn - xm, xm - xq, xq - xn};

    for (std::size_t k = 0; k < 3; ++k) {
        const auto& trace = cache.traces[k];
        if (trace.projected_norm <= 0.0) continue;
        // Through x = y / ||y||.
        const auto& x = trace.descriptor;
        VectorXd grad_y = (grad_x[k] - x * x.dot(grad_x[k])) / trace.projected_norm;
        const VectorXd grad_p = model.projection.transpose() * grad_y;
        out.projected_grad[k] = std::move(grad_y);

        Index offset = 0;
        for (std::size_t l = 0; l < trace.streams.size(); ++l) {
            const auto& stream = trace.streams[l];
            const Index depth = stream.sum.size();
            if (stream.norm > 0.0) {
                const VectorXd grad_u = grad_p.segment(offset, depth);
                const VectorXd grad_s = (grad_u - stream.normalized * stream.normalized.dot(grad_u)) / stream.norm;
                const auto& regions = cache.regions[k]->layers[l].normalized;
                const VectorXd per_region = regions * grad_s;
                for (Index i = 0; i < per_region.size(); ++i) out.alpha[l][static_cast<std::size_t>(i)] += per_region[i];
            }
            offset += depth;
        }
    }
    return out;
}

Gradients triplet_gradients(const TripletCache& cache, const AggregationModel& model, double margin) {
    auto g = Gradients::zeros_like(model);
    backward(cache, model, margin).accumulate(g);
    return g;
}

// ---------------------------------------------------------------------------
// Mining

std::vector<std::pair<std::size_t, std::size_t>> matching_pairs(std::span<const int> class_ids) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < class_ids.size(); ++i) {
        for (std::size_t j = i + 1; j < class_ids.size(); ++j) {
            if (class_ids[i] == class_ids[j]) pairs.emplace_back(i, j);
        }
    }
    return pairs;
}

std::vector<Triplet> mine_hard_negatives(std::span<const VectorXd> descriptors, std::span<const int> class_ids,
                                         std::span<const std::string> ids,
                                         std::span<const std::pair<std::size_t, std::size_t>> pairs) {
    if (descriptors.size() != class_ids.size() || ids.size() != class_ids.size()) {
        throw ContractError("mine_hard_negatives: descriptors, classes and ids differ in length");
    }
    std::vector<Triplet> triplets;
    triplets.reserve(pairs.size());
    for (const auto& [q, m] : pairs) {
        std::size_t best = descriptors.size();
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < descriptors.size(); ++j) {
            if (class_ids[j] == class_ids[q]) continue;
            const double d = (descriptors[j] - descriptors[q]).squaredNorm();
            if (d < best_dist || (d == best_dist && best < descriptors.size() && ids[j] < ids[best])) {
                best = j;
                best_dist = d;
            }
        }
        if (best == descriptors.size()) {
            throw DataError("no non-matching candidate for query " + ids[q] + " (empty negative pool)");
        }
        triplets.push_back(Triplet{q, m, best});
    }
    return triplets;
}

std::vector<Triplet> mine_hard_negatives(const AggregationModel& model, const TrainingSet& set,
                                         std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                         std::size_t workers) {
    std::vector<VectorXd> descriptors(set.size());
    parallel_for(set.size(), workers,
                 [&](std::size_t i) { descriptors[i] = remap_forward(set.regions[i], model).values; });
    std::vector<std::string> bad;
    for (std::size_t i = 0; i < set.size(); ++i) {
        if (!descriptors[i].allFinite()) bad.push_back(set.ids[i]);
    }
    if (!bad.empty()) {
        std::string msg = "non-finite descriptor while mining for " + std::to_string(bad.size()) + " image(s):";
        for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 5); ++i) msg += " " + bad[i];
        if (bad.size() > 5) msg += " ...";
        throw NumericError(msg);
    }
    return mine_hard_negatives(descriptors, set.class_ids, set.ids, pairs);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct Velocity {
    std::vector<std::vector<double>> alpha;
    MatrixXd projection;
    VectorXd bias;
};

void sgd_step(AggregationModel& model, const Gradients& grad, Velocity& v, const TrainConfig& config,
              bool update_alpha) {
    const double lr = config.learning_rate;
    const double mu = config.momentum;
    const double wd = config.weight_decay;
    if (update_alpha) {
        for (std::size_t l = 0; l < model.alpha.size(); ++l) {
            for (std::size_t i = 0; i < model.alpha[l].size(); ++i) {
                double& a = model.alpha[l][i];
                double& vel = v.alpha[l][i];
                vel = mu * vel - lr * (grad.alpha[l][i] + wd * a);
                a = std::max(0.0, a + vel);
            }
        }
    }
    v.projection = mu * v.projection - lr * (grad.projection + wd * model.projection);
    model.projection += v.projection;
    v.bias = mu * v.bias - lr * (grad.bias + wd * model.bias);
    model.bias += v.bias;
}

}  // namespace

TrainResult train(AggregationModel model, const TrainingSet& set, const TrainConfig& config) {
    config.validate();
    model.validate();
    if (model.method != Method::Remap && model.method != Method::Rmac) {
        throw ConfigError("training supports REMAP and RMAC models only");
    }
    if (set.size() == 0) throw DataError("empty training set");

    const auto pairs = matching_pairs(set.class_ids);
    if (pairs.empty()) throw DataError("training set has no same-class pair");

    // Triplet stream: one shuffled pass over the matching pairs per epoch.
    SeededRng rng(config.seed);
    std::vector<std::pair<std::size_t, std::size_t>> stream;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        auto epoch = pairs;
        rng.shuffle(epoch);
        stream.insert(stream.end(), epoch.begin(), epoch.end());
    }
    if (config.max_triplets > 0 && stream.size() > config.max_triplets) stream.resize(config.max_triplets);

    const bool update_alpha = model.method == Method::Remap;
    Velocity velocity;
    for (const auto& a : model.alpha) velocity.alpha.emplace_back(a.size(), 0.0);
    velocity.projection = MatrixXd::Zero(model.projection.rows(), model.projection.cols());
    velocity.bias = VectorXd::Zero(model.bias.size());

    TrainResult result;
    std::vector<Triplet> mined(stream.size());
    std::size_t mined_until = 0;

    const std::size_t windows = (stream.size() + config.accumulate - 1) / config.accumulate;
    for (std::size_t w = 0; w < windows; ++w) {
        const std::size_t begin = w * config.accumulate;
        const std::size_t end = std::min(stream.size(), begin + config.accumulate);
        // Parameters only change between windows, so a group mined here sees
        // the same model as the rest of this window.
        while (mined_until < end) {
            const std::size_t group_end = std::min(stream.size(), mined_until + config.remine_every);
            const auto group = std::span(stream).subspan(mined_until, group_end - mined_until);
            const auto triplets = mine_hard_negatives(model, set, group, config.workers);
            std::copy(triplets.begin(), triplets.end(), mined.begin() + static_cast<std::ptrdiff_t>(mined_until));
            mined_until = group_end;
        }

        std::vector<TripletGradient> slots(end - begin);
        parallel_for(slots.size(), config.workers, [&](std::size_t s) {
            const Triplet& t = mined[begin + s];
            const auto cache = forward_triplet(set.regions[t.query], set.regions[t.match], set.regions[t.nonmatch], model);
            slots[s] = backward(cache, model, config.margin);
        });

        auto grad = Gradients::zeros_like(model);
        double loss_sum = 0.0;
        std::size_t active = 0;
        for (std::size_t s = 0; s < slots.size(); ++s) {
            if (!std::isfinite(slots[s].loss)) {
                const Triplet& t = mined[begin + s];
                throw NumericError("non-finite loss at triplet " + std::to_string(begin + s) + " (" + set.ids[t.query] +
                                   ", " + set.ids[t.match] + ", " + set.ids[t.nonmatch] + ")");
            }
            slots[s].accumulate(grad);
            if (!grad.all_finite()) {
                const Triplet& t = mined[begin + s];
                throw NumericError("non-finite gradient at triplet " + std::to_string(begin + s) + " (" +
                                   set.ids[t.query] + ", " + set.ids[t.match] + ", " + set.ids[t.nonmatch] + ")");
            }
            loss_sum += slots[s].loss;
            active += slots[s].active ? 1 : 0;
        }
        const double count = static_cast<double>(slots.size());
        grad.scale(1.0 / count);
        sgd_step(model, grad, velocity, config, update_alpha);

        result.trace.push_back(WindowStats{w, loss_sum / count, static_cast<double>(active) / count});
        result.triplets_seen = end;

        if (config.checkpoint_every > 0 && (w + 1) % config.checkpoint_every == 0) {
            std::ostringstream name;
            name << "checkpoint_" << std::setw(6) << std::setfill('0') << (w + 1) << ".bin";
            save_model(model, config.checkpoint_dir / name.str());
        }
    }
    result.model = std::move(model);
    return result;
}

void save_loss_trace(std::span<const WindowStats> trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "window_index,mean_loss,active_fraction\n";
    out << std::setprecision(17);
    for (const auto& w : trace) out << w.window_index << ',' << w.mean_loss << ',' << w.active_fraction << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace remap
