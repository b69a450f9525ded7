#include "remap/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "remap/error.hpp"
#include "remap/parallel.hpp"
#include "remap/rng.hpp"

namespace remap {

namespace {

using Pair = std::pair<std::size_t, std::size_t>;

// Enumerating is exact but quadratic; above this many candidate pairs we
// fall back to rejection sampling of distinct pairs.
constexpr std::size_t kEnumerationLimit = 4'000'000;

std::vector<Pair> draw_pairs(std::span<const int> classes, bool matching, std::size_t want, SeededRng& rng) {
    const std::size_t n = classes.size();
    const std::size_t total = n * (n - 1) / 2;
    if (total <= kEnumerationLimit) {
        std::vector<Pair> all;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if ((classes[i] == classes[j]) == matching) all.emplace_back(i, j);
            }
        }
        rng.shuffle(all);
        if (all.size() > want) all.resize(want);
        return all;
    }
    std::set<Pair> seen;
    std::vector<Pair> out;
    // Large pools: give up after a generous number of misses so a pool with
    // very few valid pairs still terminates.
    std::size_t misses = 0;
    while (out.size() < want && misses < 100 * want + 1000) {
        std::size_t i = rng.below(n);
        std::size_t j = rng.below(n);
        if (i == j) continue;
        if (i > j) std::swap(i, j);
        if ((classes[i] == classes[j]) != matching || !seen.emplace(i, j).second) {
            ++misses;
            continue;
        }
        out.emplace_back(i, j);
    }
    return out;
}

}  // namespace

std::vector<PairDistanceSample> collect_pair_distances(std::span<const int> class_ids,
                                                       std::span<const ImageRegions> regions,
                                                       const PairSamplingConfig& config) {
    if (class_ids.size() != regions.size()) throw ContractError("class_ids and regions differ in length");
    if (regions.empty()) throw DataError("no labeled images for pair sampling");

    const auto& reference = regions.front();
    for (std::size_t i = 1; i < regions.size(); ++i) {
        if (regions[i].layers.size() != reference.layers.size()) throw DataError("images disagree on layer count");
        for (std::size_t l = 0; l < reference.layers.size(); ++l) {
            const auto& a = regions[i].layers[l].normalized;
            const auto& b = reference.layers[l].normalized;
            if (a.rows() != b.rows() || a.cols() != b.cols()) {
                throw DataError("layer " + std::to_string(reference.layers[l].layer_id) +
                                " has a different region grid or depth across images; pair distances need matching grids");
            }
        }
    }

    SeededRng match_rng(config.seed);
    SeededRng other_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
    const auto matching = draw_pairs(class_ids, true, config.pair_budget, match_rng);
    if (matching.empty()) throw DataError("insufficient data: no matching (same-class) pair available");
    const auto nonmatching = draw_pairs(class_ids, false, matching.size(), other_rng);
    if (nonmatching.empty()) throw DataError("insufficient data: no non-matching pair available");

    std::vector<std::pair<Pair, PairLabel>> pairs;
    for (const auto& p : matching) pairs.emplace_back(p, PairLabel::Matching);
    for (const auto& p : nonmatching) pairs.emplace_back(p, PairLabel::NonMatching);

    std::size_t per_pair = 0;
    for (const auto& layer : reference.layers) per_pair += static_cast<std::size_t>(layer.normalized.rows());

    std::vector<PairDistanceSample> samples(pairs.size() * per_pair);
    parallel_for(pairs.size(), config.workers, [&](std::size_t p) {
        const auto& [ab, label] = pairs[p];
        const auto& a = regions[ab.first];
        const auto& b = regions[ab.second];
        std::size_t slot = p * per_pair;
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            const auto& ra = a.layers[l].normalized;
            const auto& rb = b.layers[l].normalized;
            for (Eigen::Index r = 0; r < ra.rows(); ++r) {
                samples[slot++] = PairDistanceSample{static_cast<int>(r), a.layers[l].layer_id,
                                                     (ra.row(r) - rb.row(r)).norm(), label};
            }
        }
    });
    return samples;
}

std::vector<PairDistanceSample> collect_pair_distances(const DatasetManifest& manifest,
                                                       const PairSamplingConfig& config) {
    std::vector<const ManifestEntry*> labeled;
    for (const auto& e : manifest.entries) {
        if (e.class_id) labeled.push_back(&e);
    }
    std::vector<int> classes(labeled.size());
    std::vector<ImageRegions> regions(labeled.size());
    parallel_for(labeled.size(), config.workers, [&](std::size_t i) {
        classes[i] = *labeled[i]->class_id;
        regions[i] = prepare_regions(labeled[i]->load_maps(config.layer_ids, config.scale_index), config.layer_ids,
                                     config.max_scale);
    });
    return collect_pair_distances(classes, regions, config);
}

double kl_divergence(std::span<const double> matching, std::span<const double> nonmatching, int bins,
                     double epsilon) {
    if (matching.empty() || nonmatching.empty()) throw ContractError("kl_divergence needs non-empty samples");
    if (bins < 2) throw ContractError("kl_divergence needs at least 2 bins");
    if (!(epsilon > 0.0)) throw ContractError("kl_divergence smoothing must be positive");

    // Range [min(0, lowest), highest]: exactly [0, max] for distances.
    double low = 0.0;
    double top = 0.0;
    for (auto list : {matching, nonmatching}) {
        for (double v : list) {
            if (!std::isfinite(v)) throw ContractError("kl_divergence inputs must be finite");
            low = std::min(low, v);
            top = std::max(top, v);
        }
    }
    const double width = top - low;

    auto histogram = [&](std::span<const double> values) {
        std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
        for (double v : values) {
            std::size_t bin = 0;
            if (width > 0.0) {
                bin = std::min(static_cast<std::size_t>(bins - 1),
                               static_cast<std::size_t>(std::floor((v - low) / width * bins)));
            }
            counts[bin] += 1.0;
        }
        const double total = static_cast<double>(values.size()) + bins * epsilon;
        for (auto& c : counts) c = (c + epsilon) / total;
        return counts;
    };
    const auto p = histogram(matching);
    const auto q = histogram(nonmatching);
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
    return std::max(kl, 0.0);
}

std::vector<double> EntropyWeights::for_layer(int layer_id, std::size_t region_count) const {
    std::vector<double> out;
    for (const auto& e : entries) {
        if (e.layer_id != layer_id) continue;
        if (e.region_index != static_cast<int>(out.size())) {
            throw DataError("entropy weights for layer " + std::to_string(layer_id) + " are not contiguous");
        }
        out.push_back(e.weight);
    }
    if (out.size() != region_count) {
        throw DataError("entropy weights hold " + std::to_string(out.size()) + " regions for layer " +
                        std::to_string(layer_id) + ", grid has " + std::to_string(region_count));
    }
    return out;
}

EntropyWeights init_weights(std::span<const PairDistanceSample> samples, const KlConfig& config) {
    struct Lists {
        std::vector<double> matching;
        std::vector<double> nonmatching;
    };
    std::map<std::pair<int, int>, Lists> by_key;
    for (const auto& s : samples) {
        auto& lists = by_key[{s.layer_id, s.region_index}];
        (s.label == PairLabel::Matching ? lists.matching : lists.nonmatching).push_back(s.distance);
    }
    if (by_key.empty()) throw DataError("no pair distance samples");

    std::vector<std::string> undersampled;
    for (const auto& [key, lists] : by_key) {
        if (lists.matching.size() < config.min_samples || lists.nonmatching.size() < config.min_samples) {
            std::ostringstream s;
            s << "(layer " << key.first << ", region " << key.second << ": " << lists.matching.size() << "/"
              << lists.nonmatching.size() << ")";
            undersampled.push_back(s.str());
        }
    }
    if (!undersampled.empty()) {
        std::string msg = "undersampled keys, need " + std::to_string(config.min_samples) + " of each label:";
        for (const auto& k : undersampled) msg += " " + k;
        throw DataError(msg);
    }

    EntropyWeights weights;
    weights.config = config;
    for (auto& [key, lists] : by_key) {
        std::sort(lists.matching.begin(), lists.matching.end());
        std::sort(lists.nonmatching.begin(), lists.nonmatching.end());
        const double w = config.direction == KlDirection::MatchingToNonMatching
                             ? kl_divergence(lists.matching, lists.nonmatching, config.bins, config.epsilon)
                             : kl_divergence(lists.nonmatching, lists.matching, config.bins, config.epsilon);
        weights.entries.push_back({key.first, key.second, w, lists.matching.size(), lists.nonmatching.size()});
    }
    return weights;
}

void save_weights(const EntropyWeights& weights, const std::filesystem::path& path) {
    nlohmann::json out;
    out["direction"] = weights.config.direction == KlDirection::MatchingToNonMatching ? "KL(match||nonmatch)"
                                                                                       : "KL(nonmatch||match)";
    out["bins"] = weights.config.bins;
    out["epsilon"] = weights.config.epsilon;
    out["min_samples"] = weights.config.min_samples;
    out["weights"] = nlohmann::json::array();
    for (const auto& e : weights.entries) {
        out["weights"].push_back({{"layer_id", e.layer_id},
                                  {"region_index", e.region_index},
                                  {"weight", e.weight},
                                  {"n_match", e.n_match},
                                  {"n_nonmatch", e.n_nonmatch}});
    }
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open for writing: " + path.string());
    file << out.dump(2) << '\n';
    if (!file) throw IoError("write failed: " + path.string());
}

EntropyWeights load_weights(const std::filesystem::path& path) {
    std::ifstream file(path);
    if (!file) throw IoError("cannot open entropy weights: " + path.string());
    EntropyWeights weights;
    try {
        const auto in = nlohmann::json::parse(file);
        weights.config.bins = in.value("bins", 64);
        weights.config.epsilon = in.value("epsilon", 1e-6);
        weights.config.min_samples = in.value("min_samples", std::size_t{50});
        weights.config.direction = in.value("direction", std::string("KL(match||nonmatch)")) == "KL(nonmatch||match)"
                                       ? KlDirection::NonMatchingToMatching
                                       : KlDirection::MatchingToNonMatching;
        for (const auto& w : in.at("weights")) {
            EntropyWeights::Entry e;
            e.layer_id = w.at("layer_id").get<int>();
            e.region_index = w.at("region_index").get<int>();
            e.weight = w.at("weight").get<double>();
            e.n_match = w.value("n_match", std::size_t{0});
            e.n_nonmatch = w.value("n_nonmatch", std::size_t{0});
            if (!std::isfinite(e.weight) || e.weight < 0.0) {
                throw DataError(path.string() + ": negative or non-finite weight");
            }
            weights.entries.push_back(e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    std::sort(weights.entries.begin(), weights.entries.end(), [](const auto& a, const auto& b) {
        return std::tie(a.layer_id, a.region_index) < std::tie(b.layer_id, b.region_index);
    });
    return weights;
}

}  // namespace remap
