#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "remap/entropy.hpp"
#include "remap/error.hpp"
#include "remap/synth.hpp"
#include "support.hpp"

using namespace remap;
using remap::testing::random_map;
using remap::testing::TempDir;

namespace {

ImageRegions regions_of(const std::vector<FeatureMap>& maps, int scales) {
    std::map<int, FeatureMap> by_layer;
    std::vector<int> ids;
    for (const auto& m : maps) {
        by_layer.emplace(static_cast<int>(m.layer_id), m);
        ids.push_back(static_cast<int>(m.layer_id));
    }
    return prepare_regions(by_layer, ids, scales);
}

std::vector<double> distances(std::span<const PairDistanceSample> samples, int layer, int region, PairLabel label) {
    std::vector<double> out;
    for (const auto& s : samples) {
        if (s.layer_id == layer && s.region_index == region && s.label == label) out.push_back(s.distance);
    }
    return out;
}

// Samples for one key with the given distances.
void add(std::vector<PairDistanceSample>& out, int layer, int region, PairLabel label, std::span<const double> d) {
    for (double v : d) out.push_back(PairDistanceSample{region, layer, v, label});
}

}  // namespace

TEST_CASE("2 classes x 2 images: pairs are exhausted before the budget") {
    SeededRng rng(1);
    std::vector<ImageRegions> regions;
    for (int i = 0; i < 4; ++i) regions.push_back(regions_of({random_map(rng, 8, 6, 4, 1), random_map(rng, 4, 3, 3, 2)}, 2));
    const std::vector<int> classes{0, 0, 1, 1};
    PairSamplingConfig config;
    config.pair_budget = 10;
    config.seed = 3;
    const auto samples = collect_pair_distances(classes, regions, config);

    const std::size_t per_pair = 8 + 8;  // S=2 grid on 8x6 and on 4x3
    REQUIRE(regions[0].layers[1].normalized.rows() == 8);
    CHECK(samples.size() == 4 * per_pair);
    const auto matching = std::count_if(samples.begin(), samples.end(),
                                        [](const auto& s) { return s.label == PairLabel::Matching; });
    CHECK(static_cast<std::size_t>(matching) == 2 * per_pair);
    std::set<std::pair<int, int>> keys;
    for (const auto& s : samples) keys.emplace(s.layer_id, s.region_index);
    CHECK(keys.size() == per_pair);
    for (int layer : {1, 2}) {
        for (int r = 0; r < 8; ++r) {
            CHECK(distances(samples, layer, r, PairLabel::Matching).size() == 2);
            CHECK(distances(samples, layer, r, PairLabel::NonMatching).size() == 2);
        }
    }
}

TEST_CASE("identical images in a matching pair have zero distance everywhere") {
    SeededRng rng(2);
    const auto a = regions_of({random_map(rng, 8, 6, 4, 1)}, 3);
    const auto b = regions_of({random_map(rng, 8, 6, 4, 1)}, 3);
    const std::vector<ImageRegions> regions{a, a, b};
    const std::vector<int> classes{5, 5, 6};
    PairSamplingConfig config;
    const auto samples = collect_pair_distances(classes, regions, config);
    for (const auto& s : samples) {
        if (s.label == PairLabel::Matching) CHECK(s.distance == 0.0);
    }
}

TEST_CASE("sampling errors and determinism") {
    SeededRng rng(3);
    std::vector<ImageRegions> regions;
    for (int i = 0; i < 6; ++i) regions.push_back(regions_of({random_map(rng, 8, 6, 4, 1)}, 2));
    PairSamplingConfig config;
    config.pair_budget = 4;
    config.seed = 9;

    const std::vector<int> all_distinct{0, 1, 2, 3, 4, 5};
    CHECK_THROWS_AS(collect_pair_distances(all_distinct, regions, config), DataError);
    const std::vector<int> one_class(6, 0);
    CHECK_THROWS_AS(collect_pair_distances(one_class, regions, config), DataError);

    const std::vector<int> classes{0, 0, 0, 1, 1, 1};
    const auto a = collect_pair_distances(classes, regions, config);
    config.workers = 3;
    const auto b = collect_pair_distances(classes, regions, config);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].distance == b[i].distance);

    auto mixed = regions;
    mixed[2] = regions_of({random_map(rng, 9, 6, 4, 1)}, 2);
    CHECK_THROWS_AS(collect_pair_distances(classes, mixed, config), DataError);
}

TEST_CASE("a region carrying class signal separates matching from non-matching pairs") {
    // Region 0 (left half) holds a class pattern plus noise; region 1 (right
    // half) holds noise only.
    SeededRng rng(4);
    const int depth = 8;
    std::vector<std::vector<double>> patterns(4, std::vector<double>(depth));
    for (auto& p : patterns)
        for (auto& v : p) v = rng.uniform(0.0, 1.0);
    std::vector<ImageRegions> regions;
    std::vector<int> classes;
    for (int c = 0; c < 4; ++c) {
        for (int i = 0; i < 10; ++i) {
            FeatureMap map(4, 2, depth, 1);
            for (std::uint32_t y = 0; y < 2; ++y)
                for (std::uint32_t x = 0; x < 4; ++x)
                    for (int ch = 0; ch < depth; ++ch)
                        map.at(y, x, ch) = static_cast<float>((x < 2 ? patterns[c][ch] : 0.0) + 0.2 * rng.uniform());
            LayerRegions layer;
            layer.layer_id = 1;
            layer.grid.width = 4;
            layer.grid.height = 2;
            layer.grid.regions = {Region{0, 0, 2, 2, 1}, Region{2, 0, 4, 2, 1}};
            layer.pooled = pool_regions(map, layer.grid);
            layer.normalized.resize(2, depth);
            for (int r = 0; r < 2; ++r) {
                for (int ch = 0; ch < depth; ++ch) layer.normalized(r, ch) = layer.pooled.row(r)[ch];
                layer.normalized.row(r).normalize();
            }
            regions.push_back(ImageRegions{{layer}});
            classes.push_back(c);
        }
    }
    PairSamplingConfig config;
    config.pair_budget = 150;
    const auto samples = collect_pair_distances(classes, regions, config);

    // P(d_match < d_nonmatch) estimated over all cross pairs
    auto win_rate = [&](int region) {
        const auto m = distances(samples, 1, region, PairLabel::Matching);
        const auto n = distances(samples, 1, region, PairLabel::NonMatching);
        double wins = 0.0;
        for (double a : m)
            for (double b : n) wins += a < b ? 1.0 : (a == b ? 0.5 : 0.0);
        return wins / static_cast<double>(m.size() * n.size());
    };
    CHECK(win_rate(0) > 0.9);
    CHECK(std::abs(win_rate(1) - 0.5) < 0.15);

    const auto w = init_weights(samples, KlConfig{.bins = 16, .min_samples = 50});
    CHECK(w.for_layer(1, 2)[0] > w.for_layer(1, 2)[1]);
}

TEST_CASE("kl_divergence") {
    SUBCASE("identical lists give exactly zero") {
        SeededRng rng(5);
        std::vector<double> v(1000);
        for (auto& x : v) x = rng.uniform(0.0, 2.0);
        CHECK(kl_divergence(v, v, 64, 1e-6) == 0.0);
        const std::vector<double> same(20, 0.3);
        CHECK(kl_divergence(same, same, 8, 1e-6) == 0.0);
        const std::vector<double> zeros(5, 0.0);
        CHECK(kl_divergence(zeros, zeros, 8, 1e-6) == 0.0);
    }
    SUBCASE("unit-variance gaussians one apart give about 0.5") {
        SeededRng rng(6);
        std::vector<double> p(100000), q(100000);
        for (auto& x : p) x = rng.normal(0.0, 1.0);
        for (auto& x : q) x = rng.normal(1.0, 1.0);
        const double kl = kl_divergence(p, q, 64, 1e-6);
        CHECK(kl > 0.45);
        CHECK(kl < 0.55);
    }
    SUBCASE("two-bin closed form, decreasing in epsilon") {
        const std::vector<double> m(10, 0.1), n(10, 1.0);
        double previous = std::numeric_limits<double>::infinity();
        for (double eps : {1e-9, 1e-6, 1e-3, 1e-1, 1.0}) {
            const double p0 = (10 + eps) / (10 + 2 * eps);
            const double p1 = eps / (10 + 2 * eps);
            const double expected = (p0 - p1) * std::log((10 + eps) / eps);
            const double kl = kl_divergence(m, n, 2, eps);
            CHECK(kl == doctest::Approx(expected).epsilon(1e-12));
            CHECK(kl < previous);
            previous = kl;
        }
        CHECK(kl_divergence(m, n, 2, 1e-6) > 10.0);
    }
    SUBCASE("non-negative, zero only for identical histograms, invariant to common scaling") {
        SeededRng rng(7);
        for (int t = 0; t < 50; ++t) {
            std::vector<double> a(1 + rng.below(200)), b(1 + rng.below(200));
            for (auto& x : a) x = rng.uniform(0.0, 1.0 + t);
            for (auto& x : b) x = rng.uniform(0.0, 1.0) * rng.uniform(0.0, 3.0);
            const double kl = kl_divergence(a, b, 32, 1e-6);
            CHECK(kl >= 0.0);
            std::vector<double> a2 = a, b2 = b;
            for (auto& x : a2) x *= 3.7;
            for (auto& x : b2) x *= 3.7;
            CHECK(kl_divergence(a2, b2, 32, 1e-6) == doctest::Approx(kl).epsilon(1e-12));
        }
    }
    SUBCASE("bad arguments") {
        const std::vector<double> v{0.1, 0.2}, empty;
        CHECK_THROWS_AS(kl_divergence(empty, v, 8, 1e-6), ContractError);
        CHECK_THROWS_AS(kl_divergence(v, v, 1, 1e-6), ContractError);
        CHECK_THROWS_AS(kl_divergence(v, v, 8, 0.0), ContractError);
        const std::vector<double> bad{0.1, std::nan("")};
        CHECK_THROWS_AS(kl_divergence(bad, v, 8, 1e-6), ContractError);
    }
}

TEST_CASE("init_weights") {
    SeededRng rng(8);
    std::vector<double> close(60), far(60), noise_a(60), noise_b(60);
    for (auto& x : close) x = rng.uniform(0.0, 0.5);
    for (auto& x : far) x = rng.uniform(1.0, 1.5);
    for (auto& x : noise_a) x = rng.uniform(0.0, 1.5);
    noise_b = noise_a;
    rng.shuffle(noise_b);

    std::vector<PairDistanceSample> samples;
    add(samples, 1, 0, PairLabel::Matching, close);
    add(samples, 1, 0, PairLabel::NonMatching, far);
    add(samples, 1, 1, PairLabel::Matching, noise_a);
    add(samples, 1, 1, PairLabel::NonMatching, noise_b);

    const auto w = init_weights(samples);
    REQUIRE(w.entries.size() == 2);
    const auto layer = w.for_layer(1, 2);
    CHECK(layer[0] > 0.0);
    CHECK(layer[1] == 0.0);
    CHECK(w.entries[0].n_match == 60);

    SUBCASE("sample order does not matter") {
        auto shuffled = samples;
        rng.shuffle(shuffled);
        const auto again = init_weights(shuffled);
        CHECK(again.for_layer(1, 2) == layer);
    }
    SUBCASE("direction flip") {
        const auto flipped = init_weights(samples, KlConfig{.direction = KlDirection::NonMatchingToMatching});
        CHECK(flipped.for_layer(1, 2)[0] == kl_divergence(far, close, 64, 1e-6));
    }
    SUBCASE("every undersampled key is listed") {
        auto partial = samples;
        add(partial, 2, 0, PairLabel::Matching, std::span<const double>(close).first(10));
        add(partial, 2, 3, PairLabel::NonMatching, std::span<const double>(far).first(10));
        try {
            init_weights(partial);
            FAIL("expected DataError");
        } catch (const DataError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("layer 2, region 0") != std::string::npos);
            CHECK(msg.find("layer 2, region 3") != std::string::npos);
        }
    }
    SUBCASE("for_layer checks the region count") {
        CHECK_THROWS_AS(w.for_layer(1, 3), DataError);
        CHECK_THROWS_AS(w.for_layer(7, 2), DataError);
    }
    SUBCASE("file round-trip") {
        TempDir dir("weights");
        save_weights(w, dir / "w.json");
        const auto back = load_weights(dir / "w.json");
        CHECK(back.for_layer(1, 2) == layer);
        CHECK(back.config.bins == 64);
        CHECK(back.config.direction == KlDirection::MatchingToNonMatching);
    }
}

TEST_CASE("planted-signal dataset: object regions receive the top weights") {
    TempDir dir("planted");
    SynthConfig config;
    config.seed = 21;
    config.scales = {1.0};
    const auto paths = write_synthetic_dataset(config, dir.path());
    const auto manifest = load_manifest(paths.train_manifest);

    PairSamplingConfig sampling;
    sampling.layer_ids = {1, 2};
    sampling.seed = 21;
    const auto weights = init_weights(collect_pair_distances(manifest, sampling));
    const auto again = init_weights(collect_pair_distances(manifest, sampling));

    for (const auto& spec : config.layers) {
        const auto grid = build_grid(spec.width, spec.height, 3);
        const auto w = weights.for_layer(spec.layer_id, grid.size());
        CHECK(again.for_layer(spec.layer_id, grid.size()) == w);

        // fraction of each region covered by the (unjittered) object box
        std::vector<double> overlap;
        for (const auto& r : grid.regions) {
            const double ox = std::max(0.0, std::min(r.x1 * 1.0, config.object_x1 * spec.width) -
                                                std::max(r.x0 * 1.0, config.object_x0 * spec.width));
            const double oy = std::max(0.0, std::min(r.y1 * 1.0, config.object_y1 * spec.height) -
                                                std::max(r.y0 * 1.0, config.object_y0 * spec.height));
            overlap.push_back(ox * oy / (r.width() * r.height()));
        }
        double min_object = std::numeric_limits<double>::infinity();
        double max_clutter = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (overlap[i] >= 0.5) min_object = std::min(min_object, w[i]);
            if (overlap[i] == 0.0) max_clutter = std::max(max_clutter, w[i]);
        }
        CAPTURE(spec.layer_id);
        CHECK(min_object > max_clutter);
        const auto top = std::max_element(w.begin(), w.end()) - w.begin();
        CHECK(overlap[static_cast<std::size_t>(top)] >= 0.5);
    }
}
