#include <fstream>
#include <iterator>

#include "doctest.h"
#include "remap/error.hpp"
#include "remap/synth.hpp"
#include "support.hpp"

using namespace remap;
using remap::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("split sizes, ids and map shapes") {
    SynthConfig config;
    config.train_classes = 4;
    config.train_per_class = 3;
    const auto train = generate_split(config, SynthSplit::Train);
    const auto test = generate_split(config, SynthSplit::Test);
    CHECK(train.size() == 12);
    CHECK(test.size() == 100);
    CHECK(train.front().image_id == "train_c0_i0");
    CHECK(test.back().image_id == "test_c4_i19");
    CHECK(test.front().class_id != train.front().class_id);  // test classes are disjoint from training ones

    const auto& img = test.front();
    REQUIRE(img.scales.size() == 2);
    CHECK(img.scales[0].at(1).width == 8);
    CHECK(img.scales[0].at(1).height == 6);
    CHECK(img.scales[0].at(1).depth == 32);
    CHECK(img.scales[1].at(1).width == 12);
    CHECK(img.scales[1].at(2).height == 18);
    CHECK(img.scales[0].at(2).depth == 16);
    for (const auto& scale : img.scales)
        for (const auto& [id, map] : scale)
            for (float v : map.data) CHECK(v >= 0.0f);
}

TEST_CASE("generation is deterministic in the seed") {
    SynthConfig config;
    config.classes = 2;
    config.per_class = 3;
    const auto a = generate_split(config, SynthSplit::Test);
    const auto b = generate_split(config, SynthSplit::Test);
    config.seed = 1;
    const auto c = generate_split(config, SynthSplit::Test);
    CHECK(a[4].scales[1].at(2).data == b[4].scales[1].at(2).data);
    CHECK(a[4].scales[1].at(2).data != c[4].scales[1].at(2).data);

    TempDir one("synth1"), two("synth2");
    config.seed = 0;
    const auto p1 = write_synthetic_dataset(config, one.path());
    const auto p2 = write_synthetic_dataset(config, two.path());
    CHECK(slurp(p1.test_manifest) == slurp(p2.test_manifest));
    CHECK(slurp(p1.train_manifest) == slurp(p2.train_manifest));
    std::size_t files = 0;
    for (const auto& f : std::filesystem::directory_iterator(one / "features")) {
        CHECK(slurp(f.path()) == slurp(two / "features" / f.path().filename()));
        ++files;
    }
    CHECK(files == 2 * 6 * 2 * 2);  // splits x images x layers x scales
}

TEST_CASE("manifests carry the expected ground truth") {
    TempDir dir("synth");
    SynthConfig config;
    config.classes = 3;
    config.per_class = 4;
    const auto paths = write_synthetic_dataset(config, dir.path());
    const auto test = load_manifest(paths.test_manifest);
    CHECK_NOTHROW(test.validate());
    REQUIRE(test.entries.size() == 12);
    for (const auto& e : test.entries) {
        CHECK(e.is_query);
        CHECK(e.in_database);
        CHECK(e.relevant_ids.size() == 3);
        for (const auto& r : e.relevant_ids) CHECK(test.find(r)->class_id == e.class_id);
        CHECK(e.feature_paths.size() == 2);
    }
    const auto train = load_manifest(paths.train_manifest);
    for (const auto& e : train.entries) {
        CHECK_FALSE(e.is_query);
        CHECK(e.class_id.has_value());
    }
    CHECK(test.entries[5].load_maps(1).at(2).width == 24);
}

TEST_CASE("invalid configurations list every problem") {
    SynthConfig config;
    config.classes = 1;
    config.scales = {};
    config.object_x0 = 0.9;
    try {
        config.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2 classes") != std::string::npos);
        CHECK(msg.find("scale") != std::string::npos);
        CHECK(msg.find("object box") != std::string::npos);
    }
    SynthConfig dup;
    dup.layers = {{1, 4, 3, 2}, {1, 4, 3, 2}};
    CHECK_THROWS_AS(dup.validate(), ConfigError);
}
