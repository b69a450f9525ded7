#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "remap/error.hpp"
#include "remap/tensor_io.hpp"
#include "support.hpp"

using namespace remap;
using remap::testing::TempDir;

namespace {

std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool bitwise_equal(const FeatureMap& a, const FeatureMap& b) {
    return a.width == b.width && a.height == b.height && a.depth == b.depth && a.layer_id == b.layer_id &&
           a.data.size() == b.data.size() &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("1x1x3 map writes header plus 12 payload bytes and reads back exactly") {
    TempDir dir("tensor");
    FeatureMap map(1, 1, 3, 2);
    map.data = {1.0f, 2.0f, 3.0f};
    write_tensor(map, dir / "t.bin");

    const auto bytes = slurp(dir / "t.bin");
    CHECK(bytes.size() == kTensorHeaderBytes + 12);
    CHECK(std::string(bytes.data(), 8) == "RMAPTNSR");
    // little-endian u32 fields: version, layer, width, height, depth
    const unsigned char expected_header[20] = {1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0};
    CHECK(std::memcmp(bytes.data() + 8, expected_header, 20) == 0);
    // 1.0f = 0x3F800000
    CHECK(static_cast<unsigned char>(bytes[28]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[31]) == 0x3F);

    CHECK(bitwise_equal(read_tensor(dir / "t.bin"), map));
}

TEST_CASE("payload size arithmetic for a 32x24x2048 map") {
    TempDir dir("tensor");
    FeatureMap map(32, 24, 2048, 1);
    write_tensor(map, dir / "big.bin");
    CHECK(std::filesystem::file_size(dir / "big.bin") == kTensorHeaderBytes + 6291456u);
}

TEST_CASE("non-finite values are rejected before writing") {
    TempDir dir("tensor");
    FeatureMap map(2, 2, 1, 1);
    map.data[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(write_tensor(map, dir / "nan.bin"), DataError);
    CHECK_FALSE(std::filesystem::exists(dir / "nan.bin"));
    map.data[3] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(write_tensor(map, dir / "inf.bin"), DataError);
}

TEST_CASE("random 5x7x16 tensor round-trips bitwise, including negative zero and subnormals") {
    TempDir dir("tensor");
    SeededRng rng(11);
    auto map = remap::testing::random_map(rng, 5, 7, 16, 3, -10.0, 10.0);
    map.data[0] = -0.0f;
    map.data[1] = std::numeric_limits<float>::denorm_min();
    write_tensor(map, dir / "r.bin");
    const auto back = read_tensor(dir / "r.bin");
    CHECK(bitwise_equal(back, map));

    // and the file is a fixed point of read/write
    write_tensor(back, dir / "r2.bin");
    CHECK(slurp(dir / "r.bin") == slurp(dir / "r2.bin"));
}

TEST_CASE("damaged files raise the matching error") {
    TempDir dir("tensor");
    SeededRng rng(3);
    write_tensor(remap::testing::random_map(rng, 4, 3, 2), dir / "ok.bin");
    const auto good = slurp(dir / "ok.bin");

    SUBCASE("truncated payload") {
        auto bytes = good;
        bytes.resize(bytes.size() - 4);
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), CorruptionError);
    }
    SUBCASE("trailing bytes") {
        auto bytes = good;
        bytes.push_back(0);
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), CorruptionError);
    }
    SUBCASE("truncated header") {
        auto bytes = good;
        bytes.resize(10);
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), CorruptionError);
    }
    SUBCASE("wrong magic") {
        auto bytes = good;
        bytes[0] = 'X';
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), FormatError);
    }
    SUBCASE("unknown version") {
        auto bytes = good;
        bytes[8] = 9;
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), FormatError);
    }
    SUBCASE("NaN in payload") {
        auto bytes = good;
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(bytes.data() + kTensorHeaderBytes, &nan, 4);
        spit(dir / "bad.bin", bytes);
        CHECK_THROWS_AS(read_tensor(dir / "bad.bin"), DataError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_tensor(dir / "nope.bin"), IoError);
    }
}

TEST_CASE("manifest loading") {
    TempDir dir("manifest");
    SeededRng rng(5);
    std::filesystem::create_directories(dir / "f");
    write_tensor(remap::testing::random_map(rng, 3, 2, 4, 1), dir / "f/a1.bin");
    write_tensor(remap::testing::random_map(rng, 3, 2, 4, 1), dir / "f/b1.bin");
    write_tensor(remap::testing::random_map(rng, 4, 3, 4, 1), dir / "f/b1s.bin");

    auto write_lines = [&](const std::string& text) {
        std::ofstream out(dir / "m.jsonl");
        out << text;
    };

    SUBCASE("two lines with unique ids") {
        write_lines(R"({"image_id":"a","feature_paths":{"1":"f/a1.bin"},"class_id":0,"is_query":true,"relevant_ids":["b"]})"
                    "\n"
                    R"({"image_id":"b","feature_paths":[{"1":"f/b1.bin"},{"1":"f/b1s.bin"}],"class_id":0})"
                    "\n\n");
        const auto m = load_manifest(dir / "m.jsonl");
        REQUIRE(m.entries.size() == 2);
        CHECK(m.entries[0].is_query);
        CHECK(m.entries[0].relevant_ids == std::vector<std::string>{"b"});
        CHECK(m.entries[1].feature_paths.size() == 2);
        CHECK(m.entries[1].in_database);
        CHECK(m.find("b") == &m.entries[1]);
        CHECK(m.index_of("a") == 0);
        CHECK(m.find("zzz") == nullptr);

        // relative paths resolve against the manifest directory
        const auto maps = m.entries[1].load_maps(1);
        CHECK(maps.at(1).width == 4);
        CHECK_THROWS_AS(m.entries[0].load_maps(1), DataError);
        const std::vector<int> want{1, 2};
        CHECK_THROWS_AS(m.entries[0].load_maps(want, 0), DataError);

        // save + load is stable and keeps paths relative
        save_manifest(m, dir / "copy.jsonl");
        std::ifstream in(dir / "copy.jsonl");
        std::string first;
        std::getline(in, first);
        CHECK(first.find("\"f/a1.bin\"") != std::string::npos);
        const auto again = load_manifest(dir / "copy.jsonl");
        CHECK(again.entries[1].feature_paths == m.entries[1].feature_paths);
    }
    SUBCASE("duplicate id is reported by name") {
        write_lines(R"({"image_id":"dup","feature_paths":{"1":"f/a1.bin"}})"
                    "\n"
                    R"({"image_id":"dup","feature_paths":{"1":"f/b1.bin"}})"
                    "\n");
        try {
            load_manifest(dir / "m.jsonl");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("dup") != std::string::npos);
        }
    }
    SUBCASE("query without relevant ids") {
        write_lines(R"({"image_id":"a","feature_paths":{"1":"f/a1.bin"},"is_query":true,"relevant_ids":[]})"
                    "\n");
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), DataError);
    }
    SUBCASE("missing feature file") {
        write_lines(R"({"image_id":"a","feature_paths":{"1":"f/missing.bin"}})"
                    "\n");
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), DataError);
    }
    SUBCASE("malformed json names the line") {
        write_lines(R"({"image_id":"a","feature_paths":{"1":"f/a1.bin"}})"
                    "\n{not json\n");
        try {
            load_manifest(dir / "m.jsonl");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }
    SUBCASE("non-integer layer key") {
        write_lines(R"({"image_id":"a","feature_paths":{"x1":"f/a1.bin"}})"
                    "\n");
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), DataError);
    }
}
