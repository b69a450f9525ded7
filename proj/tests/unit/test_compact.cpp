#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "remap/compact.hpp"
#include "remap/error.hpp"
#include "remap/rng.hpp"
#include "support.hpp"

using namespace remap;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using remap::testing::TempDir;

namespace {

MatrixXd gaussian_rows(SeededRng& rng, Eigen::Index n, Eigen::Index d) {
    MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return x;
}

double block_distance(const VectorXd& v, const PQCodebook& book, std::size_t b, std::size_t j) {
    double d = 0.0;
    const auto c = book.centroid(b, j);
    for (std::size_t t = 0; t < book.sub_dim(); ++t) {
        const double diff = v[static_cast<Eigen::Index>(b * book.sub_dim() + t)] - c[t];
        d += diff * diff;
    }
    return d;
}

}  // namespace

TEST_CASE("truncation") {
    SeededRng rng(1);
    const VectorXd x = gaussian_rows(rng, 1, 512).row(0).transpose().normalized();
    CHECK(truncate(x, 512) == x);  // bitwise

    const VectorXd one = truncate(x, 1);
    CHECK(std::abs(one[0]) == 1.0);
    CHECK(one[0] == (x[0] > 0 ? 1.0 : -1.0));

    const VectorXd t = truncate(x, 128);
    const VectorXd oracle = x.head(128) / std::sqrt(x.head(128).squaredNorm());
    CHECK((t - oracle).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(t.norm() == doctest::Approx(1.0).epsilon(1e-14));

    CHECK_THROWS_AS(truncate(x, 0), ContractError);
    CHECK_THROWS_AS(truncate(x, 513), ContractError);
}

TEST_CASE("codebook shape and code size") {
    const PQCodebook big(4096, 16, 256);
    CHECK(big.code_size() == 16);
    CHECK(big.code_bits() == 128);
    CHECK(big.sub_dim() == 256);
    CHECK(PQCodebook(32, 8, 16).code_bits() == 32);
    CHECK(PQCodebook(32, 8, 1).code_bits() == 0);
    CHECK_THROWS_AS(PQCodebook(30, 8, 16), ContractError);
    CHECK_THROWS_AS(PQCodebook(32, 8, 257), ContractError);
    CHECK_THROWS_AS(PQCodebook(32, 8, 0), ContractError);
}

TEST_CASE("k distinct points are quantized without loss") {
    SeededRng rng(2);
    const MatrixXd x = gaussian_rows(rng, 16, 8);
    PQTrainConfig config{.m = 2, .k = 16};
    const auto book = pq_train(x, config);
    for (const auto& history : book.training_distortion) CHECK(history.back() == 0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const VectorXd v = x.row(i).transpose();
        CHECK((pq_decode(book, pq_encode(book, v)) - v).norm() == 0.0);
    }
}

TEST_CASE("planted clusters are recovered") {
    // Per block, two tight clusters at +c and -c.
    SeededRng rng(3);
    const Eigen::Vector4d centre(1.0, -2.0, 0.5, 3.0);
    MatrixXd x(200, 4);
    for (Eigen::Index i = 0; i < 200; ++i) {
        for (Eigen::Index b = 0; b < 2; ++b) {
            const double sign = rng.below(2) == 0 ? 1.0 : -1.0;
            x(i, 2 * b) = sign * centre[2 * b];
            x(i, 2 * b + 1) = sign * centre[2 * b + 1];
        }
    }
    x.array() += 1e-9 * gaussian_rows(rng, 200, 4).array();
    const auto book = pq_train(x, PQTrainConfig{.m = 2, .k = 2});
    for (std::size_t b = 0; b < 2; ++b) {
        std::vector<std::pair<double, double>> found;
        for (std::size_t j = 0; j < 2; ++j) found.emplace_back(book.centroid(b, j)[0], book.centroid(b, j)[1]);
        std::sort(found.begin(), found.end());
        const double cx = std::abs(centre[2 * static_cast<Eigen::Index>(b)]);
        const double cy = centre[2 * static_cast<Eigen::Index>(b) + 1] * (centre[2 * static_cast<Eigen::Index>(b)] > 0 ? 1 : -1);
        CHECK(found[0].first == doctest::Approx(-cx).epsilon(1e-6));
        CHECK(found[0].second == doctest::Approx(-cy).epsilon(1e-6));
        CHECK(found[1].first == doctest::Approx(cx).epsilon(1e-6));
        CHECK(found[1].second == doctest::Approx(cy).epsilon(1e-6));
    }
}

TEST_CASE("Lloyd distortion never increases") {
    SeededRng rng(4);
    const MatrixXd x = gaussian_rows(rng, 1000, 32);
    const auto book = pq_train(x, PQTrainConfig{.m = 8, .k = 16, .max_iterations = 40, .tolerance = 0.0});
    for (const auto& history : book.training_distortion) {
        REQUIRE(history.size() >= 2);
        for (std::size_t i = 1; i < history.size(); ++i) CHECK(history[i] <= history[i - 1] + 1e-12);
    }
    // equal seeds, any worker count: identical centroids
    const auto again = pq_train(x, PQTrainConfig{.m = 8, .k = 16, .max_iterations = 40, .tolerance = 0.0, .workers = 3});
    for (std::size_t b = 0; b < 8; ++b)
        for (std::size_t j = 0; j < 16; ++j)
            CHECK(std::equal(book.centroid(b, j).begin(), book.centroid(b, j).end(), again.centroid(b, j).begin()));

    CHECK_THROWS_AS(pq_train(x.topRows(10), PQTrainConfig{.m = 8, .k = 16}), DataError);
    MatrixXd bad = x;
    bad(3, 3) = std::nan("");
    CHECK_THROWS_AS(pq_train(bad, PQTrainConfig{.m = 8, .k = 16}), NumericError);
}

TEST_CASE("encoding picks the nearest centroid and decoding is optimal") {
    SeededRng rng(5);
    const MatrixXd x = gaussian_rows(rng, 300, 16);
    const auto book = pq_train(x, PQTrainConfig{.m = 4, .k = 8});

    // a vector built from centroid j of every block encodes to all-j
    for (std::size_t j = 0; j < 8; ++j) {
        VectorXd v(16);
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t t = 0; t < 4; ++t) v[static_cast<Eigen::Index>(b * 4 + t)] = book.centroid(b, j)[t];
        CHECK(pq_encode(book, v) == std::vector<std::uint8_t>(4, static_cast<std::uint8_t>(j)));
    }

    for (int trial = 0; trial < 50; ++trial) {
        const VectorXd v = gaussian_rows(rng, 1, 16).row(0).transpose();
        const auto code = pq_encode(book, v);
        const VectorXd decoded = pq_decode(book, code);
        for (std::size_t b = 0; b < 4; ++b) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < 8; ++j)
                if (block_distance(v, book, b, j) < block_distance(v, book, b, best)) best = j;
            CHECK(code[b] == best);
        }
        // no other code reconstructs v better
        SeededRng other(static_cast<std::uint64_t>(trial));
        for (int c = 0; c < 20; ++c) {
            std::vector<std::uint8_t> alt(4);
            for (auto& a : alt) a = static_cast<std::uint8_t>(other.below(8));
            CHECK((v - decoded).squaredNorm() <= (v - pq_decode(book, alt)).squaredNorm() + 1e-12);
        }
    }
    CHECK_THROWS_AS(pq_encode(book, VectorXd::Zero(8)), ContractError);
    CHECK_THROWS_AS(pq_decode(book, std::vector<std::uint8_t>{0, 0, 0, 8}), DataError);
}

TEST_CASE("asymmetric distance equals a table-free computation") {
    SeededRng rng(6);
    const MatrixXd x = gaussian_rows(rng, 1000, 32);
    const auto book = pq_train(x, PQTrainConfig{.m = 8, .k = 16});
    std::vector<PQCode> codes;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        codes.push_back(PQCode{"v" + std::to_string(1000 + i), pq_encode(book, x.row(i).transpose())});
        CHECK(codes.back().codes.size() == 8);
    }
    const VectorXd q = gaussian_rows(rng, 1, 32).row(0).transpose();
    const auto hits = adc_search(book, codes, q, 0);
    REQUIRE(hits.size() == 1000);
    std::set<std::string> seen;
    for (const auto& h : hits) {
        const auto i = std::stoul(h.image_id.substr(1)) - 1000;
        double oracle = 0.0;
        for (std::size_t b = 0; b < 8; ++b) oracle += block_distance(q, book, b, codes[i].codes[b]);
        CHECK(h.distance == oracle);
        CHECK(h.distance == doctest::Approx((q - pq_decode(book, codes[i].codes)).squaredNorm()).epsilon(1e-12));
        seen.insert(h.image_id);
    }
    CHECK(seen.size() == 1000);
    CHECK(std::is_sorted(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.image_id < b.image_id);
    }));

    const auto top = adc_search(book, codes, q, 10, 4);
    REQUIRE(top.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(top[i].image_id == hits[i].image_id);

    // identical codes tie, broken by id
    std::vector<PQCode> twins{{"b", codes[0].codes}, {"a", codes[0].codes}};
    const auto tied = adc_search(book, twins, q, 0);
    CHECK(tied[0].image_id == "a");
}

TEST_CASE("codebook and code files") {
    TempDir dir("compact");
    SeededRng rng(7);
    const MatrixXd x = gaussian_rows(rng, 100, 8);
    const auto book = pq_train(x, PQTrainConfig{.m = 2, .k = 4});
    save_codebook(book, dir / "pq.bin");
    const auto loaded = load_codebook(dir / "pq.bin");
    CHECK(loaded.dim() == 8);
    CHECK(loaded.m() == 2);
    CHECK(loaded.k() == 4);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t t = 0; t < 4; ++t)
                CHECK(loaded.centroid(b, j)[t] == static_cast<double>(static_cast<float>(book.centroid(b, j)[t])));

    const std::vector<PQCode> codes{{"x", {1, 2}}, {"yy", {3, 0}}};
    save_codes(codes, 2, dir / "codes.bin");
    const auto back = load_codes(dir / "codes.bin");
    REQUIRE(back.size() == 2);
    CHECK(back[1].image_id == "yy");
    CHECK(back[1].codes == std::vector<std::uint8_t>{3, 0});
    CHECK_THROWS_AS(save_codes(codes, 3, dir / "bad.bin"), ContractError);

    {
        std::ofstream f(dir / "junk.bin", std::ios::binary);
        f << "NOTACODEBOOKFILE....";
    }
    CHECK_THROWS_AS(load_codebook(dir / "junk.bin"), FormatError);
    CHECK_THROWS_AS(load_codes(dir / "junk.bin"), FormatError);
    CHECK_THROWS_AS(load_codebook(dir / "codes.bin"), FormatError);

    std::filesystem::resize_file(dir / "pq.bin", std::filesystem::file_size(dir / "pq.bin") - 4);
    CHECK_THROWS_AS(load_codebook(dir / "pq.bin"), CorruptionError);
    CHECK_THROWS_AS(load_codebook(dir / "missing.bin"), IoError);
}
