#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "egolcd/tensor.hpp"
#include "test_support.hpp"

using namespace egolcd;

TEST_CASE("matmul identity and hand-computed product") {
    Rng rng(1);
    Tensor a = test::random_tensor(rng, {2, 2});
    CHECK(test::bitwise_equal(matmul(Tensor::identity(2), a), a));

    Tensor m({2, 2}, {1, 2, 3, 4});
    Tensor v({2, 1}, {0, 1});
    Tensor out = matmul(m, v);
    CHECK(out.at2(0, 0) == 2.0);
    CHECK(out.at2(1, 0) == 4.0);
}

TEST_CASE("matmul rejects mismatched inner axes") {
    Tensor a({2, 3});
    Tensor b({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul matches the naive oracle and associates") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor a = test::random_tensor(rng, {4, 4});
        Tensor b = test::random_tensor(rng, {4, 4});
        Tensor c = test::random_tensor(rng, {4, 4});
        CHECK(test::max_abs_diff(matmul(a, b), test::matmul_oracle(a, b)) < 1e-12);
        CHECK(test::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-5);
    }
}

TEST_CASE("softmax symmetry, stability, masking") {
    Tensor flat({1, 2}, {0, 0});
    Tensor s = softmax_rows(flat);
    CHECK(s.at2(0, 0) == Catch::Approx(0.5));
    CHECK(s.at2(0, 1) == Catch::Approx(0.5));

    Tensor big({1, 2}, {1000, 0});
    Tensor sb = softmax_rows(big);
    CHECK(std::isfinite(sb.at2(0, 0)));
    CHECK(sb.at2(0, 0) == Catch::Approx(1.0));
    CHECK(sb.at2(0, 1) == Catch::Approx(0.0).margin(1e-300));

    const double inf = std::numeric_limits<double>::infinity();
    Tensor mask({1, 2}, {0, -inf});
    Tensor sm = softmax_rows(flat, &mask);
    CHECK(sm.at2(0, 0) == 1.0);
    CHECK(sm.at2(0, 1) == 0.0);

    Tensor all_masked({1, 2}, {-inf, -inf});
    CHECK_THROWS_AS(softmax_rows(flat, &all_masked), ValueError);
}

TEST_CASE("softmax rows sum to one across magnitudes") {
    Rng rng(11);
    for (double scale : {1.0, 100.0, 1e4}) {
        Tensor x = test::random_tensor(rng, {8, 16}, scale);
        Tensor s = softmax_rows(x);
        for (size_t i = 0; i < 8; ++i) {
            double sum = 0.0;
            for (size_t j = 0; j < 16; ++j) {
                sum += s.at2(i, j);
                CHECK(s.at2(i, j) >= 0.0);
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("cosine basics") {
    std::vector<double> a{1, 1}, b{1, 0}, c{0, 1};
    CHECK(cosine(a, a) == Catch::Approx(1.0));
    CHECK(cosine(b, c) == Catch::Approx(0.0).margin(1e-12));
    CHECK(cosine(a, b) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-6));

    std::vector<double> zero{0, 0};
    CHECK_THROWS_AS(cosine(zero, a), ValueError);
    std::vector<double> wrong{1, 2, 3};
    CHECK_THROWS_AS(cosine(a, wrong), ShapeError);
}

TEST_CASE("cosine scale invariance") {
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor v = test::random_tensor(rng, {8});
        std::vector<double> a(v.values().begin(), v.values().end());
        double c = rng.uniform() * 10.0 + 1e-3;
        std::vector<double> scaled(a);
        for (double& x : scaled) x *= c;
        CHECK(cosine(a, scaled) == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("temporal resampling identity, constants, midpoint") {
    Rng rng(5);
    LatentClip clip = test::random_tensor(rng, {2, 4, 3, 3});
    CHECK(test::bitwise_equal(resample_temporal(clip, 4), clip));

    LatentClip constant = Tensor::full({2, 3, 2, 2}, 1.5);
    LatentClip up = resample_temporal(constant, 7);
    for (double v : up.values()) CHECK(v == Catch::Approx(1.5));

    LatentClip two({1, 2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
    LatentClip three = resample_temporal(two, 3);
    for (size_t p = 0; p < 4; ++p) {
        CHECK(three.at4(0, 0, p / 2, p % 2) == 0.0);
        CHECK(three.at4(0, 1, p / 2, p % 2) == Catch::Approx(0.5));
        CHECK(three.at4(0, 2, p / 2, p % 2) == 1.0);
    }
}

TEST_CASE("temporal resampling preserves endpoints and bounds") {
    Rng rng(9);
    for (size_t target : {1u, 2u, 5u, 9u}) {
        LatentClip clip = test::random_tensor(rng, {2, 6, 2, 2});
        LatentClip out = resample_temporal(clip, target);
        double lo = 1e300, hi = -1e300;
        for (double v : clip.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (double v : out.values()) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
        // first output frame equals first input frame; same at the far end
        // whenever both endpoints exist in the output
        for (size_t ci = 0; ci < 2; ++ci)
            for (size_t p = 0; p < 4; ++p) {
                CHECK(out.at4(ci, 0, p / 2, p % 2) == clip.at4(ci, 0, p / 2, p % 2));
                if (target > 1)
                    CHECK(out.at4(ci, target - 1, p / 2, p % 2) == clip.at4(ci, 5, p / 2, p % 2));
            }
    }
}

TEST_CASE("gaussian determinism and moments") {
    Rng a(7), b(7);
    Tensor x = gaussian(a, {13, 7});
    Tensor y = gaussian(b, {13, 7});
    CHECK(test::bitwise_equal(x, y));

    Rng rng(42);
    Tensor big = gaussian(rng, {100000});
    double mean = 0.0;
    for (double v : big.values()) mean += v;
    mean /= static_cast<double>(big.size());
    double var = 0.0;
    for (double v : big.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(big.size());
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("tensor shape validation") {
    CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("tensor serialization round-trips at 32-bit precision") {
    Rng rng(21);
    Tensor t = test::random_tensor(rng, {3, 4, 2});
    std::stringstream buf;
    BinaryWriter w(buf);
    write_tensor(w, t);
    BinaryReader r(buf);
    Tensor back = read_tensor(r);
    REQUIRE(back.shape() == t.shape());
    for (size_t i = 0; i < t.size(); ++i)
        CHECK(static_cast<float>(back[i]) == static_cast<float>(t[i]));
}

TEST_CASE("tensor deserialization rejects truncation") {
    Rng rng(22);
    Tensor t = test::random_tensor(rng, {4, 4});
    std::stringstream buf;
    BinaryWriter w(buf);
    write_tensor(w, t);
    std::string bytes = buf.str();
    std::stringstream cut(bytes.substr(0, bytes.size() / 2));
    BinaryReader r(cut);
    CHECK_THROWS_AS(read_tensor(r), IoError);
}
