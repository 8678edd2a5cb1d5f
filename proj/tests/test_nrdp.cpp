#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "egolcd/nrdp.hpp"
#include "test_support.hpp"

using namespace egolcd;

namespace {

QualitySeries series_of(std::vector<double> scores) {
    QualitySeries s;
    s.metric_name = "test";
    s.scores = std::move(scores);
    return s;
}

double nrdp_oracle(const std::vector<double>& m, const std::vector<double>& w) {
    double out = 0.0;
    for (size_t i = 1; i < m.size(); ++i) out += w[i - 1] * std::abs(m[i] - m[0]) / m[0];
    return out;
}

}  // namespace

TEST_CASE("chunking splits evenly with remainder to the front") {
    std::vector<double> ten(10);
    for (size_t i = 0; i < 10; ++i) ten[i] = static_cast<double>(i) + 1.0;
    QualitySeries s = chunk_series(ten, 10);
    REQUIRE(s.chunks() == 10);
    for (size_t i = 0; i < 10; ++i) CHECK(s.scores[i] == ten[i]);

    QualitySeries constant = chunk_series(std::vector<double>(13, 2.5), 4);
    for (double v : constant.scores) CHECK(v == Catch::Approx(2.5));

    QualitySeries uneven = chunk_series({1, 2, 3, 4, 5, 6, 7}, 3);
    REQUIRE(uneven.chunks() == 3);
    CHECK(uneven.scores[0] == Catch::Approx(2.0));    // {1,2,3}
    CHECK(uneven.scores[1] == Catch::Approx(4.5));    // {4,5}
    CHECK(uneven.scores[2] == Catch::Approx(6.5));    // {6,7}

    CHECK_THROWS_AS(chunk_series({1, 2}, 3), ValueError);
}

TEST_CASE("drift is relative deviation from the first chunk") {
    auto d = drift(series_of({1.0, 0.9}));
    REQUIRE(d.size() == 1);
    CHECK(d[0] == Catch::Approx(0.1));

    auto flat = drift(series_of({3.0, 3.0, 3.0, 3.0}));
    for (double v : flat) CHECK(v == 0.0);

    auto two = drift(series_of({2.0, 1.0, 2.0}));
    CHECK(two[0] == Catch::Approx(0.5));
    CHECK(two[1] == Catch::Approx(0.0));

    CHECK_THROWS_AS(drift(series_of({0.0, 1.0})), ValueError);
    CHECK_THROWS_AS(drift(series_of({-1.0, 1.0})), ValueError);
    CHECK_THROWS_AS(drift(series_of({1.0})), ValueError);
}

TEST_CASE("default weights follow N - i + 1") {
    CHECK(default_weights(10) == std::vector<double>{9, 8, 7, 6, 5, 4, 3, 2, 1});
    CHECK(default_weights(2) == std::vector<double>{1});
    CHECK(default_weights(3) == std::vector<double>{2, 1});
    CHECK_THROWS_AS(default_weights(1), ConfigError);
}

TEST_CASE("nrdp scores match hand-worked examples") {
    NRDPConfig two;
    two.chunk_count = 2;
    two.weights = {1.0};
    CHECK(nrdp_score(series_of({1.0, 0.9}), two) == Catch::Approx(0.1));

    NRDPConfig three;
    three.chunk_count = 3;
    three.weights = {2.0, 1.0};
    CHECK(nrdp_score(series_of({2.0, 1.0, 2.0}), three) == Catch::Approx(1.0));

    NRDPConfig ten = default_nrdp_config(10);
    CHECK(nrdp_score(series_of(std::vector<double>(10, 4.2)), ten) == 0.0);

    CHECK_THROWS_AS(nrdp_score(series_of({1.0, 1.0}), three), ConfigError);

    NRDPConfig bad = default_nrdp_config(3);
    bad.weights = {1.0, 2.0};  // increasing
    CHECK_THROWS_AS(nrdp_score(series_of({1.0, 1.0, 1.0}), bad), ConfigError);
}

TEST_CASE("nrdp matches the direct-summation oracle and is scale invariant") {
    Rng rng(61);
    NRDPConfig config = default_nrdp_config(10);
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<double> m(10);
        for (double& v : m) v = rng.uniform() + 0.1;
        double score = nrdp_score(series_of(m), config);
        CHECK(score == Catch::Approx(nrdp_oracle(m, config.weights)).margin(1e-12));

        double c = rng.uniform() * 10.0 + 0.01;
        std::vector<double> scaled(m);
        for (double& v : scaled) v *= c;
        CHECK(nrdp_score(series_of(scaled), config) == Catch::Approx(score).margin(1e-12));
    }
}

TEST_CASE("zero drift iff the series is constant") {
    NRDPConfig config = default_nrdp_config(5);
    CHECK(nrdp_score(series_of({2, 2, 2, 2, 2}), config) == 0.0);
    CHECK(nrdp_score(series_of({2, 2, 2, 2, 2.001}), config) > 0.0);
}

TEST_CASE("earlier dips are penalized more under default weights") {
    NRDPConfig config = default_nrdp_config(10);
    for (size_t i = 1; i < 9; ++i) {
        for (size_t j = i + 1; j < 10; ++j) {
            std::vector<double> early(10, 1.0), late(10, 1.0);
            early[i] = 0.5;
            late[j] = 0.5;
            CHECK(nrdp_score(series_of(early), config) > nrdp_score(series_of(late), config));
        }
    }
}

TEST_CASE("report carries means, drifts, and the score") {
    MetricReport r = nrdp_report(series_of({2.0, 1.0, 2.0}),
                                 NRDPConfig{3, {2.0, 1.0}});
    CHECK(r.chunk_means == std::vector<double>{2.0, 1.0, 2.0});
    CHECK(r.drifts[0] == Catch::Approx(0.5));
    CHECK(r.nrdp == Catch::Approx(1.0));
}

TEST_CASE("clarity proxy responds to sharpness") {
    // constant frames have zero gradient: the positive floor remains
    LatentClip flat = Tensor::full({1, 3, 4, 4}, 2.0);
    auto scores = proxy_clarity(flat);
    for (double v : scores) CHECK(v == Catch::Approx(1e-6));

    // offset invariance
    Rng rng(62);
    LatentClip clip = test::random_tensor(rng, {2, 4, 6, 6});
    LatentClip shifted = clip;
    for (double& v : shifted.values()) v += 13.7;
    auto a = proxy_clarity(clip);
    auto b = proxy_clarity(shifted);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-9));

    // 3x3 mean filtering strictly lowers every frame's score
    const size_t h = 6, w = 6;
    LatentClip blurred = clip;
    for (size_t ci = 0; ci < 2; ++ci)
        for (size_t t = 0; t < 4; ++t)
            for (size_t y = 0; y < h; ++y)
                for (size_t x = 0; x < w; ++x) {
                    double sum = 0.0;
                    int count = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            int yy = static_cast<int>(y) + dy, xx = static_cast<int>(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= (int)h || xx >= (int)w) continue;
                            sum += clip.at4(ci, t, yy, xx);
                            ++count;
                        }
                    blurred.at4(ci, t, y, x) = sum / count;
                }
    auto sharp = proxy_clarity(clip);
    auto soft = proxy_clarity(blurred);
    for (size_t i = 0; i < sharp.size(); ++i) CHECK(soft[i] < sharp[i]);
}

TEST_CASE("smoothness proxy responds to inter-frame deltas") {
    LatentClip still = Tensor::full({2, 4, 3, 3}, 0.7);
    auto s = proxy_smoothness(still);
    for (double v : s) CHECK(v == Catch::Approx(1.0));

    Rng rng(63);
    LatentClip clip = test::random_tensor(rng, {2, 5, 3, 3});
    auto base = proxy_smoothness(clip);
    for (double v : base) {
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(base[0] == base[1]);

    // doubling the inter-frame deltas strictly lowers moving-frame scores
    LatentClip doubled = clip;
    for (size_t ci = 0; ci < 2; ++ci)
        for (size_t t = 1; t < 5; ++t)
            for (size_t y = 0; y < 3; ++y)
                for (size_t x = 0; x < 3; ++x) {
                    double prev = doubled.at4(ci, t - 1, y, x);
                    double cur = clip.at4(ci, t, y, x) - clip.at4(ci, t - 1, y, x);
                    doubled.at4(ci, t, y, x) = prev + 2.0 * cur;
                }
    auto fast = proxy_smoothness(doubled);
    for (size_t t = 1; t < 5; ++t) CHECK(fast[t] < base[t]);

    LatentClip single = Tensor::full({1, 1, 2, 2}, 1.0);
    CHECK_THROWS_AS(proxy_smoothness(single), ValueError);
}
