#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// Per-chunk scores M_1..M_N for one base quality metric.
struct QualitySeries {
    std::string metric_name;
    std::vector<double> scores;

    size_t chunks() const { return scores.size(); }
};

struct NRDPConfig {
    size_t chunk_count = 10;
    std::vector<double> weights;  // w_2..w_N, positive and non-increasing

    void validate() const {
        if (chunk_count < 2) throw ConfigError("nrdp config: need at least 2 chunks");
        if (weights.size() != chunk_count - 1)
            throw ConfigError("nrdp config: expected " + std::to_string(chunk_count - 1) +
                              " weights, got " + std::to_string(weights.size()));
        for (size_t i = 0; i < weights.size(); ++i) {
            if (!(weights[i] > 0.0)) throw ConfigError("nrdp config: weights must be positive");
            if (i > 0 && weights[i] > weights[i - 1])
                throw ConfigError("nrdp config: weights must be non-increasing");
        }
    }
};

struct MetricReport {
    std::string metric_name;
    std::vector<double> chunk_means;  // M_1..M_N
    std::vector<double> drifts;       // D_2..D_N
    double nrdp = 0.0;
};

// Splits per-frame scores into N contiguous chunks whose sizes differ by at
// most one (remainder frames go to the earliest chunks) and takes per-chunk
// means.
inline QualitySeries chunk_series(const std::vector<double>& per_frame_scores, size_t chunk_count,
                                  std::string metric_name = "") {
    if (chunk_count < 1) throw ConfigError("chunk_series: chunk count must be >= 1");
    if (per_frame_scores.size() < chunk_count)
        throw ValueError("chunk_series: " + std::to_string(per_frame_scores.size()) +
                         " frames cannot fill " + std::to_string(chunk_count) + " chunks");
    QualitySeries series;
    series.metric_name = std::move(metric_name);
    const size_t frames = per_frame_scores.size();
    const size_t base = frames / chunk_count, extra = frames % chunk_count;
    size_t at = 0;
    for (size_t i = 0; i < chunk_count; ++i) {
        const size_t len = base + (i < extra ? 1 : 0);
        double sum = 0.0;
        for (size_t j = 0; j < len; ++j) sum += per_frame_scores[at + j];
        series.scores.push_back(sum / static_cast<double>(len));
        at += len;
    }
    return series;
}

// Normalized drift D_i = |M_i - M_1| / M_1 for i = 2..N.
inline std::vector<double> drift(const QualitySeries& series) {
    if (series.chunks() < 2) throw ValueError("drift: need at least 2 chunks");
    const double reference = series.scores[0];
    if (!(reference > 0.0))
        throw ValueError("drift: reference chunk score must be positive, got " +
                         std::to_string(reference));
    std::vector<double> out;
    out.reserve(series.chunks() - 1);
    for (size_t i = 1; i < series.chunks(); ++i)
        out.push_back(std::abs(series.scores[i] - reference) / reference);
    return out;
}

// w_i = N - i + 1 for i = 2..N: early drift is penalized most.
inline std::vector<double> default_weights(size_t chunk_count) {
    if (chunk_count < 2) throw ConfigError("default_weights: need at least 2 chunks");
    std::vector<double> w;
    w.reserve(chunk_count - 1);
    for (size_t i = 2; i <= chunk_count; ++i)
        w.push_back(static_cast<double>(chunk_count - i + 1));
    return w;
}

inline NRDPConfig default_nrdp_config(size_t chunk_count = 10) {
    NRDPConfig config;
    config.chunk_count = chunk_count;
    config.weights = default_weights(chunk_count);
    return config;
}

// Weighted drift sum over chunks 2..N.
inline double nrdp_score(const QualitySeries& series, const NRDPConfig& config) {
    config.validate();
    if (series.chunks() != config.chunk_count)
        throw ConfigError("nrdp_score: series has " + std::to_string(series.chunks()) +
                          " chunks, config expects " + std::to_string(config.chunk_count));
    const auto d = drift(series);
    double score = 0.0;
    for (size_t i = 0; i < d.size(); ++i) score += config.weights[i] * d[i];
    return score;
}

inline MetricReport nrdp_report(const QualitySeries& series, const NRDPConfig& config) {
    MetricReport report;
    report.metric_name = series.metric_name;
    report.chunk_means = series.scores;
    report.drifts = drift(series);
    report.nrdp = nrdp_score(series, config);
    return report;
}

// ---------------------------------------------------------------------------
// Built-in proxy metrics over latent clips (hermetic stand-ins for external
// per-frame quality scores; any real score table can be fed in instead).
// ---------------------------------------------------------------------------

// Per-frame mean spatial gradient magnitude plus a small positive floor.
// Higher means sharper; invariant to constant offsets.
inline std::vector<double> proxy_clarity(const LatentClip& clip) {
    check_clip(clip, "proxy_clarity");
    const size_t c = clip.dim(0), t = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    std::vector<double> scores(t, 0.0);
    for (size_t ti = 0; ti < t; ++ti) {
        double sum = 0.0;
        size_t count = 0;
        for (size_t ci = 0; ci < c; ++ci)
            for (size_t y = 0; y + 1 < h; ++y)
                for (size_t x = 0; x + 1 < w; ++x) {
                    const double gx = clip.at4(ci, ti, y, x + 1) - clip.at4(ci, ti, y, x);
                    const double gy = clip.at4(ci, ti, y + 1, x) - clip.at4(ci, ti, y, x);
                    sum += std::sqrt(gx * gx + gy * gy);
                    ++count;
                }
        scores[ti] = (count > 0 ? sum / static_cast<double>(count) : 0.0) + 1e-6;
    }
    return scores;
}

// score_t = 1 / (1 + mean |frame_t - frame_{t-1}|); the first frame inherits
// the second frame's score.
inline std::vector<double> proxy_smoothness(const LatentClip& clip) {
    check_clip(clip, "proxy_smoothness");
    const size_t c = clip.dim(0), t = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    if (t < 2) throw ValueError("proxy_smoothness: need at least 2 frames");
    std::vector<double> scores(t, 0.0);
    const size_t frame = h * w;
    for (size_t ti = 1; ti < t; ++ti) {
        double sum = 0.0;
        for (size_t ci = 0; ci < c; ++ci) {
            const double* prev = clip.data() + (ci * t + ti - 1) * frame;
            const double* cur = clip.data() + (ci * t + ti) * frame;
            for (size_t p = 0; p < frame; ++p) sum += std::abs(cur[p] - prev[p]);
        }
        scores[ti] = 1.0 / (1.0 + sum / static_cast<double>(c * frame));
    }
    scores[0] = scores[1];
    return scores;
}

}  // namespace egolcd
