#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// Rectified-flow discretization and sampler settings.
struct FlowSchedule {
    size_t total_steps = 1000;   // training discretization
    size_t sample_steps = 20;
    double guidance_scale = 5.0;
    double shift = 5.0;

    void validate() const {
        if (total_steps == 0 || sample_steps == 0)
            throw ConfigError("flow schedule: step counts must be positive");
        if (sample_steps > total_steps)
            throw ConfigError("flow schedule: sample_steps exceeds total_steps");
        if (!(guidance_scale >= 0.0)) throw ConfigError("flow schedule: guidance must be >= 0");
        if (!(shift > 0.0)) throw ConfigError("flow schedule: shift must be positive");
    }

    // Shift-warped time for uniform u in [0, 1]; shift = 1 is the identity.
    double warp(double u) const { return shift * u / (1.0 + (shift - 1.0) * u); }

    // Descending grid s_0 = 1 > s_1 > ... > s_n = 0 over sample_steps steps.
    std::vector<double> sample_grid() const {
        std::vector<double> grid(sample_steps + 1);
        for (size_t k = 0; k <= sample_steps; ++k) {
            double u = static_cast<double>(sample_steps - k) / static_cast<double>(sample_steps);
            grid[k] = warp(u);
        }
        return grid;
    }
};

struct LossWeights {
    double lambda_mae = 0.1;
    double gamma = 0.1;

    void validate() const {
        if (!(lambda_mae >= 0.0) || !(gamma >= 0.0) || !std::isfinite(lambda_mae) ||
            !std::isfinite(gamma))
            throw ConfigError("loss weights must be finite and non-negative");
    }
};

struct LossBreakdown {
    double rf = 0.0;
    double mae = 0.0;
    double mem = 0.0;
    double total = 0.0;
};

// ---------------------------------------------------------------------------
// Interpolant and targets
// ---------------------------------------------------------------------------

// Linear-interpolant noising: x_s = (1 - s) x0 + s eps.
inline LatentClip noise_clip(const LatentClip& x0, const LatentClip& eps, double s) {
    if (!x0.same_shape(eps)) throw ShapeError("noise_clip: clip and noise shapes differ");
    LatentClip out(x0.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - s) * x0[i] + s * eps[i];
    return out;
}

// The constant velocity of the straight data->noise path.
inline LatentClip rf_target(const LatentClip& x0, const LatentClip& eps) {
    if (!x0.same_shape(eps)) throw ShapeError("rf_target: shapes differ");
    LatentClip out(x0.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - x0[i];
    return out;
}

// Mean of the temporally resampled retrieved clips (the semantic anchor).
inline LatentClip semantic_anchor(const std::vector<const LatentClip*>& retrieved_clips,
                                  size_t target_frames) {
    if (retrieved_clips.empty())
        throw ValueError("semantic_anchor: empty retrieval set");
    LatentClip acc;
    for (size_t u = 0; u < retrieved_clips.size(); ++u) {
        LatentClip resampled = resample_temporal(*retrieved_clips[u], target_frames);
        if (u == 0) {
            acc = std::move(resampled);
        } else {
            if (!acc.same_shape(resampled))
                throw ShapeError("semantic_anchor: retrieved clips disagree on shape");
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += resampled[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(retrieved_clips.size());
    for (size_t i = 0; i < acc.size(); ++i) acc[i] *= inv;
    return acc;
}

// Memory-regularized target velocity: eps - anchor.
inline LatentClip memory_target(const LatentClip& eps, const LatentClip& anchor) {
    if (!eps.same_shape(anchor)) throw ShapeError("memory_target: shapes differ");
    LatentClip out(eps.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = eps[i] - anchor[i];
    return out;
}

// Element-mean squared error; realizes the expectation in the loss.
inline double mean_squared_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("mean_squared_error: shapes differ");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

inline double mean_absolute_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("mean_absolute_error: shapes differ");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

inline double memory_loss(const Tensor& v_pred, const Tensor& v_mem_target) {
    return mean_squared_error(v_pred, v_mem_target);
}

// total = rf + lambda_mae * mae + gamma * mem.
inline LossBreakdown total_loss(double rf, double mae, double mem, const LossWeights& weights) {
    weights.validate();
    if (!std::isfinite(rf) || !std::isfinite(mae) || !std::isfinite(mem))
        throw ValueError("total_loss: non-finite component");
    LossBreakdown out;
    out.rf = rf;
    out.mae = mae;
    out.mem = mem;
    out.total = rf + weights.lambda_mae * mae + weights.gamma * mem;
    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// One deterministic Euler step along the predicted velocity. `step` indexes
// the shifted grid: z' = z - (s_k - s_{k+1}) v_pred.
inline LatentClip rf_sample_step(const LatentClip& z, const LatentClip& v_pred, size_t step,
                                 const FlowSchedule& schedule) {
    schedule.validate();
    if (!z.same_shape(v_pred)) throw ShapeError("rf_sample_step: shapes differ");
    if (step >= schedule.sample_steps)
        throw ValueError("rf_sample_step: step " + std::to_string(step) + " outside schedule of " +
                         std::to_string(schedule.sample_steps) + " steps");
    const auto grid = schedule.sample_grid();
    const double ds = grid[step] - grid[step + 1];
    LatentClip out(z.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = z[i] - ds * v_pred[i];
    return out;
}

}  // namespace egolcd
