#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/flow.hpp"
#include "egolcd/memory.hpp"
#include "egolcd/model.hpp"
#include "egolcd/narrative.hpp"
#include "egolcd/sparse_cache.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct GenerationConfig {
    size_t sample_steps = 20;
    double guidance_scale = 5.0;
    double shift = 5.0;
    size_t prefix_frames = 9;  // frames of the previous clip held fixed
    size_t top_m = 3;
    double tau = 0.9;
    size_t probe_count = 4;
    ThresholdBasis threshold_basis = ThresholdBasis::normalized;
    uint64_t seed = 0;
    std::string negative_prompt;

    FlowSchedule schedule() const {
        FlowSchedule s;
        s.total_steps = std::max<size_t>(1000, sample_steps);
        s.sample_steps = sample_steps;
        s.guidance_scale = guidance_scale;
        s.shift = shift;
        return s;
    }

    void validate(const ModelConfig& model) const {
        schedule().validate();
        if (sample_steps == 0) throw ConfigError("generation: sample_steps must be >= 1");
        if (prefix_frames >= model.frames)
            throw ConfigError("generation: prefix_frames " + std::to_string(prefix_frames) +
                              " must be below the clip length " + std::to_string(model.frames));
        if (top_m == 0) throw ConfigError("generation: top_m must be >= 1");
        if (!(tau > 0.0) || tau > 1.0) throw ConfigError("generation: tau must be in (0, 1]");
        if (probe_count == 0) throw ConfigError("generation: probe count must be >= 1");
    }
};

struct TrainConfig {
    size_t steps = 200;
    double learning_rate = 1e-5;
    size_t warmup_steps = 200;
    double weight_decay = 1e-4;
    double ema_decay = 0.99;
    double p_video = 0.2;  // drop prefix conditioning
    double p_text = 0.1;   // drop the prompt embedding
    double p_kv = 0.1;     // drop retrieved KV caches
    LossWeights loss_weights;
    uint64_t seed = 0;
    size_t prefix_frames = 9;
    size_t top_m = 3;
    size_t flow_steps = 1000;  // training-time discretization
    bool memory_loss_enabled = true;  // false = the "without regulation loss" ablation
    bool lora_only = false;

    void validate(const ModelConfig& model) const {
        if (steps == 0) throw ConfigError("train: step count must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
        for (double p : {p_video, p_text, p_kv})
            if (!(p >= 0.0) || p > 1.0) throw ConfigError("train: dropout probabilities must be in [0, 1]");
        if (!(ema_decay >= 0.0) || ema_decay >= 1.0)
            throw ConfigError("train: EMA decay must be in [0, 1)");
        if (flow_steps == 0) throw ConfigError("train: flow discretization must be >= 1");
        if (prefix_frames >= model.frames)
            throw ConfigError("train: prefix_frames must be below the clip length");
        loss_weights.validate();
    }
};

// ---------------------------------------------------------------------------
// Results and trace records
// ---------------------------------------------------------------------------

struct ClipResult {
    LatentClip clip;
    size_t prompt_index = 0;
    RetrievalSet retrieval;
    std::vector<LayerCapture> local_kv;
    std::vector<double> retained_ratio;  // per layer, r / L
};

struct TrainStepRecord {
    size_t step = 0;
    size_t sample_index = 0;
    std::vector<uint64_t> retrieval_ids;
    bool text_dropped = false;
    bool video_dropped = false;
    bool kv_dropped = false;
    LossBreakdown losses;
};

namespace detail {

inline std::string join_u64(const std::vector<uint64_t>& v) {
    std::ostringstream out;
    for (size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
    return out.str();
}

inline std::string join_f(const std::vector<double>& v) {
    std::ostringstream out;
    out << std::setprecision(6);
    for (size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
    return out.str();
}

}  // namespace detail

inline std::string format_clip_trace(const ClipResult& r) {
    std::ostringstream out;
    out << "clip=" << r.prompt_index << " retrieval=[" << detail::join_u64(r.retrieval.indices)
        << "] retained=[" << detail::join_f(r.retained_ratio) << "]";
    return out.str();
}

inline std::string format_train_trace(const TrainStepRecord& r) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "step=" << r.step << " sample=" << r.sample_index << " retrieval=["
        << detail::join_u64(r.retrieval_ids) << "] text_drop=" << r.text_dropped
        << " video_drop=" << r.video_dropped << " kv_drop=" << r.kv_dropped
        << " rf=" << r.losses.rf << " mae=" << r.losses.mae << " mem=" << r.losses.mem
        << " total=" << r.losses.total;
    return out.str();
}

// ---------------------------------------------------------------------------
// Small pipeline operations
// ---------------------------------------------------------------------------

// Classifier-free guidance: v_uncond + scale * (v_cond - v_uncond).
inline Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double scale) {
    if (!v_cond.same_shape(v_uncond)) throw ShapeError("cfg_combine: shapes differ");
    Tensor out(v_cond.shape());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
    return out;
}

// Latent decode is the identity at this scale; kept so the pipeline retains
// the Decode step of the generation loop.
inline LatentClip decode_clip(const LatentClip& z) {
    check_clip(z, "decode_clip");
    return z;
}

namespace detail {

// Overwrites the first `prefix` frames of z with the last `prefix` frames of
// the previous clip.
inline void pin_prefix(LatentClip& z, const LatentClip& previous, size_t prefix) {
    const size_t c = z.dim(0), t = z.dim(1), h = z.dim(2), w = z.dim(3);
    const size_t frame = h * w;
    for (size_t ci = 0; ci < c; ++ci)
        for (size_t f = 0; f < prefix; ++f) {
            const double* src = previous.data() + (ci * t + (t - prefix + f)) * frame;
            double* dst = z.data() + (ci * t + f) * frame;
            std::copy_n(src, frame, dst);
        }
}

// Teacher forcing for training: the first `prefix` frames of the noised clip
// are replaced with the clean frames at the same positions.
inline void pin_clean_prefix(LatentClip& z, const LatentClip& clean, size_t prefix) {
    const size_t c = z.dim(0), t = z.dim(1), h = z.dim(2), w = z.dim(3);
    const size_t frame = h * w;
    for (size_t ci = 0; ci < c; ++ci)
        for (size_t f = 0; f < prefix; ++f)
            std::copy_n(clean.data() + (ci * t + f) * frame, frame,
                        z.data() + (ci * t + f) * frame);
}

inline std::vector<double> zero_embedding(size_t dim) { return std::vector<double>(dim, 0.0); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Block-wise semi-autoregressive generation
// ---------------------------------------------------------------------------

// Runs the full generation loop: per script segment, embed the prompt,
// retrieve from the repository, denoise with classifier-free guidance while
// holding the prefix frames of the previous clip fixed, then compress the
// clip's local KV and append it to the repository. Single-threaded per run
// (clips depend on each other); two runs must not share one repository.
inline std::vector<ClipResult> generate_video(const NarrativeScript& script, const ToyDiT& model,
                                              MemoryRepository& repo, const GenerationConfig& cfg,
                                              const PromptEmbedder* embedder = nullptr,
                                              std::vector<std::string>* trace_lines = nullptr,
                                              TraceLog* ops = nullptr) {
    cfg.validate(model.config);
    if (script.segments.empty()) throw ConfigError("generate: script has no segments");
    if (repo.config().layer_count != model.config.layer_count)
        throw ConfigError("generate: repository has " + std::to_string(repo.config().layer_count) +
                          " layers, checkpoint has " + std::to_string(model.config.layer_count));
    if (repo.config().embedding_dim != model.config.embedding_dim)
        throw ConfigError("generate: repository embedding dim differs from checkpoint");

    HashEmbedder default_embedder(model.config.embedding_dim);
    const PromptEmbedder& embed = embedder ? *embedder : default_embedder;
    if (embed.dim() != model.config.embedding_dim)
        throw ConfigError("generate: embedder dim differs from checkpoint");

    const FlowSchedule schedule = cfg.schedule();
    const auto grid = schedule.sample_grid();
    Rng rng(cfg.seed);

    std::vector<double> negative = cfg.negative_prompt.empty()
                                       ? detail::zero_embedding(model.config.embedding_dim)
                                       : embed.embed(cfg.negative_prompt).vector;

    std::vector<ClipResult> results;
    results.reserve(script.segments.size());
    for (size_t t = 0; t < script.segments.size(); ++t) {
        PromptEmbedding emb = embed.embed(script.segments[t].prompt_text);
        emb.source_index = t;

        MemoryContext ctx = prepare_memory_context(repo, emb, cfg.top_m, ops);
        const RetrievedLayers* retrieved = ctx.empty() ? nullptr : &ctx.per_layer;

        LatentClip z = gaussian(rng, model.config.clip_shape());
        if (t > 0 && cfg.prefix_frames > 0)
            detail::pin_prefix(z, results.back().clip, cfg.prefix_frames);

        for (size_t k = 0; k < cfg.sample_steps; ++k) {
            ForwardOptions cond_opts;
            cond_opts.trace = ops;
            Tensor v_cond = model.forward(z, grid[k], emb.vector, retrieved, cond_opts);
            Tensor v_uncond = model.forward(z, grid[k], negative, nullptr);
            Tensor v = cfg_combine(v_cond, v_uncond, cfg.guidance_scale);
            z = rf_sample_step(z, v, k, schedule);
            if (t > 0 && cfg.prefix_frames > 0)
                detail::pin_prefix(z, results.back().clip, cfg.prefix_frames);
        }

        ClipResult result;
        result.clip = decode_clip(z);
        result.prompt_index = t;
        result.retrieval = ctx.retrieval;

        // One conditioning-consistent forward over the finished clip yields
        // the K/V/Q states that become this segment's long-term memory.
        ForwardOptions capture_opts;
        std::vector<LayerCapture> captures;
        capture_opts.capture = &captures;
        model.forward(result.clip, 0.0, emb.vector, retrieved, capture_opts);

        MemoryEntry entry;
        entry.embedding = emb;
        entry.anchor_clip = result.clip;
        entry.per_layer_kv.reserve(captures.size());
        for (size_t l = 0; l < captures.size(); ++l) {
            ProbeSet probes = tail_probes(captures[l].queries, cfg.probe_count);
            SparseLayerKV sparse = compress_layer(captures[l].local, probes, cfg.tau,
                                                  /*causal=*/true, cfg.threshold_basis, l);
            result.retained_ratio.push_back(static_cast<double>(sparse.tokens()) /
                                            static_cast<double>(captures[l].local.tokens()));
            entry.per_layer_kv.push_back(std::move(sparse));
        }
        result.local_kv = std::move(captures);
        repo.append(std::move(entry));

        if (trace_lines) trace_lines->push_back(format_clip_trace(result));
        results.push_back(std::move(result));
    }
    return results;
}

// ---------------------------------------------------------------------------
// Toy training loop
// ---------------------------------------------------------------------------

struct TrainExample {
    NarrativeSegment segment;
    LatentClip clip;
};

struct TrainResult {
    ModelParams ema;
    std::vector<TrainStepRecord> records;
};

// One training run over a fixed dataset: per step, sample an example, apply
// condition dropout, retrieve memory through the same entry point as
// inference, take the combined rectified-flow / MAE / memory-regulation
// gradient step with linear warmup and decoupled weight decay, and track an
// EMA copy of the parameters.
inline TrainResult train_toy(const std::vector<TrainExample>& dataset, ToyDiT& model,
                             const MemoryRepository& repo, const TrainConfig& cfg,
                             const PromptEmbedder* embedder = nullptr,
                             std::vector<std::string>* trace_lines = nullptr,
                             TraceLog* ops = nullptr) {
    cfg.validate(model.config);
    if (dataset.empty()) throw ConfigError("train: dataset is empty");
    if (!repo.empty() && repo.config().layer_count != model.config.layer_count)
        throw ConfigError("train: repository layer count differs from the model");
    if (!repo.empty() && repo.config().embedding_dim != model.config.embedding_dim)
        throw ConfigError("train: repository embedding dim differs from the model");
    for (const auto& ex : dataset)
        if (ex.clip.shape() != model.config.clip_shape())
            throw ConfigError("train: dataset clip shape does not match the model");

    HashEmbedder default_embedder(model.config.embedding_dim);
    const PromptEmbedder& embed = embedder ? *embedder : default_embedder;
    if (embed.dim() != model.config.embedding_dim)
        throw ConfigError("train: embedder dim differs from the model");

    Rng rng(cfg.seed);
    const size_t elements = model.config.patch_dim() * model.config.frames;
    const double inv_n = 1.0 / static_cast<double>(elements);

    TrainResult result;
    result.ema = model.params;
    result.records.reserve(cfg.steps);

    for (size_t step = 0; step < cfg.steps; ++step) {
        const size_t idx = rng.uniform_index(dataset.size());
        const bool text_dropped = rng.uniform() < cfg.p_text;
        const bool video_dropped = rng.uniform() < cfg.p_video;
        const bool kv_dropped = rng.uniform() < cfg.p_kv;
        const double s = static_cast<double>(rng.uniform_index(cfg.flow_steps) + 1) /
                         static_cast<double>(cfg.flow_steps);
        const LatentClip& x0 = dataset[idx].clip;
        LatentClip eps = gaussian(rng, model.config.clip_shape());

        PromptEmbedding emb = embed.embed(dataset[idx].segment.prompt_text);
        MemoryContext ctx = prepare_memory_context(repo, emb, cfg.top_m, ops);
        const bool use_memory = !ctx.empty() && !kv_dropped;

        LatentClip x_s = noise_clip(x0, eps, s);
        if (!video_dropped && cfg.prefix_frames > 0)
            detail::pin_clean_prefix(x_s, x0, cfg.prefix_frames);

        const std::vector<double> zero = detail::zero_embedding(model.config.embedding_dim);
        std::span<const double> prompt_vec = text_dropped ? std::span<const double>(zero)
                                                          : std::span<const double>(emb.vector);

        ModelTape tape;
        ForwardOptions opts;
        opts.tape = &tape;
        opts.trace = ops;
        Tensor v_pred = model.forward(x_s, s, prompt_vec, use_memory ? &ctx.per_layer : nullptr,
                                      opts);

        LatentClip v_star = rf_target(x0, eps);
        const double rf = mean_squared_error(v_pred, v_star);
        const double mae = mean_absolute_error(v_pred, v_star);

        double mem = 0.0;
        LatentClip v_mem;
        const bool mem_active = cfg.memory_loss_enabled && use_memory;
        if (mem_active) {
            LatentClip anchor = semantic_anchor(ctx.anchor_clips, model.config.frames);
            v_mem = memory_target(eps, anchor);
            mem = memory_loss(v_pred, v_mem);
        }
        LossBreakdown losses = total_loss(rf, mae, mem, cfg.loss_weights);

        // d(total)/d(v_pred); exact-zero weights contribute nothing.
        Tensor dv(v_pred.shape());
        for (size_t i = 0; i < dv.size(); ++i) {
            double g = 2.0 * inv_n * (v_pred[i] - v_star[i]);
            if (cfg.loss_weights.lambda_mae != 0.0) {
                const double diff = v_pred[i] - v_star[i];
                const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                g += cfg.loss_weights.lambda_mae * inv_n * sign;
            }
            if (mem_active && cfg.loss_weights.gamma != 0.0)
                g += cfg.loss_weights.gamma * 2.0 * inv_n * (v_pred[i] - v_mem[i]);
            dv[i] = g;
        }

        ModelParams grads = model.backward(tape, dv);
        if (cfg.lora_only)
            visit_params(grads, [&](const std::string& name, Tensor& g) {
                if (!is_lora_param(name)) std::fill(g.values().begin(), g.values().end(), 0.0);
            });

        const double warm = cfg.warmup_steps == 0
                                ? 1.0
                                : std::min(1.0, static_cast<double>(step + 1) /
                                                    static_cast<double>(cfg.warmup_steps));
        const double lr = cfg.learning_rate * warm;

        std::vector<Tensor*> param_list, grad_list, ema_list;
        visit_params(model.params, [&](const std::string&, Tensor& t) { param_list.push_back(&t); });
        visit_params(grads, [&](const std::string&, Tensor& t) { grad_list.push_back(&t); });
        visit_params(result.ema, [&](const std::string&, Tensor& t) { ema_list.push_back(&t); });
        for (size_t p = 0; p < param_list.size(); ++p) {
            Tensor& param = *param_list[p];
            const Tensor& grad = *grad_list[p];
            Tensor& ema = *ema_list[p];
            for (size_t i = 0; i < param.size(); ++i) {
                param[i] -= lr * (grad[i] + cfg.weight_decay * param[i]);
                ema[i] = cfg.ema_decay * ema[i] + (1.0 - cfg.ema_decay) * param[i];
            }
        }

        TrainStepRecord record;
        record.step = step;
        record.sample_index = idx;
        record.retrieval_ids = ctx.retrieval.indices;
        record.text_dropped = text_dropped;
        record.video_dropped = video_dropped;
        record.kv_dropped = kv_dropped;
        record.losses = losses;
        if (trace_lines) trace_lines->push_back(format_train_trace(record));
        result.records.push_back(std::move(record));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Video files: clip count (u32) then serialized clips.
// ---------------------------------------------------------------------------

inline void save_video(const std::vector<LatentClip>& clips, const std::string& path) {
    auto out = open_output(path);
    BinaryWriter w(out);
    w.u32(static_cast<uint32_t>(clips.size()));
    for (const auto& clip : clips) {
        check_clip(clip, "save_video");
        write_tensor(w, clip);
    }
}

inline std::vector<LatentClip> load_video(const std::string& path) {
    auto in = open_input(path);
    BinaryReader r(in);
    uint32_t count = r.u32();
    std::vector<LatentClip> clips;
    clips.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const size_t at = r.offset();
        LatentClip clip = read_tensor(r);
        if (clip.ndim() != 4) throw IoError("video clip " + std::to_string(i) + " is not 4-D", at);
        clips.push_back(std::move(clip));
    }
    if (!r.at_eof()) throw IoError("trailing bytes after video payload", r.offset());
    return clips;
}

// Frames of all clips laid end to end, for whole-video metrics.
inline LatentClip concat_clips(const std::vector<LatentClip>& clips) {
    if (clips.empty()) throw ValueError("concat_clips: no clips");
    const size_t c = clips[0].dim(0), h = clips[0].dim(2), w = clips[0].dim(3);
    size_t total = 0;
    for (const auto& clip : clips) {
        if (clip.dim(0) != c || clip.dim(2) != h || clip.dim(3) != w)
            throw ShapeError("concat_clips: clips disagree on channel or spatial shape");
        total += clip.dim(1);
    }
    LatentClip out({c, total, h, w});
    const size_t frame = h * w;
    size_t at = 0;
    for (const auto& clip : clips) {
        const size_t t = clip.dim(1);
        for (size_t ci = 0; ci < c; ++ci)
            for (size_t f = 0; f < t; ++f)
                std::copy_n(clip.data() + (ci * t + f) * frame, frame,
                            out.data() + (ci * total + at + f) * frame);
        at += t;
    }
    return out;
}

}  // namespace egolcd
