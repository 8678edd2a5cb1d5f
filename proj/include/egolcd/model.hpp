#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/memory.hpp"
#include "egolcd/sparse_cache.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    size_t layer_count = 2;
    size_t heads = 4;
    size_t head_dim = 16;  // d_k = d_v
    size_t hidden = 64;    // heads * head_dim
    size_t ffn_hidden = 256;
    size_t lora_rank = 4;
    double lora_alpha = 8.0;
    size_t embedding_dim = 256;  // prompt embedding d_e
    // Latent clip geometry [C x T0 x H x W]; one token per frame.
    size_t channels = 4;
    size_t frames = 8;
    size_t height = 8;
    size_t width = 8;

    size_t patch_dim() const { return channels * height * width; }
    size_t tokens() const { return frames; }

    std::vector<size_t> clip_shape() const { return {channels, frames, height, width}; }

    void validate() const {
        if (layer_count == 0 || heads == 0 || head_dim == 0 || hidden == 0 || ffn_hidden == 0 ||
            lora_rank == 0 || embedding_dim == 0 || channels == 0 || frames == 0 || height == 0 ||
            width == 0)
            throw ConfigError("model config: all dimensions must be positive");
        if (heads * head_dim != hidden)
            throw ConfigError("model config: heads * head_dim must equal hidden width (" +
                              std::to_string(heads) + " * " + std::to_string(head_dim) +
                              " != " + std::to_string(hidden) + ")");
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Low-rank adapter. Contribution to a projection is
// (alpha / rank) * (x * down) * up; with up == 0 the contribution is zero.
struct LoRAAdapter {
    Tensor down;  // [d_in x rank]
    Tensor up;    // [rank x d_out]
    double alpha = 8.0;

    size_t rank() const { return down.dim(1); }
    double scale() const { return alpha / static_cast<double>(rank()); }
};

struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, w_k, w_v, w_o;  // [hidden x hidden]
    LoRAAdapter lora_q, lora_k, lora_v, lora_o;
    Tensor ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_b1;  // [hidden x ffn], [ffn]
    Tensor ffn_w2, ffn_b2;  // [ffn x hidden], [hidden]
};

struct ModelParams {
    Tensor patch_w, patch_b;  // [patch_dim x hidden], [hidden]
    Tensor prompt_w;          // [d_e x hidden]
    std::vector<BlockParams> blocks;
    Tensor final_ln_gain, final_ln_bias;
    Tensor head_w, head_b;  // [hidden x patch_dim], [patch_dim]
};

// Visits every trainable tensor in a fixed canonical order.
template <typename Params, typename F>
void visit_params(Params& p, F&& f) {
    f("patch_w", p.patch_w);
    f("patch_b", p.patch_b);
    f("prompt_w", p.prompt_w);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string prefix = "block" + std::to_string(i) + ".";
        f(prefix + "ln1_gain", b.ln1_gain);
        f(prefix + "ln1_bias", b.ln1_bias);
        f(prefix + "w_q", b.w_q);
        f(prefix + "w_k", b.w_k);
        f(prefix + "w_v", b.w_v);
        f(prefix + "w_o", b.w_o);
        f(prefix + "lora_q.down", b.lora_q.down);
        f(prefix + "lora_q.up", b.lora_q.up);
        f(prefix + "lora_k.down", b.lora_k.down);
        f(prefix + "lora_k.up", b.lora_k.up);
        f(prefix + "lora_v.down", b.lora_v.down);
        f(prefix + "lora_v.up", b.lora_v.up);
        f(prefix + "lora_o.down", b.lora_o.down);
        f(prefix + "lora_o.up", b.lora_o.up);
        f(prefix + "ln2_gain", b.ln2_gain);
        f(prefix + "ln2_bias", b.ln2_bias);
        f(prefix + "ffn_w1", b.ffn_w1);
        f(prefix + "ffn_b1", b.ffn_b1);
        f(prefix + "ffn_w2", b.ffn_w2);
        f(prefix + "ffn_b2", b.ffn_b2);
    }
    f("final_ln_gain", p.final_ln_gain);
    f("final_ln_bias", p.final_ln_bias);
    f("head_w", p.head_w);
    f("head_b", p.head_b);
}

inline bool is_lora_param(const std::string& name) {
    return name.find(".lora_") != std::string::npos;
}

// ---------------------------------------------------------------------------
// Small dense helpers
// ---------------------------------------------------------------------------

namespace nn {

inline void add_rows(Tensor& x, const Tensor& bias) {
    const size_t rows = x.dim(0), cols = x.dim(1);
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) x.at2(i, j) += bias[j];
}

inline Tensor transpose(const Tensor& x) {
    Tensor out({x.dim(1), x.dim(0)});
    for (size_t i = 0; i < x.dim(0); ++i)
        for (size_t j = 0; j < x.dim(1); ++j) out.at2(j, i) = x.at2(i, j);
    return out;
}

inline Tensor column_sums(const Tensor& x) {
    Tensor out({x.dim(1)});
    for (size_t i = 0; i < x.dim(0); ++i)
        for (size_t j = 0; j < x.dim(1); ++j) out[j] += x.at2(i, j);
    return out;
}

inline void axpy(Tensor& y, double a, const Tensor& x) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

constexpr double kLnEps = 1e-6;

struct LayerNormTape {
    Tensor x_hat;                  // normalized rows
    std::vector<double> inv_std;   // per row
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         LayerNormTape* tape = nullptr) {
    const size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, cols});
    if (tape) {
        tape->x_hat = Tensor({rows, cols});
        tape->inv_std.assign(rows, 0.0);
    }
    for (size_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (size_t j = 0; j < cols; ++j) mean += x.at2(i, j);
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            double d = x.at2(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv_std = 1.0 / std::sqrt(var + kLnEps);
        for (size_t j = 0; j < cols; ++j) {
            double x_hat = (x.at2(i, j) - mean) * inv_std;
            out.at2(i, j) = x_hat * gain[j] + bias[j];
            if (tape) tape->x_hat.at2(i, j) = x_hat;
        }
        if (tape) tape->inv_std[i] = inv_std;
    }
    return out;
}

// Accumulates dx, d_gain, d_bias from upstream d_out.
inline void layer_norm_backward(const Tensor& d_out, const LayerNormTape& tape, const Tensor& gain,
                                Tensor& dx, Tensor& d_gain, Tensor& d_bias) {
    const size_t rows = d_out.dim(0), cols = d_out.dim(1);
    for (size_t i = 0; i < rows; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            double dy = d_out.at2(i, j);
            double x_hat = tape.x_hat.at2(i, j);
            d_gain[j] += dy * x_hat;
            d_bias[j] += dy;
            double dxh = dy * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * x_hat;
        }
        mean_dxhat /= static_cast<double>(cols);
        mean_dxhat_xhat /= static_cast<double>(cols);
        for (size_t j = 0; j < cols; ++j) {
            double dxh = d_out.at2(i, j) * gain[j];
            dx.at2(i, j) +=
                tape.inv_std[i] * (dxh - mean_dxhat - tape.x_hat.at2(i, j) * mean_dxhat_xhat);
        }
    }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

inline double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); }

inline double gelu_grad(double z) {
    const double phi = 0.3989422804014327 * std::exp(-0.5 * z * z);
    return 0.5 * (1.0 + std::erf(z * kInvSqrt2)) + z * phi;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// LoRA projection
// ---------------------------------------------------------------------------

// y = x * W + (alpha / rank) * (x * down) * up.
inline Tensor lora_project(const Tensor& x, const Tensor& base_w, const LoRAAdapter& adapter) {
    if (x.ndim() != 2 || base_w.ndim() != 2 || x.dim(1) != base_w.dim(0))
        throw ShapeError("lora_project: input/weight shapes disagree");
    if (adapter.down.dim(0) != x.dim(1) || adapter.up.dim(1) != base_w.dim(1) ||
        adapter.down.dim(1) != adapter.up.dim(0))
        throw ShapeError("lora_project: adapter shapes disagree with base weight");
    Tensor y = matmul(x, base_w);
    Tensor low = matmul(x, adapter.down);
    Tensor delta = matmul(low, adapter.up);
    nn::axpy(y, adapter.scale(), delta);
    return y;
}

// Accumulates base/adapter gradients and returns dx.
inline Tensor lora_project_backward(const Tensor& x, const Tensor& base_w,
                                    const LoRAAdapter& adapter, const Tensor& d_y, Tensor& d_base,
                                    Tensor& d_down, Tensor& d_up) {
    const double c = adapter.scale();
    Tensor xt = nn::transpose(x);
    nn::axpy(d_base, 1.0, matmul(xt, d_y));
    Tensor low = matmul(x, adapter.down);      // [n x r]
    nn::axpy(d_up, c, matmul(nn::transpose(low), d_y));
    Tensor d_low = matmul(d_y, nn::transpose(adapter.up));  // [n x r]
    nn::axpy(d_down, c, matmul(xt, d_low));
    Tensor dx = matmul(d_y, nn::transpose(base_w));
    nn::axpy(dx, c, matmul(d_low, nn::transpose(adapter.down)));
    return dx;
}

// ---------------------------------------------------------------------------
// Dual-memory attention block
// ---------------------------------------------------------------------------

struct BlockTape {
    Tensor x_in;
    nn::LayerNormTape ln1;
    Tensor h1;
    Tensor q_flat, k_flat, v_flat;  // [n x hidden]
    LayerKV fused;                  // [Lf x heads x d]
    size_t retrieved_tokens = 0;
    std::vector<Tensor> attn;       // per head, [n x Lf]
    Tensor attn_out;                // [n x hidden], pre output projection
    Tensor x_mid;
    nn::LayerNormTape ln2;
    Tensor h2;
    Tensor ffn_z;  // pre-activation
    Tensor ffn_a;  // post-activation
};

// Local K/V of one block plus its token queries, captured for the post-hoc
// sparse compression step.
struct LayerCapture {
    LayerKV local;
    Tensor queries;  // [n x heads x d_k]
};

namespace detail {

inline Tensor split_heads(const Tensor& flat, size_t heads, size_t head_dim) {
    const size_t n = flat.dim(0);
    Tensor out({n, heads, head_dim});
    for (size_t i = 0; i < n; ++i)
        for (size_t h = 0; h < heads; ++h)
            for (size_t d = 0; d < head_dim; ++d) out.at3(i, h, d) = flat.at2(i, h * head_dim + d);
    return out;
}

}  // namespace detail

struct BlockResult {
    Tensor out;
    LayerKV local;  // pre-fusion K/V, returned for later compression
};

// One dual-memory DiT block: LoRA-augmented projections, optional fusion of
// retrieved sparse KV ahead of the local tokens, attention, LoRA-augmented
// output projection, then the feed-forward half. Pre-LN residual wiring.
inline BlockResult block_forward(const BlockParams& p, const ModelConfig& cfg, const Tensor& x,
                                 const std::vector<const SparseLayerKV*>& retrieved,
                                 BlockTape* tape = nullptr, LayerCapture* capture = nullptr,
                                 TraceLog* trace = nullptr) {
    if (x.ndim() != 2 || x.dim(1) != cfg.hidden)
        throw ShapeError("block_forward: expected tokens of width " + std::to_string(cfg.hidden));
    const size_t n = x.dim(0), heads = cfg.heads, d = cfg.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    nn::LayerNormTape ln1_tape;
    Tensor h1 = nn::layer_norm(x, p.ln1_gain, p.ln1_bias, &ln1_tape);
    Tensor q = lora_project(h1, p.w_q, p.lora_q);
    Tensor k = lora_project(h1, p.w_k, p.lora_k);
    Tensor v = lora_project(h1, p.w_v, p.lora_v);

    LayerKV local{detail::split_heads(k, heads, d), detail::split_heads(v, heads, d)};
    size_t retr_tokens = 0;
    for (const SparseLayerKV* r : retrieved) retr_tokens += r->tokens();
    LayerKV fused = retrieved.empty() ? local : fuse_kv(local, retrieved);
    if (trace && !retrieved.empty()) trace->push_back("model.fuse_kv");
    const size_t lf = fused.tokens();

    std::vector<Tensor> attn(heads);
    Tensor attn_out({n, cfg.hidden});
    for (size_t h = 0; h < heads; ++h) {
        Tensor scores({n, lf});
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < lf; ++j) {
                double s = 0.0;
                for (size_t dd = 0; dd < d; ++dd)
                    s += q.at2(i, h * d + dd) * fused.keys.at3(j, h, dd);
                scores.at2(i, j) = s * inv_sqrt_d;
            }
        Tensor a = softmax_rows(scores);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < lf; ++j) {
                const double aij = a.at2(i, j);
                for (size_t dd = 0; dd < d; ++dd)
                    attn_out.at2(i, h * d + dd) += aij * fused.values.at3(j, h, dd);
            }
        attn[h] = std::move(a);
    }

    Tensor o = lora_project(attn_out, p.w_o, p.lora_o);
    Tensor x_mid = x;
    nn::axpy(x_mid, 1.0, o);

    nn::LayerNormTape ln2_tape;
    Tensor h2 = nn::layer_norm(x_mid, p.ln2_gain, p.ln2_bias, &ln2_tape);
    Tensor z = matmul(h2, p.ffn_w1);
    nn::add_rows(z, p.ffn_b1);
    Tensor act({n, cfg.ffn_hidden});
    for (size_t i = 0; i < act.size(); ++i) act[i] = nn::gelu(z[i]);
    Tensor f = matmul(act, p.ffn_w2);
    nn::add_rows(f, p.ffn_b2);
    Tensor out = x_mid;
    nn::axpy(out, 1.0, f);

    if (capture) {
        capture->local = local;
        capture->queries = detail::split_heads(q, heads, d);
    }
    if (tape) {
        tape->x_in = x;
        tape->ln1 = std::move(ln1_tape);
        tape->h1 = std::move(h1);
        tape->q_flat = std::move(q);
        tape->k_flat = std::move(k);
        tape->v_flat = std::move(v);
        tape->fused = std::move(fused);
        tape->retrieved_tokens = retr_tokens;
        tape->attn = std::move(attn);
        tape->attn_out = std::move(attn_out);
        tape->x_mid = std::move(x_mid);
        tape->ln2 = std::move(ln2_tape);
        tape->h2 = std::move(h2);
        tape->ffn_z = std::move(z);
        tape->ffn_a = std::move(act);
    }
    return {std::move(out), std::move(local)};
}

// Backward through one block. d_out is the gradient at the block output;
// returns the gradient at the block input. Retrieved KV rows are constants,
// so their slice of the fused gradient is dropped.
inline Tensor block_backward(const BlockParams& p, const ModelConfig& cfg, const BlockTape& tape,
                             const Tensor& d_out, BlockParams& g) {
    const size_t n = tape.x_in.dim(0), heads = cfg.heads, d = cfg.head_dim;
    const size_t lf = tape.fused.tokens(), retr = tape.retrieved_tokens;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    // FFN half: out = x_mid + (gelu(h2 w1 + b1) w2 + b2)
    Tensor d_x_mid = d_out;
    Tensor d_act = matmul(d_out, nn::transpose(p.ffn_w2));
    nn::axpy(g.ffn_w2, 1.0, matmul(nn::transpose(tape.ffn_a), d_out));
    nn::axpy(g.ffn_b2, 1.0, nn::column_sums(d_out));
    Tensor d_z({n, cfg.ffn_hidden});
    for (size_t i = 0; i < d_z.size(); ++i) d_z[i] = d_act[i] * nn::gelu_grad(tape.ffn_z[i]);
    nn::axpy(g.ffn_w1, 1.0, matmul(nn::transpose(tape.h2), d_z));
    nn::axpy(g.ffn_b1, 1.0, nn::column_sums(d_z));
    Tensor d_h2 = matmul(d_z, nn::transpose(p.ffn_w1));
    nn::layer_norm_backward(d_h2, tape.ln2, p.ln2_gain, d_x_mid, g.ln2_gain, g.ln2_bias);

    // Attention half: x_mid = x_in + lora_project(attn_out, w_o)
    Tensor d_x_in = d_x_mid;
    Tensor d_attn_out = lora_project_backward(tape.attn_out, p.w_o, p.lora_o, d_x_mid, g.w_o,
                                              g.lora_o.down, g.lora_o.up);

    Tensor d_q({n, cfg.hidden});
    Tensor d_k({n, cfg.hidden});
    Tensor d_v({n, cfg.hidden});
    for (size_t h = 0; h < heads; ++h) {
        const Tensor& a = tape.attn[h];
        // dA and dV_fused
        Tensor d_a({n, lf});
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < lf; ++j) {
                double s = 0.0;
                for (size_t dd = 0; dd < d; ++dd)
                    s += d_attn_out.at2(i, h * d + dd) * tape.fused.values.at3(j, h, dd);
                d_a.at2(i, j) = s;
            }
        // local value grads (retrieved rows are constants)
        for (size_t j = retr; j < lf; ++j)
            for (size_t dd = 0; dd < d; ++dd) {
                double s = 0.0;
                for (size_t i = 0; i < n; ++i) s += a.at2(i, j) * d_attn_out.at2(i, h * d + dd);
                d_v.at2(j - retr, h * d + dd) += s;
            }
        // softmax backward: dS = A o (dA - rowsum(A o dA))
        Tensor d_s({n, lf});
        for (size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (size_t j = 0; j < lf; ++j) row += a.at2(i, j) * d_a.at2(i, j);
            for (size_t j = 0; j < lf; ++j)
                d_s.at2(i, j) = a.at2(i, j) * (d_a.at2(i, j) - row);
        }
        // dQ over all fused keys; dK only for local rows
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < lf; ++j) {
                const double ds = d_s.at2(i, j) * inv_sqrt_d;
                if (ds == 0.0) continue;
                for (size_t dd = 0; dd < d; ++dd)
                    d_q.at2(i, h * d + dd) += ds * tape.fused.keys.at3(j, h, dd);
            }
        for (size_t j = retr; j < lf; ++j)
            for (size_t dd = 0; dd < d; ++dd) {
                double s = 0.0;
                for (size_t i = 0; i < n; ++i)
                    s += d_s.at2(i, j) * tape.q_flat.at2(i, h * d + dd);
                d_k.at2(j - retr, h * d + dd) += s * inv_sqrt_d;
            }
    }

    Tensor d_h1 = lora_project_backward(tape.h1, p.w_q, p.lora_q, d_q, g.w_q, g.lora_q.down,
                                        g.lora_q.up);
    nn::axpy(d_h1, 1.0, lora_project_backward(tape.h1, p.w_k, p.lora_k, d_k, g.w_k, g.lora_k.down,
                                              g.lora_k.up));
    nn::axpy(d_h1, 1.0, lora_project_backward(tape.h1, p.w_v, p.lora_v, d_v, g.w_v, g.lora_v.down,
                                              g.lora_v.up));
    nn::layer_norm_backward(d_h1, tape.ln1, p.ln1_gain, d_x_in, g.ln1_gain, g.ln1_bias);
    return d_x_in;
}

// ---------------------------------------------------------------------------
// ToyDiT: patchify -> conditioning -> dual-memory blocks -> velocity head
// ---------------------------------------------------------------------------

inline std::vector<double> sinusoidal_features(double position, size_t dim) {
    std::vector<double> out(dim, 0.0);
    const size_t half = dim / 2;
    for (size_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                               static_cast<double>(half));
        out[i] = std::cos(position * freq);
        out[half + i] = std::sin(position * freq);
    }
    return out;
}

// Timestep embedding for normalized time s in [0, 1].
inline std::vector<double> timestep_embedding(double s, size_t dim) {
    return sinusoidal_features(s * 1000.0, dim);
}

struct ModelTape {
    Tensor tokens_raw;  // [n x patch_dim]
    std::vector<double> prompt_emb;
    std::vector<BlockTape> blocks;
    nn::LayerNormTape final_ln;
    Tensor final_h;
    bool valid = false;
};

struct ForwardOptions {
    ModelTape* tape = nullptr;
    std::vector<LayerCapture>* capture = nullptr;
    TraceLog* trace = nullptr;
};

using RetrievedLayers = std::vector<std::vector<const SparseLayerKV*>>;

class ToyDiT {
public:
    ModelConfig config;
    ModelParams params;

    // Random base weights, LoRA up matrices zero-initialized so adapters
    // start as exact no-ops.
    static ToyDiT create(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ToyDiT model;
        model.config = cfg;
        ModelParams& p = model.params;
        p.patch_w = init_weight(rng, cfg.patch_dim(), cfg.hidden);
        p.patch_b = Tensor({cfg.hidden});
        p.prompt_w = init_weight(rng, cfg.embedding_dim, cfg.hidden);
        p.blocks.resize(cfg.layer_count);
        for (auto& b : p.blocks) {
            b.ln1_gain = Tensor::full({cfg.hidden}, 1.0);
            b.ln1_bias = Tensor({cfg.hidden});
            b.w_q = init_weight(rng, cfg.hidden, cfg.hidden);
            b.w_k = init_weight(rng, cfg.hidden, cfg.hidden);
            b.w_v = init_weight(rng, cfg.hidden, cfg.hidden);
            b.w_o = init_weight(rng, cfg.hidden, cfg.hidden);
            for (LoRAAdapter* a : {&b.lora_q, &b.lora_k, &b.lora_v, &b.lora_o}) {
                a->down = init_weight(rng, cfg.hidden, cfg.lora_rank);
                a->up = Tensor({cfg.lora_rank, cfg.hidden});
                a->alpha = cfg.lora_alpha;
            }
            b.ln2_gain = Tensor::full({cfg.hidden}, 1.0);
            b.ln2_bias = Tensor({cfg.hidden});
            b.ffn_w1 = init_weight(rng, cfg.hidden, cfg.ffn_hidden);
            b.ffn_b1 = Tensor({cfg.ffn_hidden});
            b.ffn_w2 = init_weight(rng, cfg.ffn_hidden, cfg.hidden);
            b.ffn_b2 = Tensor({cfg.hidden});
        }
        p.final_ln_gain = Tensor::full({cfg.hidden}, 1.0);
        p.final_ln_bias = Tensor({cfg.hidden});
        p.head_w = init_weight(rng, cfg.hidden, cfg.patch_dim());
        p.head_b = Tensor({cfg.patch_dim()});
        return model;
    }

    ModelParams zero_grads() const {
        ModelParams g;
        clone_shapes(params, g);
        return g;
    }

    // Predicts the velocity field for a noised clip at normalized time s.
    // `retrieved`, when present, must provide one cache list per layer.
    Tensor forward(const LatentClip& x, double s, std::span<const double> prompt_emb,
                   const RetrievedLayers* retrieved = nullptr,
                   const ForwardOptions& opts = {}) const {
        check_clip(x, "dit_forward");
        if (x.shape() != config.clip_shape())
            throw ShapeError("dit_forward: clip shape does not match model configuration");
        if (!(s >= 0.0 && s <= 1.0))
            throw ValueError("dit_forward: timestep " + std::to_string(s) + " outside [0, 1]");
        if (prompt_emb.size() != config.embedding_dim)
            throw ShapeError("dit_forward: prompt embedding dim " +
                             std::to_string(prompt_emb.size()) + " != configured " +
                             std::to_string(config.embedding_dim));
        if (retrieved && !retrieved->empty() && retrieved->size() != config.layer_count)
            throw ConfigError("dit_forward: retrieved caches cover " +
                              std::to_string(retrieved->size()) + " layers, model has " +
                              std::to_string(config.layer_count));

        const size_t n = config.tokens();
        Tensor tokens_raw = patchify(x);
        Tensor h = matmul(tokens_raw, params.patch_w);
        nn::add_rows(h, params.patch_b);

        Tensor prompt_vec({1, config.embedding_dim});
        std::copy(prompt_emb.begin(), prompt_emb.end(), prompt_vec.data());
        Tensor prompt_cond = matmul(prompt_vec, params.prompt_w);  // [1 x hidden]
        std::vector<double> time_cond = timestep_embedding(s, config.hidden);
        for (size_t t = 0; t < n; ++t) {
            std::vector<double> pos = sinusoidal_features(static_cast<double>(t), config.hidden);
            for (size_t j = 0; j < config.hidden; ++j)
                h.at2(t, j) += prompt_cond[j] + time_cond[j] + pos[j];
        }

        if (opts.tape) {
            opts.tape->tokens_raw = tokens_raw;
            opts.tape->prompt_emb.assign(prompt_emb.begin(), prompt_emb.end());
            opts.tape->blocks.assign(config.layer_count, {});
        }
        if (opts.capture) opts.capture->assign(config.layer_count, {});

        static const std::vector<const SparseLayerKV*> kNone;
        for (size_t l = 0; l < config.layer_count; ++l) {
            const auto& retr =
                (retrieved && !retrieved->empty()) ? (*retrieved)[l] : kNone;
            BlockResult r = block_forward(params.blocks[l], config, h, retr,
                                          opts.tape ? &opts.tape->blocks[l] : nullptr,
                                          opts.capture ? &(*opts.capture)[l] : nullptr, opts.trace);
            h = std::move(r.out);
        }

        nn::LayerNormTape final_tape;
        Tensor hn = nn::layer_norm(h, params.final_ln_gain, params.final_ln_bias,
                                   opts.tape ? &final_tape : nullptr);
        Tensor v_tokens = matmul(hn, params.head_w);
        nn::add_rows(v_tokens, params.head_b);
        Tensor velocity = unpatchify(v_tokens);
        velocity.check_finite("dit_forward");

        if (opts.tape) {
            opts.tape->final_ln = std::move(final_tape);
            opts.tape->final_h = std::move(hn);
            opts.tape->valid = true;
        }
        return velocity;
    }

    // Gradients of every parameter given the gradient of the velocity field.
    ModelParams backward(const ModelTape& tape, const Tensor& d_velocity) const {
        if (!tape.valid) throw StateError("dit_backward: no recorded forward pass");
        if (d_velocity.shape() != config.clip_shape())
            throw ShapeError("dit_backward: gradient shape does not match the model clip shape");
        ModelParams g = zero_grads();

        Tensor d_tokens = patchify(d_velocity);  // same layout as the head output
        nn::axpy(g.head_w, 1.0, matmul(nn::transpose(tape.final_h), d_tokens));
        nn::axpy(g.head_b, 1.0, nn::column_sums(d_tokens));
        Tensor d_h({config.tokens(), config.hidden});
        Tensor d_hn = matmul(d_tokens, nn::transpose(params.head_w));
        nn::layer_norm_backward(d_hn, tape.final_ln, params.final_ln_gain, d_h, g.final_ln_gain,
                                g.final_ln_bias);

        for (size_t l = config.layer_count; l-- > 0;)
            d_h = block_backward(params.blocks[l], config, tape.blocks[l], d_h, g.blocks[l]);

        // Embedding layer: h = tokens_raw * patch_w + patch_b + conditioning
        nn::axpy(g.patch_w, 1.0, matmul(nn::transpose(tape.tokens_raw), d_h));
        Tensor col = nn::column_sums(d_h);
        nn::axpy(g.patch_b, 1.0, col);
        for (size_t e = 0; e < config.embedding_dim; ++e)
            for (size_t j = 0; j < config.hidden; ++j)
                g.prompt_w.at2(e, j) += tape.prompt_emb[e] * col[j];
        return g;
    }

    Tensor patchify(const LatentClip& x) const {
        const size_t c = config.channels, t = config.frames, hh = config.height, ww = config.width;
        Tensor out({t, config.patch_dim()});
        for (size_t ti = 0; ti < t; ++ti)
            for (size_t ci = 0; ci < c; ++ci)
                for (size_t y = 0; y < hh; ++y)
                    for (size_t xx = 0; xx < ww; ++xx)
                        out.at2(ti, (ci * hh + y) * ww + xx) = x.at4(ci, ti, y, xx);
        return out;
    }

    LatentClip unpatchify(const Tensor& tokens) const {
        const size_t c = config.channels, t = config.frames, hh = config.height, ww = config.width;
        LatentClip out(config.clip_shape());
        for (size_t ti = 0; ti < t; ++ti)
            for (size_t ci = 0; ci < c; ++ci)
                for (size_t y = 0; y < hh; ++y)
                    for (size_t xx = 0; xx < ww; ++xx)
                        out.at4(ci, ti, y, xx) = tokens.at2(ti, (ci * hh + y) * ww + xx);
        return out;
    }

private:
    static Tensor init_weight(Rng& rng, size_t d_in, size_t d_out) {
        Tensor w({d_in, d_out});
        const double std = 1.0 / std::sqrt(static_cast<double>(d_in));
        for (double& v : w.values()) v = rng.normal() * std;
        return w;
    }

    // Mirrors every tensor of src with a zero tensor of the same shape.
    static void clone_shapes(const ModelParams& src, ModelParams& dst) {
        dst.blocks.resize(src.blocks.size());
        std::vector<const Tensor*> shapes;
        visit_params(src, [&](const std::string&, const Tensor& t) { shapes.push_back(&t); });
        size_t idx = 0;
        visit_params(dst, [&](const std::string&, Tensor& t) { t = Tensor(shapes[idx++]->shape()); });
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "TOYDIT\x01", config block, named parameter tensors.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[7] = {'T', 'O', 'Y', 'D', 'I', 'T', '\x01'};

inline void save_checkpoint(const ToyDiT& model, const std::string& path,
                            const ModelParams* ema = nullptr) {
    auto out = open_output(path);
    BinaryWriter w(out);
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    const ModelConfig& c = model.config;
    for (size_t v : {c.layer_count, c.heads, c.head_dim, c.hidden, c.ffn_hidden, c.lora_rank,
                     c.embedding_dim, c.channels, c.frames, c.height, c.width})
        w.u32(static_cast<uint32_t>(v));
    w.f32(static_cast<float>(c.lora_alpha));

    size_t count = 0;
    visit_params(model.params, [&](const std::string&, const Tensor&) { ++count; });
    if (ema) count *= 2;
    w.u32(static_cast<uint32_t>(count));
    visit_params(model.params, [&](const std::string& name, const Tensor& t) {
        w.str(name);
        write_tensor(w, t);
    });
    if (ema)
        visit_params(*ema, [&](const std::string& name, const Tensor& t) {
            w.str("ema." + name);
            write_tensor(w, t);
        });
}

struct Checkpoint {
    ToyDiT model;
    std::optional<ModelParams> ema;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    auto in = open_input(path);
    BinaryReader r(in);
    r.expect_magic(kCheckpointMagic, sizeof(kCheckpointMagic), "checkpoint");
    ModelConfig c;
    c.layer_count = r.u32();
    c.heads = r.u32();
    c.head_dim = r.u32();
    c.hidden = r.u32();
    c.ffn_hidden = r.u32();
    c.lora_rank = r.u32();
    c.embedding_dim = r.u32();
    c.channels = r.u32();
    c.frames = r.u32();
    c.height = r.u32();
    c.width = r.u32();
    c.lora_alpha = static_cast<double>(r.f32());
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("checkpoint config invalid: ") + e.what(), r.offset());
    }

    Rng scratch(0);
    Checkpoint ck{ToyDiT::create(c, scratch), std::nullopt};

    std::map<std::string, Tensor*> slots;
    visit_params(ck.model.params, [&](const std::string& name, Tensor& t) { slots[name] = &t; });
    std::map<std::string, Tensor*> ema_slots;

    uint32_t count = r.u32();
    size_t assigned = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const size_t at = r.offset();
        std::string name = r.str();
        Tensor t = read_tensor(r);
        if (name.rfind("ema.", 0) == 0) {
            if (!ck.ema) {
                ck.ema = ck.model.zero_grads();
                visit_params(*ck.ema, [&](const std::string& n, Tensor& slot) {
                    ema_slots[n] = &slot;
                });
            }
            auto it = ema_slots.find(name.substr(4));
            if (it == ema_slots.end()) throw IoError("unknown EMA parameter '" + name + "'", at);
            if (it->second->shape() != t.shape())
                throw IoError("EMA parameter '" + name + "' has unexpected shape", at);
            *it->second = std::move(t);
            continue;
        }
        auto it = slots.find(name);
        if (it == slots.end()) throw IoError("unknown parameter '" + name + "'", at);
        if (it->second->shape() != t.shape())
            throw IoError("parameter '" + name + "' has unexpected shape", at);
        *it->second = std::move(t);
        ++assigned;
    }
    if (assigned != slots.size())
        throw IoError("checkpoint is missing " + std::to_string(slots.size() - assigned) +
                      " parameters", r.offset());
    return ck;
}

}  // namespace egolcd
