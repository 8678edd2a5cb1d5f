#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// Full key/value cache for one layer: K is [L x H x d_k], V is [L x H x d_v].
struct LayerKV {
    Tensor keys;
    Tensor values;

    size_t tokens() const { return keys.dim(0); }
    size_t heads() const { return keys.dim(1); }
    size_t key_dim() const { return keys.dim(2); }
    size_t value_dim() const { return values.dim(2); }

    void validate() const {
        if (keys.ndim() != 3 || values.ndim() != 3)
            throw ShapeError("LayerKV: keys and values must be [L x H x d]");
        if (keys.dim(0) != values.dim(0) || keys.dim(1) != values.dim(1))
            throw ShapeError("LayerKV: keys and values disagree on token or head count");
    }
};

// Probe queries used only to score cached tokens: [P x H x d_k]. Positions,
// when present, are the probes' 1-based source token positions and drive the
// causal mask.
struct ProbeSet {
    Tensor queries;
    std::vector<size_t> positions;

    size_t count() const { return queries.dim(0); }

    void validate() const {
        if (queries.ndim() != 3) throw ShapeError("ProbeSet: queries must be [P x H x d_k]");
        if (!positions.empty() && positions.size() != queries.dim(0))
            throw ShapeError("ProbeSet: positions length must equal probe count");
    }
};

// Raw and position-normalized per-token importance for one layer.
struct ImportanceProfile {
    std::vector<double> raw;
    std::vector<double> normalized;
    size_t layer = 0;

    size_t tokens() const { return raw.size(); }
};

// Retained token positions (1-based, ascending) with the gathered KV rows.
struct SparseLayerKV {
    std::vector<uint32_t> retained_positions;
    Tensor keys_sparse;    // [r x H x d_k]
    Tensor values_sparse;  // [r x H x d_v]
    size_t origin_length = 0;

    size_t tokens() const { return retained_positions.size(); }
    size_t heads() const { return keys_sparse.dim(1); }
    size_t key_dim() const { return keys_sparse.dim(2); }
    size_t value_dim() const { return values_sparse.dim(2); }
};

// Which importance vector drives the cumulative-mass pruning threshold:
// the position-normalized scores (default) or the raw aggregated attention.
enum class ThresholdBasis { normalized, raw };

// ---------------------------------------------------------------------------
// Probe-based importance scoring
// ---------------------------------------------------------------------------

// Per probe i and head h, softmax over tokens of <q_i, K_j>/sqrt(d_k) plus an
// optional causal mask (token j visible to probe i iff j <= position_i).
// Output is [P x L x H]; every (i, h) slice sums to 1 over tokens.
inline Tensor probe_attention(const ProbeSet& probes, const LayerKV& kv, bool causal = false) {
    probes.validate();
    kv.validate();
    if (probes.queries.dim(1) != kv.heads())
        throw ShapeError("probe_attention: head count mismatch (" +
                         std::to_string(probes.queries.dim(1)) + " vs " +
                         std::to_string(kv.heads()) + ")");
    if (probes.queries.dim(2) != kv.key_dim())
        throw ShapeError("probe_attention: key dimension mismatch");
    if (causal && probes.positions.empty())
        throw ValueError("probe_attention: causal mask requires probe positions");

    const size_t p_count = probes.count(), tokens = kv.tokens(), heads = kv.heads();
    const size_t d_k = kv.key_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));

    Tensor out({p_count, tokens, heads});
    std::vector<double> logits(tokens);
    for (size_t i = 0; i < p_count; ++i) {
        const size_t visible = causal ? std::min(probes.positions[i], tokens) : tokens;
        if (visible == 0)
            throw ValueError("probe_attention: probe " + std::to_string(i) +
                             " has a fully masked row");
        for (size_t h = 0; h < heads; ++h) {
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < visible; ++j) {
                double s = 0.0;
                for (size_t d = 0; d < d_k; ++d)
                    s += probes.queries.at3(i, h, d) * kv.keys.at3(j, h, d);
                logits[j] = s * inv_sqrt_dk;
                mx = std::max(mx, logits[j]);
            }
            double sum = 0.0;
            for (size_t j = 0; j < visible; ++j) {
                logits[j] = std::exp(logits[j] - mx);
                sum += logits[j];
            }
            for (size_t j = 0; j < tokens; ++j)
                out.at3(i, j, h) = j < visible ? logits[j] / sum : 0.0;
        }
    }
    return out;
}

// sigma_p = sum over probes and heads of the attention mass on token p.
inline std::vector<double> importance_scores(const Tensor& probe_weights) {
    if (probe_weights.ndim() != 3)
        throw ShapeError("importance_scores: expected [P x L x H] probe weights");
    const size_t p_count = probe_weights.dim(0), tokens = probe_weights.dim(1),
                 heads = probe_weights.dim(2);
    std::vector<double> sigma(tokens, 0.0);
    for (size_t i = 0; i < p_count; ++i)
        for (size_t j = 0; j < tokens; ++j)
            for (size_t h = 0; h < heads; ++h) sigma[j] += probe_weights.at3(i, j, h);
    return sigma;
}

// Position-aware normalization: token at 1-based position p is divided by
// (L - p + 1), so the most recent token keeps its full mass.
inline std::vector<double> normalize_importance(const std::vector<double>& raw, size_t tokens) {
    if (raw.size() != tokens)
        throw ShapeError("normalize_importance: raw length " + std::to_string(raw.size()) +
                         " != L = " + std::to_string(tokens));
    std::vector<double> normalized(tokens);
    for (size_t j = 0; j < tokens; ++j)
        normalized[j] = raw[j] / static_cast<double>(tokens - j);
    return normalized;
}

inline ImportanceProfile make_importance_profile(const Tensor& probe_weights, size_t layer = 0) {
    ImportanceProfile profile;
    profile.raw = importance_scores(probe_weights);
    profile.normalized = normalize_importance(profile.raw, profile.raw.size());
    profile.layer = layer;
    return profile;
}

// Minimal prefix of importance-sorted tokens whose cumulative mass reaches
// tau of the total; ties sort lower positions first. Returns 1-based
// positions in ascending order.
inline std::vector<uint32_t> select_retained(const ImportanceProfile& profile, double tau,
                                             ThresholdBasis basis = ThresholdBasis::normalized) {
    if (!(tau > 0.0) || tau > 1.0)
        throw ValueError("select_retained: tau must be in (0, 1], got " + std::to_string(tau));
    const std::vector<double>& score =
        basis == ThresholdBasis::normalized ? profile.normalized : profile.raw;
    if (score.size() != profile.raw.size())
        throw ShapeError("select_retained: inconsistent importance profile");
    const size_t tokens = score.size();
    if (tokens == 0) throw ValueError("select_retained: empty importance profile");

    std::vector<uint32_t> order(tokens);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](uint32_t a, uint32_t b) { return score[a] > score[b]; });

    const double total = std::accumulate(score.begin(), score.end(), 0.0);
    const double target = tau * total;
    std::vector<uint32_t> retained;
    double mass = 0.0;
    for (uint32_t idx : order) {
        retained.push_back(idx + 1);
        mass += score[idx];
        if (mass >= target) break;
    }
    std::sort(retained.begin(), retained.end());
    return retained;
}

// Gathers the retained rows; gathered rows are bit-equal to the source rows.
inline SparseLayerKV compress(const LayerKV& kv, const std::vector<uint32_t>& retained_positions) {
    kv.validate();
    const size_t tokens = kv.tokens(), heads = kv.heads();
    const size_t d_k = kv.key_dim(), d_v = kv.value_dim();
    SparseLayerKV sparse;
    sparse.retained_positions = retained_positions;
    sparse.origin_length = tokens;
    if (retained_positions.empty()) throw ValueError("compress: no positions to retain");
    sparse.keys_sparse = Tensor({retained_positions.size(), heads, d_k});
    sparse.values_sparse = Tensor({retained_positions.size(), heads, d_v});
    for (size_t r = 0; r < retained_positions.size(); ++r) {
        uint32_t pos = retained_positions[r];
        if (pos < 1 || pos > tokens)
            throw ValueError("compress: position " + std::to_string(pos) + " outside [1, " +
                             std::to_string(tokens) + "]");
        const size_t j = pos - 1;
        for (size_t h = 0; h < heads; ++h) {
            for (size_t d = 0; d < d_k; ++d) sparse.keys_sparse.at3(r, h, d) = kv.keys.at3(j, h, d);
            for (size_t d = 0; d < d_v; ++d)
                sparse.values_sparse.at3(r, h, d) = kv.values.at3(j, h, d);
        }
    }
    return sparse;
}

// One-call compression pipeline: probe attention -> importance -> normalize
// -> threshold -> gather.
inline SparseLayerKV compress_layer(const LayerKV& kv, const ProbeSet& probes, double tau,
                                    bool causal = false,
                                    ThresholdBasis basis = ThresholdBasis::normalized,
                                    size_t layer = 0) {
    Tensor weights = probe_attention(probes, kv, causal);
    ImportanceProfile profile = make_importance_profile(weights, layer);
    return compress(kv, select_retained(profile, tau, basis));
}

// Attention of a single query over the sparse cache only: softmax of
// <q, K_j>/sqrt(d_k) over retained tokens, output per head is sum alpha_j V_j.
// q is [H x d_k]; the result is [H x d_v].
inline Tensor sparse_attention(const Tensor& query, const SparseLayerKV& cache) {
    if (query.ndim() != 2) throw ShapeError("sparse_attention: query must be [H x d_k]");
    if (cache.tokens() == 0) throw ValueError("sparse_attention: empty cache");
    if (query.dim(0) != cache.heads() || query.dim(1) != cache.key_dim())
        throw ShapeError("sparse_attention: query dims disagree with cache");
    const size_t heads = cache.heads(), r = cache.tokens();
    const size_t d_k = cache.key_dim(), d_v = cache.value_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));

    Tensor out({heads, d_v});
    std::vector<double> logits(r);
    for (size_t h = 0; h < heads; ++h) {
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < r; ++j) {
            double s = 0.0;
            for (size_t d = 0; d < d_k; ++d) s += query.at2(h, d) * cache.keys_sparse.at3(j, h, d);
            logits[j] = s * inv_sqrt_dk;
            mx = std::max(mx, logits[j]);
        }
        double sum = 0.0;
        for (size_t j = 0; j < r; ++j) {
            logits[j] = std::exp(logits[j] - mx);
            sum += logits[j];
        }
        for (size_t j = 0; j < r; ++j) {
            const double alpha = logits[j] / sum;
            for (size_t d = 0; d < d_v; ++d) out.at2(h, d) += alpha * cache.values_sparse.at3(j, h, d);
        }
    }
    return out;
}

// Full cache viewed as a sparse cache that retains everything (the tau = 1
// saturation path).
inline SparseLayerKV full_cache(const LayerKV& kv) {
    std::vector<uint32_t> all(kv.tokens());
    std::iota(all.begin(), all.end(), 1u);
    return compress(kv, all);
}

// Default probe choice: the queries of the last min(max_probes, L) tokens.
inline ProbeSet tail_probes(const Tensor& token_queries, size_t max_probes = 4) {
    if (token_queries.ndim() != 3) throw ShapeError("tail_probes: queries must be [L x H x d_k]");
    const size_t tokens = token_queries.dim(0), heads = token_queries.dim(1),
                 d_k = token_queries.dim(2);
    const size_t n = std::min(max_probes, tokens);
    ProbeSet probes;
    probes.queries = Tensor({n, heads, d_k});
    probes.positions.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const size_t src = tokens - n + i;
        probes.positions[i] = src + 1;
        for (size_t h = 0; h < heads; ++h)
            for (size_t d = 0; d < d_k; ++d)
                probes.queries.at3(i, h, d) = token_queries.at3(src, h, d);
    }
    return probes;
}

// ---------------------------------------------------------------------------
// Serialization (shared by the repository format and compress-cache CLI)
// ---------------------------------------------------------------------------

inline void write_sparse_kv(BinaryWriter& w, const SparseLayerKV& kv) {
    w.u32(static_cast<uint32_t>(kv.origin_length));
    w.u32(static_cast<uint32_t>(kv.retained_positions.size()));
    for (uint32_t pos : kv.retained_positions) w.u32(pos);
    write_tensor(w, kv.keys_sparse);
    write_tensor(w, kv.values_sparse);
}

inline SparseLayerKV read_sparse_kv(BinaryReader& r) {
    SparseLayerKV kv;
    kv.origin_length = r.u32();
    uint32_t count = r.u32();
    if (count == 0 || count > kv.origin_length)
        throw IoError("retained-token count " + std::to_string(count) + " out of range",
                      r.offset() - 4);
    kv.retained_positions.resize(count);
    for (uint32_t i = 0; i < count; ++i) kv.retained_positions[i] = r.u32();
    kv.keys_sparse = read_tensor(r);
    kv.values_sparse = read_tensor(r);
    if (kv.keys_sparse.ndim() != 3 || kv.values_sparse.ndim() != 3 ||
        kv.keys_sparse.dim(0) != count || kv.values_sparse.dim(0) != count)
        throw IoError("sparse KV tensors disagree with retained count", r.offset());
    return kv;
}

}  // namespace egolcd
