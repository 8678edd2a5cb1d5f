#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/narrative.hpp"
#include "egolcd/sparse_cache.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

// One historical record: prompt embedding, per-layer sparse KV, and the
// stored decoded-latent segment used as the semantic-anchor source.
struct MemoryEntry {
    PromptEmbedding embedding;
    std::vector<SparseLayerKV> per_layer_kv;
    LatentClip anchor_clip;
    uint64_t entry_id = 0;
};

struct RepositoryConfig {
    size_t embedding_dim = 256;
    size_t layer_count = 2;
    std::optional<size_t> max_entries;
};

// Ids of the retrieved entries (the R_t) with their scores, best first.
struct RetrievalSet {
    std::vector<uint64_t> indices;
    std::vector<double> scores;

    size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }
};

// Append-only long-term memory repository H. Entries are immutable after
// append; reads on a fixed repository are referentially transparent. Callers
// must serialize writers (append/save); concurrent readers are fine.
class MemoryRepository {
public:
    MemoryRepository() = default;
    explicit MemoryRepository(RepositoryConfig config) : config_(config) {
        if (config_.max_entries && *config_.max_entries == 0)
            throw ConfigError("memory: capacity cap must be >= 1");
    }

    const RepositoryConfig& config() const { return config_; }
    const std::vector<MemoryEntry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    const MemoryEntry& by_id(uint64_t entry_id) const {
        for (const auto& e : entries_)
            if (e.entry_id == entry_id) return e;
        throw ValueError("memory: no entry with id " + std::to_string(entry_id));
    }

    // Assigns entry_id = previous max + 1 and evicts the oldest entry when a
    // capacity cap is configured and exceeded.
    uint64_t append(MemoryEntry entry) {
        if (entry.embedding.dim() != config_.embedding_dim)
            throw ShapeError("memory append: embedding dim " + std::to_string(entry.embedding.dim()) +
                             " != repository dim " + std::to_string(config_.embedding_dim));
        if (entry.per_layer_kv.size() != config_.layer_count)
            throw ShapeError("memory append: entry has " + std::to_string(entry.per_layer_kv.size()) +
                             " layers, repository expects " + std::to_string(config_.layer_count));
        check_clip(entry.anchor_clip, "memory append");
        entry.entry_id = next_id_++;
        entries_.push_back(std::move(entry));
        if (config_.max_entries && entries_.size() > *config_.max_entries)
            entries_.erase(entries_.begin());
        return entries_.back().entry_id;
    }

private:
    RepositoryConfig config_;
    std::vector<MemoryEntry> entries_;
    uint64_t next_id_ = 0;

    friend MemoryRepository load_repository(const std::string& path);
};

// Cosine relevance of the query against every stored embedding, in storage
// order. An empty repository yields an empty list.
inline std::vector<std::pair<uint64_t, double>> relevance(const MemoryRepository& repo,
                                                          const PromptEmbedding& query) {
    std::vector<std::pair<uint64_t, double>> scores;
    scores.reserve(repo.size());
    for (const auto& entry : repo.entries()) {
        if (entry.embedding.dim() != query.dim())
            throw ShapeError("relevance: query dim " + std::to_string(query.dim()) +
                             " != stored dim " + std::to_string(entry.embedding.dim()));
        scores.emplace_back(entry.entry_id, cosine(query.vector, entry.embedding.vector));
    }
    return scores;
}

// Top-m of an already-scored list; ties break toward the lower (older)
// entry_id.
inline RetrievalSet top_m_of(std::vector<std::pair<uint64_t, double>> scored, size_t m) {
    if (m == 0) throw ValueError("retrieve_top_m: m must be >= 1");
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    RetrievalSet result;
    const size_t take = std::min(m, scored.size());
    result.indices.reserve(take);
    result.scores.reserve(take);
    for (size_t i = 0; i < take; ++i) {
        result.indices.push_back(scored[i].first);
        result.scores.push_back(scored[i].second);
    }
    return result;
}

inline RetrievalSet retrieve_top_m(const MemoryRepository& repo, const PromptEmbedding& query,
                                   size_t m) {
    return top_m_of(relevance(repo, query), m);
}

// Concatenates retrieved KV before the local KV along the token axis,
// keeping retrieval order then stored-token order. Every input token is
// copied bit-exactly; the local rows occupy the tail of the fused tensors.
inline LayerKV fuse_kv(const LayerKV& current, const std::vector<const SparseLayerKV*>& retrieved) {
    current.validate();
    if (retrieved.empty()) return current;
    const size_t heads = current.heads(), d_k = current.key_dim(), d_v = current.value_dim();
    size_t total = current.tokens();
    for (const SparseLayerKV* r : retrieved) {
        if (r->heads() != heads || r->key_dim() != d_k || r->value_dim() != d_v)
            throw ShapeError("fuse_kv: retrieved cache head/channel dims disagree with local KV");
        total += r->tokens();
    }
    LayerKV fused;
    fused.keys = Tensor({total, heads, d_k});
    fused.values = Tensor({total, heads, d_v});
    size_t row = 0;
    auto copy_rows = [&](const Tensor& src_k, const Tensor& src_v, size_t count) {
        std::copy_n(src_k.data(), count * heads * d_k, fused.keys.data() + row * heads * d_k);
        std::copy_n(src_v.data(), count * heads * d_v, fused.values.data() + row * heads * d_v);
        row += count;
    };
    for (const SparseLayerKV* r : retrieved) copy_rows(r->keys_sparse, r->values_sparse, r->tokens());
    copy_rows(current.keys, current.values, current.tokens());
    return fused;
}

// ---------------------------------------------------------------------------
// Shared retrieval entry point
// ---------------------------------------------------------------------------

// Ordered log of memory operations; used to assert that training and
// inference walk the identical retrieval/fusion path.
using TraceLog = std::vector<std::string>;

// Retrieval result handed to the model: the R_t plus, per model layer, the
// retrieved sparse caches in retrieval order.
struct MemoryContext {
    RetrievalSet retrieval;
    std::vector<std::vector<const SparseLayerKV*>> per_layer;
    std::vector<const LatentClip*> anchor_clips;

    bool empty() const { return retrieval.empty(); }
};

// The single retrieval path used by both training and inference. Every
// caller goes through here so the two phases cannot diverge.
inline MemoryContext prepare_memory_context(const MemoryRepository& repo,
                                            const PromptEmbedding& query, size_t m,
                                            TraceLog* trace = nullptr) {
    MemoryContext ctx;
    if (trace) trace->push_back("memory.relevance");
    auto scored = relevance(repo, query);
    if (trace) trace->push_back("memory.retrieve_top_m");
    ctx.retrieval = top_m_of(std::move(scored), m);
    if (trace) trace->push_back("memory.fetch_kv");
    ctx.per_layer.assign(repo.config().layer_count, {});
    for (uint64_t id : ctx.retrieval.indices) {
        const MemoryEntry& entry = repo.by_id(id);
        for (size_t l = 0; l < entry.per_layer_kv.size(); ++l)
            ctx.per_layer[l].push_back(&entry.per_layer_kv[l]);
        ctx.anchor_clips.push_back(&entry.anchor_clip);
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Persistence: magic "EGOLCD\x01", config block, length-prefixed entries.
// ---------------------------------------------------------------------------

inline constexpr char kRepositoryMagic[7] = {'E', 'G', 'O', 'L', 'C', 'D', '\x01'};

inline void save_repository(const MemoryRepository& repo, const std::string& path) {
    auto out = open_output(path);
    BinaryWriter w(out);
    w.bytes(kRepositoryMagic, sizeof(kRepositoryMagic));
    w.u32(static_cast<uint32_t>(repo.config().embedding_dim));
    w.u32(static_cast<uint32_t>(repo.config().layer_count));
    w.u32(repo.config().max_entries ? static_cast<uint32_t>(*repo.config().max_entries) : 0u);
    w.u32(static_cast<uint32_t>(repo.size()));
    for (const auto& entry : repo.entries()) {
        // Length prefix lets a reader skip or bound-check each entry.
        std::ostringstream blob_stream;
        BinaryWriter blob(blob_stream);
        blob.u64(entry.entry_id);
        blob.u32(static_cast<uint32_t>(entry.embedding.source_index));
        for (double v : entry.embedding.vector) blob.f32(static_cast<float>(v));
        for (const auto& kv : entry.per_layer_kv) write_sparse_kv(blob, kv);
        write_tensor(blob, entry.anchor_clip);
        const std::string bytes = blob_stream.str();
        w.u64(bytes.size());
        w.bytes(bytes.data(), bytes.size());
    }
}

inline MemoryRepository load_repository(const std::string& path) {
    auto in = open_input(path);
    BinaryReader r(in);
    r.expect_magic(kRepositoryMagic, sizeof(kRepositoryMagic), "repository");
    RepositoryConfig config;
    config.embedding_dim = r.u32();
    config.layer_count = r.u32();
    uint32_t max_entries = r.u32();
    if (max_entries > 0) config.max_entries = max_entries;
    uint32_t count = r.u32();
    MemoryRepository repo(config);
    uint64_t max_id = 0;
    for (uint32_t i = 0; i < count; ++i) {
        const size_t entry_at = r.offset();
        uint64_t blob_len = r.u64();
        MemoryEntry entry;
        entry.entry_id = r.u64();
        entry.embedding.source_index = r.u32();
        entry.embedding.vector.resize(config.embedding_dim);
        for (size_t d = 0; d < config.embedding_dim; ++d)
            entry.embedding.vector[d] = static_cast<double>(r.f32());
        entry.per_layer_kv.reserve(config.layer_count);
        for (size_t l = 0; l < config.layer_count; ++l)
            entry.per_layer_kv.push_back(read_sparse_kv(r));
        entry.anchor_clip = read_tensor(r);
        if (entry.anchor_clip.ndim() != 4)
            throw IoError("repository entry anchor clip is not 4-D", entry_at);
        if (r.offset() - entry_at - 8 != blob_len)
            throw IoError("repository entry length prefix mismatch", entry_at);
        max_id = std::max(max_id, entry.entry_id + 1);
        repo.entries_.push_back(std::move(entry));
    }
    if (!r.at_eof()) throw IoError("trailing bytes after repository payload", r.offset());
    repo.next_id_ = max_id;
    return repo;
}

}  // namespace egolcd
