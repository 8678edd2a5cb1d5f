#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/tensor.hpp"

namespace egolcd {

enum class ScriptMode { frames, seconds };

// One script line: a half-open-ish span [start, end] plus its prompt text.
// Spans are frame indices or whole seconds depending on the script mode.
struct NarrativeSegment {
    uint64_t span_start = 0;
    uint64_t span_end = 0;
    std::string prompt_text;
    size_t index = 0;
};

// Ordered, non-overlapping segments sharing one span unit.
struct NarrativeScript {
    ScriptMode mode = ScriptMode::frames;
    std::vector<NarrativeSegment> segments;
    // Non-fatal parse diagnostics (e.g. seconds-mode spans that are not 5 s).
    std::vector<std::string> warnings;

    size_t size() const { return segments.size(); }
};

inline bool operator==(const NarrativeSegment& a, const NarrativeSegment& b) {
    return a.span_start == b.span_start && a.span_end == b.span_end &&
           a.prompt_text == b.prompt_text && a.index == b.index;
}

inline bool operator==(const NarrativeScript& a, const NarrativeScript& b) {
    return a.mode == b.mode && a.segments == b.segments;
}

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Parses one span bound: digits with an optional trailing 's'.
inline uint64_t parse_bound(const std::string& text, bool& has_seconds_suffix, size_t line) {
    std::string t = trim(text);
    if (!t.empty() && (t.back() == 's' || t.back() == 'S')) {
        has_seconds_suffix = true;
        t.pop_back();
        t = trim(t);
    } else {
        has_seconds_suffix = false;
    }
    if (t.empty()) throw ParseError("empty span bound", line);
    uint64_t v = 0;
    for (char c : t) {
        if (!std::isdigit(static_cast<unsigned char>(c)))
            throw ParseError("span bound '" + text + "' is not a non-negative integer", line);
        v = v * 10 + static_cast<uint64_t>(c - '0');
    }
    return v;
}

}  // namespace detail

// Parses a Structured Narrative Prompting script. Grammar, one segment per
// line: `[<start>-<end>] <prompt text>` with an optional `s` suffix on both
// bounds (seconds mode); `#` begins a comment line; blank lines are ignored.
inline NarrativeScript parse_script(const std::string& text) {
    NarrativeScript script;
    std::optional<ScriptMode> mode;
    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t[0] != '[') throw ParseError("segment must start with '[<start>-<end>]'", line_no);
        size_t close = t.find(']');
        if (close == std::string::npos) throw ParseError("missing ']' after span", line_no);
        std::string span = t.substr(1, close - 1);
        size_t dash = span.find('-');
        if (dash == std::string::npos) throw ParseError("span must be '<start>-<end>'", line_no);
        bool start_s = false, end_s = false;
        uint64_t start = detail::parse_bound(span.substr(0, dash), start_s, line_no);
        uint64_t end = detail::parse_bound(span.substr(dash + 1), end_s, line_no);
        if (start_s != end_s) throw ParseError("span bounds mix frames and seconds", line_no);
        ScriptMode line_mode = start_s ? ScriptMode::seconds : ScriptMode::frames;
        if (mode && *mode != line_mode) throw ParseError("script mixes frame and second spans", line_no);
        mode = line_mode;
        if (start >= end)
            throw ParseError("span start " + std::to_string(start) + " must be below end " +
                             std::to_string(end), line_no);
        std::string prompt = detail::trim(t.substr(close + 1));
        if (prompt.empty()) throw ParseError("empty prompt text", line_no);
        if (line_mode == ScriptMode::seconds && end - start != 5)
            script.warnings.push_back("line " + std::to_string(line_no) + ": segment is " +
                                      std::to_string(end - start) + " s, not the usual 5 s");
        script.segments.push_back({start, end, prompt, 0});
    }
    if (script.segments.empty()) throw ParseError("script has no segments", line_no == 0 ? 1 : line_no);
    script.mode = *mode;

    std::stable_sort(script.segments.begin(), script.segments.end(),
                     [](const NarrativeSegment& a, const NarrativeSegment& b) {
                         return a.span_start < b.span_start;
                     });
    for (size_t i = 0; i < script.segments.size(); ++i) {
        script.segments[i].index = i;
        if (i > 0 && script.segments[i].span_start < script.segments[i - 1].span_end)
            throw ParseError("segment [" + std::to_string(script.segments[i].span_start) + "-" +
                             std::to_string(script.segments[i].span_end) + "] overlaps its predecessor",
                             i + 1);
    }
    return script;
}

inline std::string serialize_script(const NarrativeScript& script) {
    std::ostringstream out;
    const char* suffix = script.mode == ScriptMode::seconds ? "s" : "";
    for (const auto& seg : script.segments)
        out << '[' << seg.span_start << suffix << '-' << seg.span_end << suffix << "] "
            << seg.prompt_text << '\n';
    return out.str();
}

inline NarrativeScript load_script(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open script '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_script(buf.str());
}

// ---------------------------------------------------------------------------
// Prompt embeddings
// ---------------------------------------------------------------------------

// Unit-norm prompt embedding; E_t / E_u of the retrieval scoring.
struct PromptEmbedding {
    std::vector<double> vector;
    size_t source_index = 0;

    size_t dim() const { return vector.size(); }
};

// Pluggable text embedder; the default below is a deterministic hash embedder
// standing in for a learned text encoder.
class PromptEmbedder {
public:
    virtual ~PromptEmbedder() = default;
    virtual PromptEmbedding embed(const std::string& text) const = 0;
    virtual size_t dim() const = 0;
};

namespace detail {

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ASCII alphanumerics are lower-cased; bytes >= 0x80 stay part of their
// token so multi-byte UTF-8 words survive intact.
inline std::vector<std::string> tokenize_lower(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

}  // namespace detail

// Bag-of-words hash embedding: each lower-cased token hashes to a coordinate,
// contributes +1 or -1 by hash parity, and the sum is L2-normalized.
// Identical text yields an identical vector on every platform.
class HashEmbedder : public PromptEmbedder {
public:
    explicit HashEmbedder(size_t dim = 256) : dim_(dim) {
        if (dim_ == 0) throw ValueError("HashEmbedder: dimension must be positive");
    }

    size_t dim() const override { return dim_; }

    PromptEmbedding embed(const std::string& text) const override {
        auto tokens = detail::tokenize_lower(text);
        if (tokens.empty()) throw ValueError("embed_prompt: empty prompt text");
        std::vector<double> v(dim_, 0.0);
        for (const auto& tok : tokens) {
            uint64_t h = detail::fnv1a64(tok);
            size_t coord = static_cast<size_t>((h >> 1) % dim_);
            v[coord] += (h & 1) ? 1.0 : -1.0;
        }
        double norm = l2_norm(v);
        if (norm == 0.0) {
            // Pathological exact cancellation: fall back to a single
            // whole-text coordinate so the unit-norm contract still holds.
            v[static_cast<size_t>(detail::fnv1a64(text) % dim_)] = 1.0;
            norm = 1.0;
        }
        for (double& x : v) x /= norm;
        return {std::move(v), 0};
    }

private:
    size_t dim_;
};

inline PromptEmbedding embed_prompt(const std::string& text, size_t d_e = 256) {
    return HashEmbedder(d_e).embed(text);
}

}  // namespace egolcd
