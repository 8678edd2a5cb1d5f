#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "egolcd/errors.hpp"
#include "egolcd/io.hpp"

namespace egolcd {

// Dense row-major real tensor. Arithmetic is double precision throughout;
// persisted arrays are 32-bit (see write_tensor/read_tensor).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<size_t> shape) : shape_(std::move(shape)) {
        data_.assign(checked_size(shape_), 0.0);
    }

    Tensor(std::vector<size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape product " + std::to_string(checked_size(shape_)));
    }

    static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<size_t> shape, double value) {
        Tensor t(std::move(shape));
        t.data_.assign(t.data_.size(), value);
        return t;
    }

    static Tensor identity(size_t n) {
        Tensor t({n, n});
        for (size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t dim(size_t axis) const { return shape_.at(axis); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return {data_.data(), data_.size()}; }
    std::span<const double> values() const { return {data_.data(), data_.size()}; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& at2(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    double at2(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }

    double& at3(size_t i, size_t j, size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at3(size_t i, size_t j, size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double& at4(size_t i, size_t j, size_t k, size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at4(size_t i, size_t j, size_t k, size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void check_finite(const char* where) const {
        for (double v : data_)
            if (!std::isfinite(v)) throw ValueError(std::string(where) + ": non-finite value in tensor");
    }

private:
    static size_t checked_size(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t d : shape) {
            if (d == 0) throw ShapeError("zero-length axis in tensor shape");
            n *= d;
        }
        return n;
    }

    std::vector<size_t> shape_;
    std::vector<double> data_;
};

// One video segment's latent, shaped [C x T x H x W].
using LatentClip = Tensor;

inline void check_clip(const Tensor& clip, const char* where) {
    if (clip.ndim() != 4)
        throw ShapeError(std::string(where) + ": latent clip must have 4 axes, got " +
                         std::to_string(clip.ndim()));
}

// ---------------------------------------------------------------------------
// Deterministic counter-based RNG (splitmix64). The draw sequence depends on
// the seed only. Single-owner: do not share one stream across threads.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    size_t uniform_index(size_t n) {
        if (n == 0) throw ValueError("uniform_index: n must be positive");
        return static_cast<size_t>(next_u64() % n);
    }

    // Standard normal via the polar method; pairs are cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// i.i.d. standard normal tensor, deterministic given the seed state.
inline Tensor gaussian(Rng& rng, std::vector<size_t> shape) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal();
    return t;
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expected 2-D operands, got " + std::to_string(a.ndim()) +
                         "-D x " + std::to_string(b.ndim()) + "-D");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner axes differ (" + std::to_string(a.dim(1)) + " vs " +
                         std::to_string(b.dim(0)) + ")");
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (size_t i = 0; i < m; ++i) {
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            double* orow = po + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// Row-wise softmax with max-subtraction. A mask entry of -inf removes that
// column from its row (output exactly 0); mask entries are otherwise 0.
inline Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr) {
    if (x.ndim() != 2) throw ShapeError("softmax_rows: expected a 2-D tensor");
    if (mask && !mask->same_shape(x)) throw ShapeError("softmax_rows: mask shape differs from input");
    const size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, cols});
    for (size_t i = 0; i < rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < cols; ++j) {
            if (mask && std::isinf(mask->at2(i, j)) && mask->at2(i, j) < 0) continue;
            mx = std::max(mx, x.at2(i, j));
        }
        if (std::isinf(mx))
            throw ValueError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        double sum = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            if (mask && std::isinf(mask->at2(i, j)) && mask->at2(i, j) < 0) {
                out.at2(i, j) = 0.0;
                continue;
            }
            double e = std::exp(x.at2(i, j) - mx);
            out.at2(i, j) = e;
            sum += e;
        }
        for (size_t j = 0; j < cols; ++j) out.at2(i, j) /= sum;
    }
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Cosine similarity <a,b> / (|a||b|); both vectors must be nonzero.
inline double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw ValueError("cosine: similarity undefined for zero-norm vector");
    return dot(a, b) / (na * nb);
}

// Piecewise-linear resampling of a [C x T x H x W] clip along the temporal
// axis, with aligned endpoints. A single-frame target takes the first frame.
inline LatentClip resample_temporal(const LatentClip& clip, size_t target_frames) {
    check_clip(clip, "resample_temporal");
    if (target_frames == 0) throw ShapeError("resample_temporal: target length must be >= 1");
    const size_t c = clip.dim(0), t = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    if (t == target_frames) return clip;
    LatentClip out({c, target_frames, h, w});
    const size_t frame = h * w;
    for (size_t j = 0; j < target_frames; ++j) {
        double pos = (target_frames == 1 || t == 1)
                         ? 0.0
                         : static_cast<double>(j) * static_cast<double>(t - 1) /
                               static_cast<double>(target_frames - 1);
        size_t lo = static_cast<size_t>(pos);
        size_t hi = std::min(lo + 1, t - 1);
        double frac = pos - static_cast<double>(lo);
        for (size_t ci = 0; ci < c; ++ci) {
            const double* a = clip.data() + (ci * t + lo) * frame;
            const double* b = clip.data() + (ci * t + hi) * frame;
            double* o = out.data() + (ci * target_frames + j) * frame;
            for (size_t p = 0; p < frame; ++p) o[p] = a[p] + frac * (b[p] - a[p]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: u32 axis count, u32 axis lengths, then raw f32 row-major.
// ---------------------------------------------------------------------------

inline void write_tensor(BinaryWriter& w, const Tensor& t) {
    if (t.ndim() > std::numeric_limits<uint32_t>::max())
        throw ShapeError("write_tensor: too many axes");
    w.u32(static_cast<uint32_t>(t.ndim()));
    for (size_t d : t.shape()) {
        if (d > std::numeric_limits<uint32_t>::max()) throw ShapeError("write_tensor: axis too long");
        w.u32(static_cast<uint32_t>(d));
    }
    for (double v : t.values()) w.f32(static_cast<float>(v));
}

inline Tensor read_tensor(BinaryReader& r) {
    const size_t header_at = r.offset();
    uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8)
        throw IoError("tensor axis count " + std::to_string(ndim) + " out of range", header_at);
    std::vector<size_t> shape(ndim);
    size_t total = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        uint32_t d = r.u32();
        if (d == 0) throw IoError("zero-length tensor axis", header_at);
        shape[i] = d;
        if (total > (1ull << 32) / d) throw IoError("tensor size implausible", header_at);
        total *= d;
    }
    Tensor t(std::move(shape));
    for (size_t i = 0; i < total; ++i) {
        double v = static_cast<double>(r.f32());
        if (!std::isfinite(v)) throw IoError("non-finite value in tensor payload", r.offset() - 4);
        t[i] = v;
    }
    return t;
}

}  // namespace egolcd
