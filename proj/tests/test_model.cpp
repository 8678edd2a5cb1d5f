#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "egolcd/model.hpp"
#include "test_support.hpp"

using namespace egolcd;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.layer_count = 2;
    c.heads = 4;
    c.head_dim = 4;
    c.hidden = 16;
    c.ffn_hidden = 32;
    c.lora_rank = 2;
    c.lora_alpha = 4.0;
    c.embedding_dim = 8;
    c.channels = 2;
    c.frames = 4;
    c.height = 3;
    c.width = 3;
    return c;
}

std::vector<double> random_embedding(Rng& rng, size_t dim) {
    std::vector<double> e(dim);
    for (double& v : e) v = rng.normal();
    double n = l2_norm(e);
    for (double& v : e) v /= n;
    return e;
}

// Retrieved caches for every layer, built from random full KV.
struct RetrievedFixture {
    std::vector<SparseLayerKV> storage;
    RetrievedLayers layers;
};

RetrievedFixture make_retrieved(Rng& rng, const ModelConfig& cfg, size_t per_layer = 2,
                                size_t tokens = 3) {
    RetrievedFixture fx;
    fx.storage.reserve(cfg.layer_count * per_layer);
    fx.layers.resize(cfg.layer_count);
    for (size_t l = 0; l < cfg.layer_count; ++l)
        for (size_t r = 0; r < per_layer; ++r) {
            LayerKV kv = test::random_layer_kv(rng, tokens, cfg.heads, cfg.head_dim, cfg.head_dim);
            fx.storage.push_back(full_cache(kv));
        }
    // pointers are stable once storage stops growing
    for (size_t l = 0; l < cfg.layer_count; ++l)
        for (size_t r = 0; r < per_layer; ++r)
            fx.layers[l].push_back(&fx.storage[l * per_layer + r]);
    return fx;
}

// Standalone base-weight dual-memory block: the same wiring as the library
// block with every adapter term removed, assembled from public primitives.
Tensor base_block_oracle(const BlockParams& p, const ModelConfig& cfg, const Tensor& x,
                         const std::vector<const SparseLayerKV*>& retrieved) {
    const size_t n = x.dim(0), heads = cfg.heads, d = cfg.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor h1 = nn::layer_norm(x, p.ln1_gain, p.ln1_bias);
    Tensor q = matmul(h1, p.w_q);
    Tensor k = matmul(h1, p.w_k);
    Tensor v = matmul(h1, p.w_v);
    LayerKV local{detail::split_heads(k, heads, d), detail::split_heads(v, heads, d)};
    LayerKV fused = retrieved.empty() ? local : fuse_kv(local, retrieved);
    const size_t lf = fused.tokens();
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
            for (size_t j = 0; j < lf; ++j)
                for (size_t dd = 0; dd < d; ++dd)
                    attn_out.at2(i, h * d + dd) += a.at2(i, j) * fused.values.at3(j, h, dd);
    }
    Tensor o = matmul(attn_out, p.w_o);
    Tensor x_mid = x;
    nn::axpy(x_mid, 1.0, o);
    Tensor h2 = nn::layer_norm(x_mid, p.ln2_gain, p.ln2_bias);
    Tensor z = matmul(h2, p.ffn_w1);
    nn::add_rows(z, p.ffn_b1);
    Tensor act({n, cfg.ffn_hidden});
    for (size_t i = 0; i < act.size(); ++i) act[i] = nn::gelu(z[i]);
    Tensor f = matmul(act, p.ffn_w2);
    nn::add_rows(f, p.ffn_b2);
    Tensor out = x_mid;
    nn::axpy(out, 1.0, f);
    return out;
}

void randomize_lora_up(ToyDiT& model, Rng& rng, double scale = 0.1) {
    visit_params(model.params, [&](const std::string& name, Tensor& t) {
        if (name.find(".up") != std::string::npos && is_lora_param(name))
            for (double& v : t.values()) v = rng.normal() * scale;
    });
}

}  // namespace

TEST_CASE("lora projection zero-init and substitution cases") {
    Rng rng(71);
    Tensor x = test::random_tensor(rng, {3, 4});
    Tensor w = test::random_tensor(rng, {4, 4});

    LoRAAdapter zero;
    zero.down = test::random_tensor(rng, {4, 2});
    zero.up = Tensor({2, 4});
    zero.alpha = 8.0;
    CHECK(test::bitwise_equal(lora_project(x, w, zero), matmul(x, w)));

    // identity adapter at full rank with zero base: (alpha / r) * x
    LoRAAdapter ident;
    ident.down = Tensor::identity(4);
    ident.up = Tensor::identity(4);
    ident.alpha = 8.0;
    Tensor zero_w({4, 4});
    Tensor out = lora_project(x, zero_w, ident);
    for (size_t i = 0; i < out.size(); ++i)
        CHECK(out[i] == Catch::Approx(8.0 / 4.0 * x[i]).margin(1e-12));

    // rank-1 identity in one dimension gives exactly alpha * x
    Tensor x1 = test::random_tensor(rng, {2, 1});
    LoRAAdapter unit{Tensor::identity(1), Tensor::identity(1), 5.0};
    Tensor out1 = lora_project(x1, Tensor({1, 1}), unit);
    for (size_t i = 0; i < out1.size(); ++i) CHECK(out1[i] == Catch::Approx(5.0 * x1[i]));
}

TEST_CASE("lora projection matches the explicit two-matmul composition") {
    Rng rng(72);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x = test::random_tensor(rng, {5, 6});
        Tensor w = test::random_tensor(rng, {6, 3});
        LoRAAdapter a;
        a.down = test::random_tensor(rng, {6, 2});
        a.up = test::random_tensor(rng, {2, 3});
        a.alpha = 8.0;
        Tensor expect = test::matmul_oracle(x, w);
        Tensor delta = test::matmul_oracle(test::matmul_oracle(x, a.down), a.up);
        for (size_t i = 0; i < expect.size(); ++i) expect[i] += a.scale() * delta[i];
        CHECK(test::max_abs_diff(lora_project(x, w, a), expect) < 1e-12);
    }
    Tensor x({2, 3});
    Tensor w({4, 4});
    LoRAAdapter a{Tensor({3, 2}), Tensor({2, 4}), 1.0};
    CHECK_THROWS_AS(lora_project(x, w, a), ShapeError);
}

TEST_CASE("zero-init adapters reproduce the base block bit-for-bit") {
    Rng rng(73);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);  // up matrices are zero at creation
    RetrievedFixture fx = make_retrieved(rng, cfg);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = test::random_tensor(rng, {cfg.tokens(), cfg.hidden});
        for (size_t l = 0; l < cfg.layer_count; ++l) {
            BlockResult got = block_forward(model.params.blocks[l], cfg, x, fx.layers[l]);
            Tensor expect = base_block_oracle(model.params.blocks[l], cfg, x, fx.layers[l]);
            CHECK(test::bitwise_equal(got.out, expect));

            BlockResult plain = block_forward(model.params.blocks[l], cfg, x, {});
            Tensor plain_expect = base_block_oracle(model.params.blocks[l], cfg, x, {});
            CHECK(test::bitwise_equal(plain.out, plain_expect));
        }
    }
}

TEST_CASE("block forward is deterministic and returns pre-fusion KV") {
    Rng rng(74);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    randomize_lora_up(model, rng);
    RetrievedFixture fx = make_retrieved(rng, cfg);
    Tensor x = test::random_tensor(rng, {cfg.tokens(), cfg.hidden});

    BlockResult a = block_forward(model.params.blocks[0], cfg, x, fx.layers[0]);
    BlockResult b = block_forward(model.params.blocks[0], cfg, x, fx.layers[0]);
    CHECK(test::bitwise_equal(a.out, b.out));

    // the returned local KV ignores retrieval entirely
    BlockResult plain = block_forward(model.params.blocks[0], cfg, x, {});
    CHECK(test::bitwise_equal(a.local.keys, plain.local.keys));
    CHECK(test::bitwise_equal(a.local.values, plain.local.values));
    CHECK(a.local.tokens() == cfg.tokens());
}

TEST_CASE("dit forward shape contract and zero-weight degenerate case") {
    Rng rng(75);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb = random_embedding(rng, cfg.embedding_dim);

    Tensor v = model.forward(x, 0.5, emb);
    CHECK(v.shape() == x.shape());

    ToyDiT zeroed = model;
    visit_params(zeroed.params, [](const std::string&, Tensor& t) {
        for (double& val : t.values()) val = 0.0;
    });
    Tensor zv = zeroed.forward(x, 0.5, emb);
    for (double val : zv.values()) CHECK(val == 0.0);
}

TEST_CASE("dit forward validates inputs") {
    Rng rng(76);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    auto emb = random_embedding(rng, cfg.embedding_dim);
    LatentClip x = test::random_tensor(rng, cfg.clip_shape());

    LatentClip wrong = test::random_tensor(rng, {2, 5, 3, 3});
    CHECK_THROWS_AS(model.forward(wrong, 0.5, emb), ShapeError);
    CHECK_THROWS_AS(model.forward(x, 1.5, emb), ValueError);
    std::vector<double> short_emb(3, 0.1);
    CHECK_THROWS_AS(model.forward(x, 0.5, short_emb), ShapeError);

    RetrievedFixture fx = make_retrieved(rng, cfg);
    RetrievedLayers short_layers(fx.layers.begin(), fx.layers.begin() + 1);
    CHECK_THROWS_AS(model.forward(x, 0.5, emb, &short_layers), ConfigError);
}

TEST_CASE("prompt conditioning and timestep conditioning are non-degenerate") {
    Rng rng(77);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb_a = random_embedding(rng, cfg.embedding_dim);
    auto emb_b = random_embedding(rng, cfg.embedding_dim);

    Tensor va = model.forward(x, 0.5, emb_a);
    Tensor vb = model.forward(x, 0.5, emb_b);
    CHECK(test::max_abs_diff(va, vb) > 1e-9);

    // distinct schedule timesteps give distinct conditioning vectors
    FlowSchedule sched;
    sched.sample_steps = 20;
    auto grid = sched.sample_grid();
    for (size_t i = 0; i < grid.size(); ++i)
        for (size_t j = i + 1; j < grid.size(); ++j) {
            auto ti = timestep_embedding(grid[i], cfg.hidden);
            auto tj = timestep_embedding(grid[j], cfg.hidden);
            double diff = 0.0;
            for (size_t d = 0; d < cfg.hidden; ++d) diff = std::max(diff, std::abs(ti[d] - tj[d]));
            CHECK(diff > 1e-9);
        }
}

TEST_CASE("empty retrieval lists equal no retrieval at all") {
    Rng rng(78);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    randomize_lora_up(model, rng);
    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb = random_embedding(rng, cfg.embedding_dim);

    RetrievedLayers empty_lists(cfg.layer_count);
    Tensor with_lists = model.forward(x, 0.3, emb, &empty_lists);
    Tensor without = model.forward(x, 0.3, emb, nullptr);
    CHECK(test::bitwise_equal(with_lists, without));
}

TEST_CASE("backward requires a recorded forward and maps zero to zero") {
    Rng rng(79);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    ModelTape tape;
    CHECK_THROWS_AS(model.backward(tape, Tensor(cfg.clip_shape())), StateError);

    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb = random_embedding(rng, cfg.embedding_dim);
    ForwardOptions opts;
    opts.tape = &tape;
    model.forward(x, 0.5, emb, nullptr, opts);
    ModelParams grads = model.backward(tape, Tensor(cfg.clip_shape()));
    visit_params(grads, [](const std::string&, Tensor& g) {
        for (double v : g.values()) CHECK(v == 0.0);
    });
}

TEST_CASE("every parameter gradient matches central finite differences") {
    Rng rng(80);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    randomize_lora_up(model, rng);  // exercise both adapter factors
    RetrievedFixture fx = make_retrieved(rng, cfg);

    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb = random_embedding(rng, cfg.embedding_dim);
    LatentClip target = test::random_tensor(rng, cfg.clip_shape());
    const double s = 0.37;
    const double inv_n = 1.0 / static_cast<double>(target.size());

    // once with retrieved caches fused in, once without
    const RetrievedLayers* variants[] = {&fx.layers, nullptr};
    for (const RetrievedLayers* retrieved : variants) {
        auto loss = [&]() {
            Tensor v = model.forward(x, s, emb, retrieved);
            return mean_squared_error(v, target);
        };

        ModelTape tape;
        ForwardOptions opts;
        opts.tape = &tape;
        Tensor v = model.forward(x, s, emb, retrieved, opts);
        Tensor dv(v.shape());
        for (size_t i = 0; i < dv.size(); ++i) dv[i] = 2.0 * inv_n * (v[i] - target[i]);
        ModelParams analytic = model.backward(tape, dv);

        std::vector<Tensor*> grads;
        visit_params(analytic, [&](const std::string&, Tensor& g) { grads.push_back(&g); });

        const double h = 1e-5;
        size_t group = 0;
        size_t worst_count = 0;
        visit_params(model.params, [&](const std::string& name, Tensor& t) {
            const Tensor& g = *grads[group++];
            for (size_t i = 0; i < t.size(); ++i) {
                const double keep = t[i];
                t[i] = keep + h;
                const double up = loss();
                t[i] = keep - h;
                const double down = loss();
                t[i] = keep;
                const double fd = (up - down) / (2.0 * h);
                const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
                if (std::abs(fd - g[i]) / denom >= 1e-3) {
                    ++worst_count;
                    UNSCOPED_INFO(name << "[" << i << "]: analytic " << g[i] << " vs fd " << fd);
                }
            }
            CHECK(worst_count == 0);
        });
    }
}

TEST_CASE("checkpoints round-trip and reject corruption") {
    Rng rng(81);
    ModelConfig cfg = tiny_config();
    ToyDiT model = ToyDiT::create(cfg, rng);
    randomize_lora_up(model, rng);
    std::string path = test::temp_path("ckpt") + ".bin";
    save_checkpoint(model, path);

    Checkpoint back = load_checkpoint(path);
    CHECK(back.model.config.hidden == cfg.hidden);
    CHECK(back.model.config.frames == cfg.frames);
    CHECK_FALSE(back.ema.has_value());

    std::vector<const Tensor*> orig, loaded;
    visit_params(model.params, [&](const std::string&, const Tensor& t) { orig.push_back(&t); });
    visit_params(back.model.params,
                 [&](const std::string&, const Tensor& t) { loaded.push_back(&t); });
    REQUIRE(orig.size() == loaded.size());
    for (size_t p = 0; p < orig.size(); ++p) {
        REQUIRE(orig[p]->shape() == loaded[p]->shape());
        for (size_t i = 0; i < orig[p]->size(); ++i)
            CHECK(static_cast<float>((*orig[p])[i]) == static_cast<float>((*loaded[p])[i]));
    }

    // EMA parameters travel alongside, under their own names
    ModelParams ema = model.params;
    save_checkpoint(model, path, &ema);
    Checkpoint with_ema = load_checkpoint(path);
    REQUIRE(with_ema.ema.has_value());

    // a loaded model forwards identically to a double round-trip
    LatentClip x = test::random_tensor(rng, cfg.clip_shape());
    auto emb = random_embedding(rng, cfg.embedding_dim);
    std::string path2 = test::temp_path("ckpt2") + ".bin";
    save_checkpoint(back.model, path2);
    Checkpoint twice = load_checkpoint(path2);
    CHECK(test::bitwise_equal(back.model.forward(x, 0.5, emb), twice.model.forward(x, 0.5, emb)));

    {
        std::ofstream bad(path, std::ios::binary);
        bad << "WRONGMAGIC and then some";
    }
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    CHECK_THROWS_AS(load_checkpoint(path + ".missing"), IoError);
}
