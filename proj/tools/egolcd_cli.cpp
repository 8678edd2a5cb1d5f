// Single entry point for the EgoLCD toolchain: generation, toy training,
// cache compression, repository inspection, script parsing, and NRDP
// evaluation. Flags override config-file values; EGOLCD_CONFIG names a
// default config file of flat key=value lines.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "egolcd/egolcd.hpp"

namespace fs = std::filesystem;
using namespace egolcd;

namespace {

std::string default_config_path() {
    const char* env = std::getenv("EGOLCD_CONFIG");
    return env ? std::string(env) : std::string();
}

void attach_config(CLI::App* cmd) {
    static std::string sink;
    cmd->add_option("--config", sink,
                    "config file with flat key=value lines (default $EGOLCD_CONFIG)");
}

std::string trim_ws(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Reads a flat key=value config file; '#' lines are comments.
std::vector<std::pair<std::string, std::string>> read_flat_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim_ws(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line is not key=value", line_no);
        std::string key = trim_ws(t.substr(0, eq));
        std::string value = trim_ws(t.substr(eq + 1));
        if (key.empty()) throw ParseError("config line has an empty key", line_no);
        kv.emplace_back(key, value);
    }
    return kv;
}

// Merges flat config values into the argument list ahead of parsing: each
// config key that names an option of the invoked subcommand and was not
// given on the command line becomes a synthesized --key=value token, so
// explicit flags always win. Keys the subcommand does not know are ignored
// (one config file may serve several commands).
std::vector<std::string> merge_flat_config(CLI::App& app, int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);

    size_t sub_at = args.size();
    CLI::App* sub = nullptr;
    for (size_t i = 0; i < args.size(); ++i) {
        if (!args[i].empty() && args[i][0] != '-') {
            sub = app.get_subcommand_no_throw(args[i]);
            sub_at = i;
            break;
        }
    }
    if (!sub) return args;

    std::string config_path = default_config_path();
    bool explicit_config = false;
    for (size_t i = sub_at + 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
            explicit_config = true;
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
            explicit_config = true;
        }
    }
    if (config_path.empty()) return args;
    if (!fs::exists(config_path)) {
        if (explicit_config) throw IoError("cannot open config file '" + config_path + "'");
        return args;  // a dangling EGOLCD_CONFIG is not an error
    }

    std::vector<std::string> merged(args.begin(), args.begin() + sub_at + 1);
    for (const auto& [key, value] : read_flat_config(config_path)) {
        if (key == "config") continue;
        if (sub->get_option_no_throw("--" + key) == nullptr) continue;
        bool given = false;
        for (size_t i = sub_at + 1; i < args.size(); ++i)
            if (args[i] == "--" + key || args[i].rfind("--" + key + "=", 0) == 0) given = true;
        if (!given) merged.push_back("--" + key + "=" + value);
    }
    merged.insert(merged.end(), args.begin() + sub_at + 1, args.end());
    return merged;
}

std::vector<size_t> parse_clip_shape(const std::string& text) {
    std::vector<size_t> dims;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) dims.push_back(std::stoul(part));
    if (dims.size() != 4)
        throw ConfigError("clip shape must be C,T,H,W; got '" + text + "'");
    return dims;
}

ThresholdBasis parse_basis(const std::string& name) {
    if (name == "normalized") return ThresholdBasis::normalized;
    if (name == "raw") return ThresholdBasis::raw;
    throw ConfigError("threshold basis must be 'normalized' or 'raw', got '" + name + "'");
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string script, ckpt, repo, out, trace;
    GenerationConfig gen;
    std::string basis = "normalized";
    bool use_ema = false;
};

void echo_config(std::ofstream& trace, const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) trace << "# " << k << "=" << v << "\n";
}

int run_generate(const GenerateArgs& args) {
    NarrativeScript script = load_script(args.script);
    for (const auto& w : script.warnings) std::cerr << "warning: " << w << "\n";

    Checkpoint ck = load_checkpoint(args.ckpt);
    if (args.use_ema) {
        if (!ck.ema) throw ConfigError("generate: checkpoint has no EMA parameters");
        ck.model.params = *ck.ema;
    }

    GenerationConfig cfg = args.gen;
    cfg.threshold_basis = parse_basis(args.basis);

    MemoryRepository repo =
        fs::exists(args.repo)
            ? load_repository(args.repo)
            : MemoryRepository(
                  {ck.model.config.embedding_dim, ck.model.config.layer_count, std::nullopt});

    std::vector<std::string> lines;
    auto results = generate_video(script, ck.model, repo, cfg, nullptr, &lines);

    std::vector<LatentClip> clips;
    clips.reserve(results.size());
    for (auto& r : results) clips.push_back(r.clip);
    save_video(clips, args.out);
    save_repository(repo, args.repo);

    std::string trace_path = args.trace.empty() ? args.out + ".trace" : args.trace;
    std::ofstream trace(trace_path);
    if (!trace) throw IoError("cannot open trace file '" + trace_path + "'");
    echo_config(trace, {{"command", "generate"},
                        {"script", args.script},
                        {"ckpt", args.ckpt},
                        {"repo", args.repo},
                        {"out", args.out},
                        {"seed", std::to_string(cfg.seed)},
                        {"steps", std::to_string(cfg.sample_steps)},
                        {"guidance", std::to_string(cfg.guidance_scale)},
                        {"shift", std::to_string(cfg.shift)},
                        {"prefix_frames", std::to_string(cfg.prefix_frames)},
                        {"top_m", std::to_string(cfg.top_m)},
                        {"tau", std::to_string(cfg.tau)},
                        {"probes", std::to_string(cfg.probe_count)},
                        {"basis", args.basis},
                        {"negative_prompt", cfg.negative_prompt}});
    for (const auto& line : lines) trace << line << "\n";

    std::cout << "generated " << results.size() << " clips -> " << args.out << "\n";
    for (const auto& line : lines) std::cout << line << "\n";
    std::cout << "repository now holds " << repo.size() << " entries -> " << args.repo << "\n";
    std::cout << "trace -> " << trace_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, out, trace, repo, init_from;
    std::string clip_shape = "4,16,8,8";
    size_t layers = 2, heads = 4, head_dim = 16, ffn = 256, rank = 4;
    double alpha = 8.0;
    size_t embed_dim = 256;
    TrainConfig train;
    bool no_memory_loss = false;
    bool lora_only = false;
};

int run_train(const TrainArgs& args) {
    ToyDiT model = [&]() {
        if (!args.init_from.empty()) return load_checkpoint(args.init_from).model;
        ModelConfig mc;
        auto dims = parse_clip_shape(args.clip_shape);
        mc.layer_count = args.layers;
        mc.heads = args.heads;
        mc.head_dim = args.head_dim;
        mc.hidden = args.heads * args.head_dim;
        mc.ffn_hidden = args.ffn;
        mc.lora_rank = args.rank;
        mc.lora_alpha = args.alpha;
        mc.embedding_dim = args.embed_dim;
        mc.channels = dims[0];
        mc.frames = dims[1];
        mc.height = dims[2];
        mc.width = dims[3];
        Rng init_rng(args.train.seed);
        return ToyDiT::create(mc, init_rng);
    }();

    NarrativeScript script = load_script((fs::path(args.data) / "script.snp").string());
    for (const auto& w : script.warnings) std::cerr << "warning: " << w << "\n";

    std::vector<TrainExample> dataset;
    const std::string clips_path = (fs::path(args.data) / "clips.bin").string();
    if (fs::exists(clips_path)) {
        auto clips = load_video(clips_path);
        if (clips.size() < script.size())
            throw ConfigError("train: " + clips_path + " holds " + std::to_string(clips.size()) +
                              " clips for " + std::to_string(script.size()) + " segments");
        for (size_t i = 0; i < script.size(); ++i)
            dataset.push_back({script.segments[i], clips[i]});
    } else {
        // Hermetic fallback: deterministic synthetic clips derived from the
        // training seed, one per script segment.
        Rng data_rng(args.train.seed + 1);
        for (const auto& seg : script.segments)
            dataset.push_back({seg, gaussian(data_rng, model.config.clip_shape())});
        std::cout << "no clips.bin in " << args.data << "; synthesized " << dataset.size()
                  << " deterministic clips\n";
    }

    MemoryRepository repo =
        args.repo.empty()
            ? MemoryRepository({model.config.embedding_dim, model.config.layer_count, std::nullopt})
            : load_repository(args.repo);

    TrainConfig cfg = args.train;
    cfg.memory_loss_enabled = !args.no_memory_loss;
    cfg.lora_only = args.lora_only;

    std::vector<std::string> lines;
    TrainResult result = train_toy(dataset, model, repo, cfg, nullptr, &lines);
    save_checkpoint(model, args.out, &result.ema);

    std::string trace_path = args.trace.empty() ? args.out + ".trace" : args.trace;
    std::ofstream trace(trace_path);
    if (!trace) throw IoError("cannot open trace file '" + trace_path + "'");
    echo_config(trace, {{"command", "train-toy"},
                        {"data", args.data},
                        {"out", args.out},
                        {"steps", std::to_string(cfg.steps)},
                        {"lr", std::to_string(cfg.learning_rate)},
                        {"warmup", std::to_string(cfg.warmup_steps)},
                        {"weight_decay", std::to_string(cfg.weight_decay)},
                        {"ema_decay", std::to_string(cfg.ema_decay)},
                        {"gamma", std::to_string(cfg.loss_weights.gamma)},
                        {"lambda_mae", std::to_string(cfg.loss_weights.lambda_mae)},
                        {"p_video", std::to_string(cfg.p_video)},
                        {"p_text", std::to_string(cfg.p_text)},
                        {"p_kv", std::to_string(cfg.p_kv)},
                        {"prefix_frames", std::to_string(cfg.prefix_frames)},
                        {"top_m", std::to_string(cfg.top_m)},
                        {"memory_loss", cfg.memory_loss_enabled ? "1" : "0"},
                        {"lora_only", cfg.lora_only ? "1" : "0"},
                        {"seed", std::to_string(cfg.seed)}});
    for (const auto& line : lines) trace << line << "\n";

    const auto& first = result.records.front().losses;
    const auto& last = result.records.back().losses;
    std::cout << "trained " << cfg.steps << " steps on " << dataset.size() << " examples\n";
    std::cout << std::setprecision(6) << "first step total loss " << first.total
              << ", last step total loss " << last.total << "\n";
    std::cout << "checkpoint -> " << args.out << " (with EMA)\n";
    std::cout << "trace -> " << trace_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// compress-cache
// ---------------------------------------------------------------------------

struct CompressArgs {
    std::string kv_file, out;
    double tau = 0.9;
    size_t probes = 4;
    std::string basis = "normalized";
};

inline constexpr char kSparseMagic[5] = {'S', 'P', 'K', 'V', '\x01'};

int run_compress(const CompressArgs& args) {
    auto in = open_input(args.kv_file);
    BinaryReader r(in);
    LayerKV kv;
    kv.keys = read_tensor(r);
    kv.values = read_tensor(r);
    kv.validate();
    ProbeSet probes;
    if (!r.at_eof()) {
        // optional third tensor: the token queries used for probing
        Tensor queries = read_tensor(r);
        probes = tail_probes(queries, args.probes);
    } else {
        // no queries on file: probe with the most recent key rows
        probes = tail_probes(kv.keys, args.probes);
    }

    SparseLayerKV sparse =
        compress_layer(kv, probes, args.tau, /*causal=*/true, parse_basis(args.basis));

    double err = 0.0;
    for (size_t i = 0; i < probes.count(); ++i) {
        Tensor q({kv.heads(), kv.key_dim()});
        for (size_t h = 0; h < kv.heads(); ++h)
            for (size_t d = 0; d < kv.key_dim(); ++d) q.at2(h, d) = probes.queries.at3(i, h, d);
        Tensor dense = sparse_attention(q, full_cache(kv));
        Tensor approx = sparse_attention(q, sparse);
        double diff = 0.0;
        for (size_t j = 0; j < dense.size(); ++j)
            diff += (dense[j] - approx[j]) * (dense[j] - approx[j]);
        err += std::sqrt(diff);
    }
    err /= static_cast<double>(probes.count());

    std::string out_path = args.out.empty() ? args.kv_file + ".sparse" : args.out;
    auto out = open_output(out_path);
    BinaryWriter w(out);
    w.bytes(kSparseMagic, sizeof(kSparseMagic));
    write_sparse_kv(w, sparse);

    std::cout << "retained " << sparse.tokens() << "/" << kv.tokens() << " tokens (ratio "
              << std::setprecision(4)
              << static_cast<double>(sparse.tokens()) / static_cast<double>(kv.tokens()) << ")\n";
    std::cout << "sparse-vs-dense probe error " << std::setprecision(6) << err << "\n";
    std::cout << "sparse cache -> " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// inspect-repo
// ---------------------------------------------------------------------------

int run_inspect(const std::string& path) {
    MemoryRepository repo = load_repository(path);
    std::cout << "repository " << path << "\n";
    std::cout << "entries: " << repo.size() << ", embedding dim " << repo.config().embedding_dim
              << ", layers " << repo.config().layer_count;
    if (repo.config().max_entries) std::cout << ", capacity " << *repo.config().max_entries;
    std::cout << "\n";

    for (size_t l = 0; l < repo.config().layer_count; ++l) {
        std::map<size_t, size_t> histogram;
        for (const auto& e : repo.entries()) ++histogram[e.per_layer_kv[l].tokens()];
        std::cout << "layer " << l << " retained-token histogram:";
        if (histogram.empty()) std::cout << " (empty)";
        for (const auto& [tokens, count] : histogram)
            std::cout << " " << tokens << "tok x" << count;
        std::cout << "\n";
    }
    for (const auto& e : repo.entries())
        std::cout << "entry " << e.entry_id << ": |E| = " << std::setprecision(6)
                  << l2_norm(e.embedding.vector) << ", anchor frames " << e.anchor_clip.dim(1)
                  << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// parse-script
// ---------------------------------------------------------------------------

int run_parse(const std::string& path) {
    NarrativeScript script = load_script(path);
    for (const auto& w : script.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << script.size() << " segments, mode "
              << (script.mode == ScriptMode::seconds ? "seconds" : "frames") << "\n";
    for (const auto& seg : script.segments)
        std::cout << "  [" << seg.span_start << "-" << seg.span_end << "] " << seg.prompt_text
                  << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval-nrdp
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string scores, video;
    std::string proxies = "clarity,smoothness";
    std::string weights = "linear";
    size_t chunks = 10;
};

// CSV columns: frame_index,metric_name,score. A header row is skipped when
// the first field is not numeric.
std::map<std::string, std::vector<std::pair<long, double>>> parse_score_csv(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scores file '" + path + "'");
    std::map<std::string, std::vector<std::pair<long, double>>> table;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string frame_s, metric, score_s;
        if (!std::getline(ss, frame_s, ',') || !std::getline(ss, metric, ',') ||
            !std::getline(ss, score_s))
            throw ParseError("expected 'frame_index,metric_name,score'", line_no);
        try {
            long frame = std::stol(frame_s);
            double score = std::stod(score_s);
            table[metric].emplace_back(frame, score);
        } catch (const std::exception&) {
            if (line_no == 1) continue;  // header row
            throw ParseError("non-numeric frame index or score", line_no);
        }
    }
    if (table.empty()) throw ParseError("no score rows found", line_no == 0 ? 1 : line_no);
    return table;
}

void print_report(const MetricReport& report) {
    std::cout << "metric " << report.metric_name << "\n";
    std::cout << "  M_i   ";
    for (double m : report.chunk_means) std::cout << std::setw(10) << std::setprecision(5) << m;
    std::cout << "\n  D_i   " << std::setw(10) << "-";
    for (double d : report.drifts) std::cout << std::setw(10) << std::setprecision(5) << d;
    std::cout << "\n  NRDP  " << std::setprecision(6) << report.nrdp << "\n";
}

int run_eval(const EvalArgs& args) {
    if (args.scores.empty() == args.video.empty())
        throw ConfigError("eval-nrdp: provide exactly one of --scores or --video");

    NRDPConfig config;
    config.chunk_count = args.chunks;
    if (args.weights == "linear") {
        config.weights = default_weights(args.chunks);
    } else if (args.weights == "uniform") {
        config.weights.assign(args.chunks - 1, 1.0);
    } else {
        throw ConfigError("eval-nrdp: weights must be 'linear' or 'uniform'");
    }

    std::vector<QualitySeries> series;
    if (!args.scores.empty()) {
        auto table = parse_score_csv(args.scores);
        for (auto& [metric, rows] : table) {
            std::stable_sort(rows.begin(), rows.end(),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
            std::vector<double> frames;
            frames.reserve(rows.size());
            for (const auto& [frame, score] : rows) frames.push_back(score);
            series.push_back(chunk_series(frames, config.chunk_count, metric));
        }
    } else {
        LatentClip video = concat_clips(load_video(args.video));
        std::stringstream ss(args.proxies);
        std::string name;
        while (std::getline(ss, name, ',')) {
            if (name == "clarity")
                series.push_back(chunk_series(proxy_clarity(video), config.chunk_count, name));
            else if (name == "smoothness")
                series.push_back(chunk_series(proxy_smoothness(video), config.chunk_count, name));
            else
                throw ConfigError("eval-nrdp: unknown proxy '" + name + "'");
        }
    }

    for (const auto& s : series) print_report(nrdp_report(s, config));
    return 0;
}

const char* error_kind(const Error& e) {
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const ParseError*>(&e)) return "parse";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const StateError*>(&e)) return "state";
    if (dynamic_cast<const ValueError*>(&e)) return "value";
    return "error";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EgoLCD long-short generative memory toolchain"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "block-wise semi-autoregressive generation");
    attach_config(generate);
    generate->add_option("--script", gen.script, "SNP script file")->required();
    generate->add_option("--ckpt", gen.ckpt, "model checkpoint")->required();
    generate->add_option("--repo", gen.repo, "memory repository (created if missing)")->required();
    generate->add_option("--out", gen.out, "output video file")->required();
    generate->add_option("--seed", gen.gen.seed, "noise seed");
    generate->add_option("--steps", gen.gen.sample_steps, "sampling steps");
    generate->add_option("--guidance", gen.gen.guidance_scale, "classifier-free guidance scale");
    generate->add_option("--shift", gen.gen.shift, "timestep shift");
    generate->add_option("--prefix-frames", gen.gen.prefix_frames,
                         "frames pinned from the previous clip");
    generate->add_option("--top-m", gen.gen.top_m, "retrieved memory entries per clip");
    generate->add_option("--tau", gen.gen.tau, "importance mass retained by compression");
    generate->add_option("--probes", gen.gen.probe_count, "probe count for compression");
    generate->add_option("--basis", gen.basis, "threshold basis: normalized|raw");
    generate->add_option("--negative-prompt", gen.gen.negative_prompt,
                         "prompt for the unconditional branch");
    generate->add_option("--trace", gen.trace, "trace file (default <out>.trace)");
    generate->add_flag("--use-ema", gen.use_ema, "sample with the EMA weights");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train-toy", "train the toy denoiser");
    attach_config(train_cmd);
    train_cmd->add_option("--data", train.data, "dataset dir with script.snp [and clips.bin]")
        ->required();
    train_cmd->add_option("--out", train.out, "output checkpoint")->required();
    train_cmd->add_option("--steps", train.train.steps, "training steps");
    train_cmd->add_option("--lr", train.train.learning_rate, "learning rate");
    train_cmd->add_option("--gamma", train.train.loss_weights.gamma, "memory-loss weight");
    train_cmd->add_option("--lambda-mae", train.train.loss_weights.lambda_mae, "MAE weight");
    train_cmd->add_option("--seed", train.train.seed, "training seed");
    train_cmd->add_option("--warmup", train.train.warmup_steps, "linear warmup steps");
    train_cmd->add_option("--weight-decay", train.train.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--ema-decay", train.train.ema_decay, "EMA decay");
    train_cmd->add_option("--p-video", train.train.p_video, "video-condition dropout");
    train_cmd->add_option("--p-text", train.train.p_text, "text-condition dropout");
    train_cmd->add_option("--p-kv", train.train.p_kv, "retrieved-KV dropout");
    train_cmd->add_option("--prefix-frames", train.train.prefix_frames, "conditioning prefix");
    train_cmd->add_option("--top-m", train.train.top_m, "retrieved entries per step");
    train_cmd->add_option("--repo", train.repo, "retrieval repository for memory-aware training");
    train_cmd->add_option("--init-from", train.init_from, "continue from a checkpoint");
    train_cmd->add_option("--trace", train.trace, "trace file (default <out>.trace)");
    train_cmd->add_flag("--no-memory-loss", train.no_memory_loss,
                        "ablation: drop the memory regulation loss");
    train_cmd->add_flag("--lora-only", train.lora_only, "train adapters only");
    train_cmd->add_option("--layers", train.layers, "transformer blocks");
    train_cmd->add_option("--heads", train.heads, "attention heads");
    train_cmd->add_option("--head-dim", train.head_dim, "per-head key dimension");
    train_cmd->add_option("--ffn", train.ffn, "feed-forward width");
    train_cmd->add_option("--rank", train.rank, "LoRA rank");
    train_cmd->add_option("--alpha", train.alpha, "LoRA alpha");
    train_cmd->add_option("--embed-dim", train.embed_dim, "prompt embedding dim");
    train_cmd->add_option("--clip-shape", train.clip_shape, "latent clip C,T,H,W");

    CompressArgs comp;
    auto* compress = app.add_subcommand("compress-cache", "probe-based sparse KV compression");
    attach_config(compress);
    compress->add_option("kv-file", comp.kv_file, "serialized K and V tensors")->required();
    compress->add_option("--tau", comp.tau, "importance mass to retain");
    compress->add_option("--probes", comp.probes, "probe count");
    compress->add_option("--basis", comp.basis, "threshold basis: normalized|raw");
    compress->add_option("--out", comp.out, "output path (default <kv-file>.sparse)");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect-repo", "summarize a memory repository");
    attach_config(inspect);
    inspect->add_option("path", inspect_path, "repository file")->required();

    std::string parse_path;
    auto* parse_cmd = app.add_subcommand("parse-script", "validate and print an SNP script");
    attach_config(parse_cmd);
    parse_cmd->add_option("path", parse_path, "script file")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval-nrdp", "normalized referenced drifting penalty");
    attach_config(eval_cmd);
    eval_cmd->add_option("--scores", eval.scores, "CSV of frame_index,metric_name,score");
    eval_cmd->add_option("--video", eval.video, "video file scored with built-in proxies");
    eval_cmd->add_option("--proxy", eval.proxies, "proxies for --video: clarity,smoothness");
    eval_cmd->add_option("--chunks", eval.chunks, "chunk count N");
    eval_cmd->add_option("--weights", eval.weights, "weighting: linear|uniform");

    try {
        std::vector<std::string> args = merge_flat_config(app, argc, argv);
        std::reverse(args.begin(), args.end());  // CLI11's vector parse expects reversed args
        app.parse(args);
        if (*generate) return run_generate(gen);
        if (*train_cmd) return run_train(train);
        if (*compress) return run_compress(comp);
        if (*inspect) return run_inspect(inspect_path);
        if (*parse_cmd) return run_parse(parse_path);
        if (*eval_cmd) return run_eval(eval);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::cerr << "error [" << error_kind(e) << "]: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
