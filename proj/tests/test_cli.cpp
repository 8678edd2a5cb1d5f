// Exercises the installed CLI binary end to end through a shell.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "egolcd/egolcd.hpp"
#include "test_support.hpp"

namespace {

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    std::string out_path = test::temp_path("cli_out") + ".txt";
    std::string cmd = std::string(EGOLCD_CLI_PATH) + " " + args + " > " + out_path + " 2>&1";
    int status = std::system(cmd.c_str());
    std::ifstream in(out_path);
    std::stringstream buf;
    buf << in.rdbuf();
    int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {code, buf.str()};
}

std::string write_file(const std::string& stem, const std::string& content) {
    std::string path = test::temp_path(stem);
    std::ofstream out(path);
    out << content;
    return path;
}

bool same_bytes(const std::string& a, const std::string& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    return sa.str() == sb.str();
}

const char* kScript =
    "[0s-5s] a woman with short blonde hair speaks\n"
    "[5s-10s] she gestures toward the skyline\n"
    "[10s-15s] fireworks burst over the city\n";

// Small model so every CLI invocation stays fast.
const char* kTinyModel = " --clip-shape 2,12,4,4 --heads 2 --head-dim 4 --ffn 32 --embed-dim 32";

}  // namespace

TEST_CASE("parse-script prints the segment count and exits cleanly") {
    std::string script = test::temp_path("ok") + ".snp";
    {
        std::ofstream out(script);
        out << kScript;
    }
    RunResult r = run_cli("parse-script " + script);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("3 segments") != std::string::npos);

    std::string bad = write_file("bad", "[9-2] inverted\n");
    RunResult rb = run_cli("parse-script " + bad);
    CHECK(rb.exit_code == 1);
    CHECK(rb.output.find("parse") != std::string::npos);
}

TEST_CASE("unknown subcommands are usage errors") {
    RunResult r = run_cli("frobnicate");
    CHECK(r.exit_code == 2);
    RunResult none = run_cli("");
    CHECK(none.exit_code == 2);
}

TEST_CASE("--help exits 0 on every subcommand and lists defaults") {
    for (const char* sub : {"generate", "train-toy", "eval-nrdp", "compress-cache",
                            "inspect-repo", "parse-script"}) {
        RunResult r = run_cli(std::string(sub) + " --help");
        CHECK(r.exit_code == 0);
        CHECK(r.output.find("--help") != std::string::npos);
    }
    // spot-check that defaults are shown
    RunResult gen = run_cli("generate --help");
    CHECK(gen.output.find("[20]") != std::string::npos);   // steps
    CHECK(gen.output.find("[5]") != std::string::npos);    // guidance
    CHECK(gen.output.find("[9]") != std::string::npos);    // prefix frames
    RunResult train = run_cli("train-toy --help");
    CHECK(train.output.find("[0.99]") != std::string::npos);   // ema decay
    CHECK(train.output.find("[1e-05]") != std::string::npos);  // lr
    CHECK(train.output.find("[0.2]") != std::string::npos);    // p_video
}

TEST_CASE("eval-nrdp on a constant score table reports zero drift") {
    std::ostringstream csv;
    csv << "frame_index,metric_name,score\n";
    for (int f = 0; f < 40; ++f) {
        csv << f << ",clarity,0.5\n";
        csv << f << ",motion,2.0\n";
    }
    std::string path = write_file("constant", csv.str());
    RunResult r = run_cli("eval-nrdp --scores " + path + " --chunks 10");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("clarity") != std::string::npos);
    CHECK(r.output.find("motion") != std::string::npos);
    // both metrics end with a zero NRDP line
    size_t first = r.output.find("NRDP  0");
    REQUIRE(first != std::string::npos);
    CHECK(r.output.find("NRDP  0", first + 1) != std::string::npos);
}

TEST_CASE("full toolchain: train, generate deterministically, inspect, evaluate") {
    std::string dir = test::temp_path("dataset");
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/script.snp");
        out << kScript;
    }
    std::string ckpt = test::temp_path("toy") + ".bin";
    RunResult train = run_cli("train-toy --data " + dir + " --out " + ckpt +
                              " --steps 5 --lr 0.01 --seed 1" + kTinyModel);
    INFO(train.output);
    REQUIRE(train.exit_code == 0);
    CHECK(std::filesystem::exists(ckpt));
    CHECK(std::filesystem::exists(ckpt + ".trace"));
    {
        std::ifstream trace(ckpt + ".trace");
        std::stringstream buf;
        buf << trace.rdbuf();
        CHECK(buf.str().find("# command=train-toy") != std::string::npos);
        CHECK(buf.str().find("step=0 ") != std::string::npos);
    }

    std::string script = write_file("genscript", kScript);
    std::string v1 = test::temp_path("v1") + ".bin";
    std::string v2 = test::temp_path("v2") + ".bin";
    std::string r1 = test::temp_path("r1") + ".bin";
    std::string r2 = test::temp_path("r2") + ".bin";
    std::string base = " --script " + script + " --ckpt " + ckpt + " --steps 4 --seed 11";
    RunResult g1 = run_cli("generate" + base + " --repo " + r1 + " --out " + v1);
    INFO(g1.output);
    REQUIRE(g1.exit_code == 0);
    RunResult g2 = run_cli("generate" + base + " --repo " + r2 + " --out " + v2);
    REQUIRE(g2.exit_code == 0);
    CHECK(same_bytes(v1, v2));
    CHECK(same_bytes(r1, r2));

    RunResult inspect = run_cli("inspect-repo " + r1);
    CHECK(inspect.exit_code == 0);
    CHECK(inspect.output.find("entries: 3") != std::string::npos);
    CHECK(inspect.output.find("retained-token histogram") != std::string::npos);

    RunResult eval = run_cli("eval-nrdp --video " + v1 + " --proxy clarity,smoothness --chunks 6");
    CHECK(eval.exit_code == 0);
    CHECK(eval.output.find("NRDP") != std::string::npos);
}

TEST_CASE("generate rejects a repository from a different model family") {
    std::string dir = test::temp_path("dataset2");
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/script.snp");
        out << kScript;
    }
    std::string ckpt2 = test::temp_path("two_layer") + ".bin";
    std::string ckpt3 = test::temp_path("three_layer") + ".bin";
    REQUIRE(run_cli("train-toy --data " + dir + " --out " + ckpt2 + " --steps 1 --lr 0.001" +
                    kTinyModel)
                .exit_code == 0);
    REQUIRE(run_cli("train-toy --data " + dir + " --out " + ckpt3 +
                    " --steps 1 --lr 0.001 --layers 3" + kTinyModel)
                .exit_code == 0);

    std::string script = write_file("mismatch_script", kScript);
    std::string repo = test::temp_path("mismatch_repo") + ".bin";
    std::string video = test::temp_path("mismatch_video") + ".bin";
    REQUIRE(run_cli("generate --script " + script + " --ckpt " + ckpt2 + " --repo " + repo +
                    " --out " + video + " --steps 2")
                .exit_code == 0);
    RunResult clash = run_cli("generate --script " + script + " --ckpt " + ckpt3 + " --repo " +
                              repo + " --out " + video + " --steps 2");
    CHECK(clash.exit_code == 1);
    CHECK(clash.output.find("config") != std::string::npos);
    CHECK(clash.output.find("layers") != std::string::npos);
}

TEST_CASE("compress-cache reports ratio and error and writes the sparse file") {
    using namespace egolcd;
    std::string kv_path = test::temp_path("layer") + ".kv";
    {
        Rng rng(9);
        auto out = open_output(kv_path);
        BinaryWriter w(out);
        write_tensor(w, test::random_tensor(rng, {16, 2, 4}));  // K
        write_tensor(w, test::random_tensor(rng, {16, 2, 4}));  // V
        write_tensor(w, test::random_tensor(rng, {16, 2, 4}));  // queries
    }
    RunResult r = run_cli("compress-cache --tau 0.8 --probes 4 " + kv_path);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("retained") != std::string::npos);
    CHECK(r.output.find("probe error") != std::string::npos);
    REQUIRE(std::filesystem::exists(kv_path + ".sparse"));

    // the written file carries the magic then a readable sparse cache
    auto in = open_input(kv_path + ".sparse");
    BinaryReader reader(in);
    reader.expect_magic("SPKV\x01", 5, "sparse cache");
    SparseLayerKV sparse = read_sparse_kv(reader);
    CHECK(sparse.origin_length == 16);
    CHECK(sparse.tokens() >= 1);
    CHECK(sparse.tokens() < 16);  // tau 0.8 must actually prune here

    RunResult bad = run_cli("compress-cache --tau 1.5 " + kv_path);
    CHECK(bad.exit_code == 1);
}

TEST_CASE("config file values apply and flags override them") {
    std::string cfg = write_file("conf", "chunks=5\nweights=uniform\n");
    std::ostringstream csv;
    csv << "frame_index,metric_name,score\n";
    for (int f = 0; f < 20; ++f) csv << f << ",clarity," << (f < 10 ? 1.0 : 0.5) << "\n";
    std::string scores = write_file("scored", csv.str());

    RunResult from_file = run_cli("eval-nrdp --config " + cfg + " --scores " + scores);
    CHECK(from_file.exit_code == 0);
    // five chunks of four frames: means 1, 1, .75, .5, .5
    CHECK(from_file.output.find("0.75") != std::string::npos);

    RunResult overridden =
        run_cli("eval-nrdp --config " + cfg + " --scores " + scores + " --chunks 2");
    CHECK(overridden.exit_code == 0);
    CHECK(overridden.output.find("0.75") == std::string::npos);
}
