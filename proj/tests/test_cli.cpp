#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "mxd/checkpoint.hpp"
#include "mxd/config.hpp"

namespace fs = std::filesystem;
using namespace mxd;

namespace {

const fs::path kWork = fs::temp_directory_path() / "mxd_test_cli";

struct RunResult {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunResult run(const std::string& args) {
    fs::create_directories(kWork);
    const auto out = kWork / "stdout.txt", err = kWork / "stderr.txt";
    const std::string cmd = "cd '" + kWork.string() + "' && '" MXD_CLI_PATH "' " + args + " >'" + out.string() + "' 2>'" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::string kTinyLm = R"([corpus]
synthetic_bytes = 100000
[lm]
d = 16
ctx = 16
mlp_hidden = 32
steps = 30
batch = 2
eval_every = 15
eval_windows = 4
)";

const std::string kTinyTeacher = R"([teacher]
input = 8
hidden = 16
output = 8
pairs = 1000
eval_pairs = 100
[train]
steps = 40
eval_every = 20
eval_rows = 100
frequency_window = 100
)";

} // namespace

TEST_CASE("config parsing") {
    const auto c = Config::parse("# comment\n[run]\nseed = 7\n; other comment\n[student]\nkinds = tc, mxd ,stc\n");
    CHECK(c.u64("run.seed") == 7);
    CHECK(c.list("student.kinds") == std::vector<std::string>{"tc", "mxd", "stc"});
    CHECK(c.u64_list("student.k") == std::vector<std::uint64_t>{4, 8, 16, 32});
    CHECK(c.str("run.dtype") == "f32");

    CHECK_THROWS_WITH(Config::parse("[run]\nsed = 1\n"), Catch::Matchers::ContainsSubstring("unknown key 'sed'"));
    CHECK_THROWS_WITH(Config::parse("[nope]\nx = 1\n"), Catch::Matchers::ContainsSubstring("unknown section"));
    CHECK_THROWS_AS(Config::parse("seed = 1\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("[run\nseed = 1\n"), ConfigError);
    CHECK_THROWS_WITH(Config::parse("[run]\nseed = x\n").u64("run.seed"), Catch::Matchers::ContainsSubstring("run.seed"));
    CHECK_THROWS_AS(Config::parse("[student]\nbiases = maybe\n").flag("student.biases"), ConfigError);
    CHECK_THROWS_AS(Config().required("corpus.path"), ConfigError);

    // The resolved form parses back to itself.
    CHECK(Config::parse(c.resolved()).resolved() == c.resolved());
}

TEST_CASE("cli exit codes for configuration problems") {
    write(kWork / "bad_key.cfg", "[run]\nbogus = 1\n");
    auto r = run("distill --config bad_key.cfg --out o_bad");
    CHECK(r.code == 2);
    CHECK(r.err.find("bogus") != std::string::npos);

    r = run("train-lm --out o_nocorpus");
    CHECK(r.code == 2);
    CHECK(r.err.find("corpus.path") != std::string::npos);

    write(kWork / "missing_corpus.cfg", "[corpus]\npath = /nonexistent/corpus.bin\n");
    r = run("train-lm --config missing_corpus.cfg --out o_nocorpus");
    CHECK(r.code == 2);
    CHECK(r.err.find("corpus.path") != std::string::npos);

    CHECK(run("distill --dtype f16").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("distill --config does_not_exist.cfg").code == 2);
}

TEST_CASE("cli train-lm writes deterministic artifacts") {
    write(kWork / "lm.cfg", kTinyLm);
    auto a = run("train-lm --config lm.cfg --out lm_a --seed 3");
    REQUIRE(a.code == 0);
    for (auto f : {"lm.ckpt", "metrics.jsonl", "resolved.cfg"}) CHECK(fs::exists(kWork / "lm_a" / f));
    CHECK(line_count(slurp(kWork / "lm_a" / "metrics.jsonl")) == 3);
    CHECK(Config::load(kWork / "lm_a" / "resolved.cfg").u64("run.seed") == 3);
    REQUIRE(run("train-lm --config lm.cfg --out lm_b --seed 3").code == 0);
    CHECK(slurp(kWork / "lm_a" / "lm.ckpt") == slurp(kWork / "lm_b" / "lm.ckpt"));
    REQUIRE(run("train-lm --config lm.cfg --out lm_c --seed 4").code == 0);
    CHECK(slurp(kWork / "lm_a" / "lm.ckpt") != slurp(kWork / "lm_c" / "lm.ckpt"));

    const auto inspect = run("inspect lm_a/lm.ckpt");
    CHECK(inspect.code == 0);
    CHECK(inspect.out.find("kind: toy_lm") != std::string::npos);
}

TEST_CASE("cli distill produces one checkpoint per point and a frontier") {
    write(kWork / "distill.cfg", kTinyTeacher + "[student]\nkinds = tc,stc,mxd\nk = 4,8,16,32\n");
    const auto r = run("distill --config distill.cfg --out d");
    REQUIRE(r.code == 0);
    std::size_t ckpts = 0;
    for (const auto& e : fs::directory_iterator(kWork / "d")) ckpts += e.path().extension() == ".ckpt";
    CHECK(ckpts == 12);
    const auto csv = slurp(kWork / "d" / "frontier.csv");
    CHECK(line_count(csv) == 13);
    CHECK(csv.rfind("kind,K,params,final_nmse,ce_delta\n", 0) == 0);
    CHECK(fs::exists(kWork / "d" / "resolved.cfg"));

    const auto metrics = slurp(kWork / "d" / "metrics_mxd_k4.jsonl");
    CHECK(metrics.rfind("{\"step\":0,\"nmse\":", 0) == 0);
    CHECK(metrics.find("\"dead_frac\"") != std::string::npos);
    CHECK(line_count(metrics) == 3);

    // Same config and seed: identical checkpoints.
    REQUIRE(run("distill --config distill.cfg --out d2 --threads 2").code == 0);
    CHECK(slurp(kWork / "d" / "mxd_k8.ckpt") == slurp(kWork / "d2" / "mxd_k8.ckpt"));
    CHECK(slurp(kWork / "d" / "frontier.csv") == slurp(kWork / "d2" / "frontier.csv"));

}

TEST_CASE("cli eval suites") {
    write(kWork / "ev.cfg", kTinyTeacher + "[student]\nkinds = tc,mxd\nk = 4\n");
    REQUIRE(run("distill --config ev.cfg --out ev --dtype f64").code == 0);

    write(kWork / "rank.cfg", kTinyTeacher + "[eval]\ncheckpoint = ev/mxd_k4.ckpt\nsuites = rank,nmse,probe\nrank_sample = 10\n");
    auto r = run("eval --config rank.cfg --out ev_rank --dtype f64");
    REQUIRE(r.code == 0);
    const auto report = slurp(kWork / "ev_rank" / "report.jsonl");
    CHECK(report.find("\"normalized_rank\"") != std::string::npos);
    CHECK(report.find("\"nmse\"") != std::string::npos);
    CHECK(report.find("\"best_f1\"") != std::string::npos);

    write(kWork / "rank_tc.cfg", kTinyTeacher + "[eval]\ncheckpoint = ev/tc_k4.ckpt\nsuites = rank\n");
    r = run("eval --config rank_tc.cfg --out ev_tc --dtype f64");
    CHECK(r.code != 0);
    CHECK(r.err.find("unsupported") != std::string::npos);

    write(kWork / "wrong_dtype.cfg", kTinyTeacher + "[eval]\ncheckpoint = ev/mxd_k4.ckpt\nsuites = nmse\n");
    CHECK(run("eval --config wrong_dtype.cfg --out ev_dt --dtype f32").code == 1);
}

TEST_CASE("cli eval on a toy LM host") {
    write(kWork / "host.cfg", kTinyLm);
    REQUIRE(run("train-lm --config host.cfg --out host").code == 0);
    const std::string lm_teacher = kTinyLm + R"([teacher]
source = lm
lm_checkpoint = host/lm.ckpt
layer = 1
pairs = 640
eval_pairs = 160
[train]
steps = 30
eval_every = 30
eval_rows = 100
frequency_window = 100
[student]
kinds = mxd
k = 4
)";
    write(kWork / "lmd.cfg", lm_teacher);
    auto r = run("distill --config lmd.cfg --out lmd");
    REQUIRE(r.code == 0);
    const auto frontier = slurp(kWork / "lmd" / "frontier.csv");
    CHECK(frontier.find(",\n") == std::string::npos);  // CE delta filled in

    write(kWork / "ngram.cfg", lm_teacher + "[eval]\ncheckpoint = lmd/mxd_k4.ckpt\nsuites = ngram,ce,steer\nhorizon = 16\n"
                                             "prompts = 8\nprompt_length = 4\n");
    r = run("eval --config ngram.cfg --out lme");
    CHECK(r.code == 2);
    CHECK(r.err.find("eval.horizon") != std::string::npos);
    write(kWork / "ngram.cfg", lm_teacher + "[eval]\ncheckpoint = lmd/mxd_k4.ckpt\nsuites = ngram,ce,steer\nhorizon = 16\n"
                                             "prompts = 8\nprompt_length = 1\n");
    r = run("eval --config ngram.cfg --out lme");
    REQUIRE(r.code == 0);
    const auto csv = slurp(kWork / "lme" / "faithfulness.csv");
    CHECK(line_count(csv) == 17);
    CHECK(csv.rfind("n,fraction,layer_kind,K\n", 0) == 0);
    CHECK(slurp(kWork / "lme" / "report.jsonl").find("\"ce_delta\"") != std::string::npos);
}

TEST_CASE("cli inspect") {
    write(kWork / "gpt2.cfg", "[spec]\nkind = mxd\ninput = 768\nhidden = 3072\noutput = 768\nmatch_tc_hidden = 24576\nk = 32\n");
    auto r = run("inspect --config gpt2.cfg");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("experts=21504") != std::string::npos);
    CHECK(r.out.find("(37.7M)") != std::string::npos);

    write(kWork / "insp.cfg", kTinyTeacher + "[student]\nkinds = mxd\nk = 4\n");
    REQUIRE(run("distill --config insp.cfg --out insp").code == 0);
    r = run("inspect insp/mxd_k4.ckpt");
    REQUIRE(r.code == 0);
    for (auto s : {"kind: mxd", "dtype: f32", "crc: ok", "param_count:", "K: 4", "dims: input=8"}) CHECK(r.out.find(s) != std::string::npos);

    const auto bytes = read_file_bytes(kWork / "insp" / "mxd_k4.ckpt");
    write_file_bytes(kWork / "trunc.ckpt", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 200));
    r = run("inspect trunc.ckpt");
    CHECK(r.code == 1);
    CHECK(r.err.find("CRC mismatch") != std::string::npos);

    Checkpoint<float> empty;
    empty.kind = LayerKind::mxd;
    write_file_bytes(kWork / "empty.ckpt", serialize(empty));
    r = run("inspect empty.ckpt");
    CHECK(r.code == 1);
    CHECK(r.err.find("empty layer") != std::string::npos);
}

TEST_CASE("cli sweep") {
    write(kWork / "sweep.cfg", kTinyTeacher + "[student]\nkinds = tc,mxd\nk = 4\n[sweep]\nseeds = 0,1\n");
    const auto r = run("sweep --config sweep.cfg --out sw --threads 2");
    REQUIRE(r.code == 0);
    const auto csv = slurp(kWork / "sw" / "sweep.csv");
    CHECK(line_count(csv) == 5);
    CHECK(csv.rfind("seed,kind,K,params,final_nmse,ce_delta\n", 0) == 0);
    CHECK(fs::exists(kWork / "sw" / "seed_1" / "mxd_k4.ckpt"));
    // The seed-0 point reproduces a plain distill run.
    write(kWork / "one.cfg", kTinyTeacher + "[student]\nkinds = mxd\nk = 4\n");
    REQUIRE(run("distill --config one.cfg --out one --seed 0").code == 0);
    CHECK(slurp(kWork / "sw" / "seed_0" / "mxd_k4.ckpt") == slurp(kWork / "one" / "mxd_k4.ckpt"));
}
