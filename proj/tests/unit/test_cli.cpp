#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "heapr/cli.hpp"
#include "heapr/report_io.hpp"

using namespace heapr;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"([meta]
schema = 1

[model]
d_model = 6
d_inter = 4
num_experts = 3
kappa = 2
num_layers = 2
vocab = 12
seq_len = 10

[corpus]
vocab = 12
seq_len = 10
num_sequences = 240

[train]
steps = 40
batch_size = 8

[run]
calib_sequences = 16
calib_batch_size = 8
ratios = 0,0.25,0.5
oracle_max_keys = 12
)";

struct Result {
    int code;
    std::string out, err;
};

Result run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        root = fs::temp_directory_path() / ("heapr_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root);
        fs::create_directories(root);
        config = root / "small.ini";
        std::ofstream(config) << kSmallConfig;
        ::unsetenv("HEAPR_OUTPUT_ROOT");
    }
    void TearDown() override { fs::remove_all(root); }

    Result cmd(const std::string& sub, const fs::path& out, std::vector<std::string> extra = {}) {
        std::vector<std::string> args{"-c", config.string(), "-o", out.string()};
        args.insert(args.end(), extra.begin(), extra.end());
        args.push_back(sub);
        return run(args);
    }

    fs::path root, config;
};

}  // namespace

TEST_F(CliTest, HelpListsSubcommands) {
    const Result r = run({"--help"});
    EXPECT_EQ(r.code, kExitOk);
    for (const char* s : {"gen-corpus", "train", "calibrate", "score", "prune", "eval", "oracle", "sweep", "compare"})
        EXPECT_NE(r.out.find(s), std::string::npos) << s;
    EXPECT_EQ(run({"--version"}).code, kExitOk);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run({"--no-such-flag", "train"}).code, kExitUsage);
    EXPECT_EQ(run({}).code, kExitUsage);
    EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(run({"train", "eval"}).code, kExitUsage);

    const fs::path bad = root / "bad.ini";
    std::ofstream(bad) << "[meta]\nschema = 1\n[run]\nratio = lots\n";
    const Result r = run({"-c", bad.string(), "train"});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("run.ratio"), std::string::npos);
    EXPECT_EQ(run({"-c", (root / "missing.ini").string(), "train"}).code, kExitUsage);
    EXPECT_EQ(run({"-c", config.string(), "-s", "run.bogus=1", "train"}).code, kExitUsage);
    EXPECT_EQ(run({"-c", config.string(), "-s", "run.method=camera", "prune"}).code, kExitUsage);
}

TEST_F(CliTest, RuntimeFailureExitsOne) {
    std::ofstream(root / "file") << "x";
    const Result r = cmd("gen-corpus", root / "file" / "sub");
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, FullPipelineWritesArtifacts) {
    const fs::path out = root / "run";
    for (const char* sub : {"gen-corpus", "train", "calibrate", "score", "prune", "eval", "oracle", "sweep", "compare"}) {
        const Result r = cmd(sub, out);
        ASSERT_EQ(r.code, kExitOk) << sub << ": " << r.err;
    }
    for (const char* f : {"config.ini", "run_manifest.json", "corpus.json", "sweep.csv", "compare.csv",
                          "seed_0/model.json", "seed_0/train_log.csv", "seed_0/train_summary.json",
                          "seed_0/covariances.json", "seed_0/importance.csv", "seed_0/manifest.json",
                          "seed_0/pruned_model.json", "seed_0/flops.json", "seed_0/eval.json",
                          "seed_0/obs_report.csv", "seed_0/oracle.json"})
        EXPECT_TRUE(fs::exists(out / f)) << f;

    const auto manifest = read_json(out / "run_manifest.json");
    EXPECT_EQ(manifest.at("command"), "compare");
    EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
    EXPECT_FALSE(manifest.contains("wall_seconds"));
    EXPECT_TRUE(manifest.at("versions").contains("heapr"));

    const std::string sweep = slurp(out / "sweep.csv");
    EXPECT_EQ(sweep.substr(0, sweep.find('\n')), "ratio,method,mode,seed,perplexity,flops_saving");
    std::size_t lines = 0;
    for (char c : sweep) lines += c == '\n';
    EXPECT_EQ(lines, 4u);
    const std::string obs = slurp(out / "seed_0/obs_report.csv");
    EXPECT_EQ(obs.substr(0, obs.find('\n')), "layer,expert,channel,predicted,measured");
    const std::string imp = slurp(out / "seed_0/importance.csv");
    EXPECT_EQ(imp.substr(0, imp.find('\n')), "layer,expert,channel,score,token_count,method");

    const auto flops = read_json(out / "seed_0/flops.json");
    EXPECT_GT(flops.at("saving_fraction").get<double>(), 0.0);
    EXPECT_FALSE(flops.at("convention").get<std::string>().empty());
}

TEST_F(CliTest, DeterministicRerunIsByteIdentical) {
    const fs::path a = root / "a", b = root / "b";
    for (const fs::path& out : {a, b}) {
        ASSERT_EQ(cmd("score", out).code, kExitOk);
        ASSERT_EQ(cmd("sweep", out).code, kExitOk);
    }
    for (const char* f : {"sweep.csv", "config.ini", "run_manifest.json", "seed_0/importance.csv", "seed_0/model.json"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    // rerunning in place reuses the trained model and rewrites identical bytes
    const std::string before = slurp(a / "sweep.csv");
    ASSERT_EQ(cmd("sweep", a).code, kExitOk);
    EXPECT_EQ(slurp(a / "sweep.csv"), before);
}

TEST_F(CliTest, NonDeterministicManifestRecordsTime) {
    const fs::path out = root / "nd";
    ASSERT_EQ(cmd("gen-corpus", out, {"-s", "run.deterministic=false"}).code, kExitOk);
    EXPECT_TRUE(read_json(out / "run_manifest.json").contains("wall_seconds"));
}

TEST_F(CliTest, OutputRootOverride) {
    ::setenv("HEAPR_OUTPUT_ROOT", (root / "envroot").c_str(), 1);
    const Result r = run({"-c", config.string(), "-o", "rel", "gen-corpus"});
    ::unsetenv("HEAPR_OUTPUT_ROOT");
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_TRUE(fs::exists(root / "envroot" / "rel" / "corpus.json"));
}

TEST_F(CliTest, OverridesReachTheRun) {
    const fs::path out = root / "ov";
    ASSERT_EQ(cmd("train", out, {"-s", "run.seeds=2,5", "--set", "train.steps=3"}).code, kExitOk);
    EXPECT_TRUE(fs::exists(out / "seed_2/model.json"));
    EXPECT_TRUE(fs::exists(out / "seed_5/model.json"));
    const std::string log = slurp(out / "seed_5/train_log.csv");
    std::size_t lines = 0;
    for (char c : log) lines += c == '\n';
    EXPECT_EQ(lines, 4u);  // header + 3 steps
    EXPECT_NE(slurp(out / "config.ini").find("steps = 3"), std::string::npos);
}
