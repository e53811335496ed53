#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <sys/wait.h>

#include "t1lab/cli.hpp"

namespace t1lab {
namespace {

namespace fs = std::filesystem;
using cli::Options;
using nlohmann::json;

const char* kTiny = R"([run]
name = tiny
seed = 5

[data]
difficulty = 1
sft_count = 40
eval_count = 10
rl_count = 40

[policy]
window = 4
embed = 4
hidden = 8

[sft]
epochs = 1
batch_size = 8

[sampling]
k = 4
max_new_tokens = 16

[train]
prompts_per_step = 2
steps = 4
checkpoint_every = 2
eval_every = 2
dump_every = 2
)";

std::string message_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

TEST(Config, DefaultsAndOverrides) {
    const auto c = parse_config(kTiny);
    EXPECT_EQ(c.name, "tiny");
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.arch.window, 4);
    EXPECT_EQ(c.train.sampling.k, 4);
    EXPECT_EQ(c.train.penalty.max_length, 16);
    EXPECT_EQ(c.train.seed, 5u);
    EXPECT_FALSE(c.sft.shuffle);
    EXPECT_TRUE(parse_config("[run]\nname=a\nseed=1\n[sft]\nshuffle = true\n").sft.shuffle);
    // sections may not repeat
    EXPECT_FALSE(message_of(std::string(kTiny) + "\n[sft]\nshuffle = true\n").empty());
    // task alphabet is the default; "all" disables the alphabet check
    EXPECT_FALSE(c.train.penalty.alphabet.empty());
    EXPECT_TRUE(parse_config("[run]\nname=a\nseed=1\n[penalty]\nalphabet = all\n").train.penalty.alphabet.empty());
}

TEST(Config, RejectsUnknownAndMissing) {
    EXPECT_NE(message_of("[run]\nname=a\nseed=1\n[nope]\nx=1\n").find("unknown section [nope]"), std::string::npos);
    EXPECT_NE(message_of("[run]\nname=a\nseed=1\nspeed=2\n").find("unknown key run.speed"), std::string::npos);
    EXPECT_NE(message_of("[run]\nseed=1\n").find("missing required key run.name"), std::string::npos);
    EXPECT_NE(message_of("[run]\nname=a\n").find("missing required key run.seed"), std::string::npos);
    EXPECT_NE(message_of("[run]\nname=a b\nseed=1\n").find("run.name"), std::string::npos);
    EXPECT_FALSE(message_of("[run\nname=a\n").empty());
}

TEST(Config, EveryKeyRejectsGarbage) {
    const std::set<std::string> free_text{"run.name", "run.out"};
    int checked = 0;
    for (const auto& e : config_detail::schema()) {
        const std::string key = std::string(e.section) + "." + e.key;
        if (free_text.count(key)) continue;
        const std::string text = key == "run.seed"
                                     ? "[run]\nname=a\nseed = zz?\n"
                                     : "[run]\nname=a\nseed=1\n[" + std::string(e.section) + "]\n" + e.key + " = zz?\n";
        const std::string msg = message_of(text);
        EXPECT_NE(msg.find(key), std::string::npos) << key << " -> '" << msg << "'";
        ++checked;
    }
    EXPECT_GT(checked, 30);
}

TEST(Config, RangeChecks) {
    auto with = [](const std::string& extra) { return message_of("[run]\nname=a\nseed=1\n" + extra); };
    EXPECT_FALSE(with("[sampling]\ntop_p = 0\n").empty());
    EXPECT_FALSE(with("[sampling]\nk = 1\n").empty());
    EXPECT_FALSE(with("[data]\nerror_rate = 1.5\n").empty());
    EXPECT_FALSE(with("[train]\nema_decay = 1.5\n").empty());
    EXPECT_FALSE(with("[analysis]\nfractions = 0.5, 0.2\n").empty());
    EXPECT_TRUE(with("[analysis]\nfractions = 0.2, 0.5, 1.0\n").empty());
}

class CliTest : public ::testing::Test {
protected:
    fs::path root;

    void SetUp() override {
        root = fs::temp_directory_path() /
               ("t1lab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    void TearDown() override { fs::remove_all(root); }

    fs::path write_config(const std::string& text, const std::string& name = "run.ini") {
        const fs::path p = root / name;
        io::write_text(p, text);
        return p;
    }

    Options opts(const fs::path& config, const fs::path& out) {
        Options o;
        o.config = config;
        o.out = out;
        o.quiet = true;
        return o;
    }

    static fs::path run_dir(const Options& o) { return cli::open_run(o).dir; }

    // gen-data + sft in a fresh out root
    Options prepared(const fs::path& config, const std::string& out) {
        Options o = opts(config, root / out);
        EXPECT_EQ(cli::cmd_gen_data(o), cli::kExitOk);
        EXPECT_EQ(cli::cmd_sft(o), cli::kExitOk);
        return o;
    }
};

TEST_F(CliTest, RunDirectoryIsNamePlusConfigHash) {
    const auto cfg = write_config(kTiny);
    const auto o = opts(cfg, root / "out");
    const fs::path d = run_dir(o);
    EXPECT_EQ(d.parent_path(), root / "out");
    const std::string leaf = d.filename().string();
    EXPECT_EQ(leaf, "tiny-" + cli::sha256_hex(kTiny).substr(0, 12));
    EXPECT_EQ(io::read_text(d / "config.ini"), kTiny);
    // a seed override changes the hash
    Options s = o;
    s.seed = 6;
    EXPECT_NE(run_dir(s), d);
    EXPECT_EQ(cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_F(CliTest, GenDataIsByteIdentical) {
    const auto cfg = write_config(kTiny);
    const auto a = opts(cfg, root / "a");
    const auto b = opts(cfg, root / "b");
    ASSERT_EQ(cli::cmd_gen_data(a), 0);
    ASSERT_EQ(cli::cmd_gen_data(b), 0);
    for (const char* f : {"sft.jsonl", "eval.jsonl", "rl.jsonl", "sft_traces.jsonl"})
        EXPECT_EQ(io::read_text(run_dir(a) / "data" / f), io::read_text(run_dir(b) / "data" / f)) << f;
    const auto rl = io::read_instances(run_dir(a) / "data" / "rl.jsonl");
    const auto ev = io::read_instances(run_dir(a) / "data" / "eval.jsonl");
    EXPECT_EQ(rl.size(), 40u);
    EXPECT_EQ(ev.size(), 10u);
    std::set<std::int64_t> ids;
    for (const auto& x : rl) ids.insert(x.id);
    for (const auto& x : ev) ids.insert(x.id);
    EXPECT_EQ(ids.size(), 50u);
    const auto m = json::parse(io::read_text(run_dir(a) / "manifest.json"));
    EXPECT_EQ(m.at("config_hash"), run_dir(a).filename().string().substr(5));
    EXPECT_FALSE(m.at("commands").at("gen-data").at("finished_at").is_null());
}

TEST_F(CliTest, EmptySplitsWriteHeaderOnlyFiles) {
    const auto cfg = write_config("[run]\nname=empty\nseed=1\n[data]\nsft_count=0\nrl_count=0\neval_count=0\n");
    const auto o = opts(cfg, root / "out");
    ASSERT_EQ(cli::cmd_gen_data(o), 0);
    const std::string text = io::read_text(run_dir(o) / "data" / "rl.jsonl");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
    EXPECT_TRUE(io::read_instances(run_dir(o) / "data" / "rl.jsonl").empty());
}

TEST_F(CliTest, MissingInputsAreReported) {
    const auto cfg = write_config(kTiny);
    const auto o = opts(cfg, root / "out");
    EXPECT_THROW(cli::cmd_train(o), IoError);
    EXPECT_THROW(cli::cmd_sft(o), IoError);
    EXPECT_THROW(cli::cmd_gen_data(opts(root / "absent.ini", root / "out")), ConfigError);
    Options d = o;
    EXPECT_THROW(cli::cmd_detect(d), ConfigError);
    d.input = root / "absent.jsonl";
    EXPECT_THROW(cli::cmd_detect(d), IoError);
}

TEST_F(CliTest, TrainIsReproducibleAndResumable) {
    const auto cfg = write_config(kTiny);
    const auto a = prepared(cfg, "a");
    const auto b = prepared(cfg, "b");
    const fs::path da = run_dir(a), db = run_dir(b);
    EXPECT_EQ(io::read_text(da / "checkpoints" / "sft.t1pk"), io::read_text(db / "checkpoints" / "sft.t1pk"));
    ASSERT_EQ(cli::cmd_train(a), 0);
    ASSERT_EQ(cli::cmd_train(b), 0);
    const std::string metrics = io::read_text(da / "metrics.jsonl");
    EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 4);
    EXPECT_EQ(metrics, io::read_text(db / "metrics.jsonl"));
    EXPECT_EQ(io::read_text(da / "checkpoints" / "final.t1pk"), io::read_text(db / "checkpoints" / "final.t1pk"));
    EXPECT_TRUE(fs::exists(da / "trajectories" / "step-000002.jsonl"));

    // resume run b from step 2: the tail is recomputed identically
    Options r = b;
    r.resume = db / "checkpoints" / "step-000002.t1om";
    ASSERT_EQ(cli::cmd_train(r), 0);
    EXPECT_EQ(io::read_text(db / "metrics.jsonl"), metrics);
    for (const char* f : {"final.t1pk", "final.t1rf", "final.t1om", "final.json"})
        EXPECT_EQ(io::read_text(da / "checkpoints" / f), io::read_text(db / "checkpoints" / f)) << f;
}

TEST_F(CliTest, EvalMatchesScalingAtFullBudgetAndDetectCounts) {
    const auto cfg = write_config(std::string(kTiny) + "\n[analysis]\nfractions = 0.5, 1.0\n");
    auto o = prepared(cfg, "out");
    const fs::path d = run_dir(o);
    o.checkpoint = d / "checkpoints" / "sft.t1pk";
    ASSERT_EQ(cli::cmd_eval(o), 0);
    ASSERT_EQ(cli::cmd_scaling(o), 0);
    const auto report = json::parse(io::read_text(d / "reports" / "eval-sft.json"));
    const std::string csv = io::read_text(d / "curves" / "scaling-sft.csv");
    const auto last_row = csv.substr(csv.rfind('\n', csv.size() - 2) + 1);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", report.at("accuracy").get<double>());
    EXPECT_NE(last_row.find(std::string(",") + buf + ",10"), std::string::npos) << last_row;
    EXPECT_TRUE(fs::exists(d / "reports" / "key_steps-sft.jsonl"));

    ASSERT_EQ(cli::cmd_train(o), 0);
    Options det = o;
    det.input = d / "trajectories" / "step-000004.jsonl";
    ASSERT_EQ(cli::cmd_detect(det), 0);
    const auto rep = json::parse(io::read_text(d / "reports" / "detect-step-000004.json"));
    EXPECT_EQ(rep.at("total").get<std::size_t>(), 8u);  // 2 prompts x 4 samples
}

TEST_F(CliTest, FilterWritesPassRates) {
    const auto cfg = write_config(std::string(kTiny) + "\n[filter]\nn_samples = 4\ndelta = 0.5\n");
    const auto o = prepared(cfg, "out");
    ASSERT_EQ(cli::cmd_filter(o), 0);
    const fs::path d = run_dir(o);
    const auto rates = io::read_jsonl(d / "reports" / "pass_rates.jsonl", io::kPassRateFormat);
    ASSERT_EQ(rates.size(), 40u);
    std::size_t kept = 0;
    for (const auto& r : rates) {
        const double p = r.at("pass_rate").get<double>();
        EXPECT_EQ(r.at("kept").get<bool>(), p > 0.0 && p < 0.5);
        kept += r.at("kept").get<bool>();
    }
    EXPECT_EQ(io::read_instances(d / "data" / "rl_filtered.jsonl").size(), kept);
}

#ifdef T1LAB_TOOL_PATH
int run_tool(const std::string& args) {
    const std::string cmd = std::string("\"") + T1LAB_TOOL_PATH + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST_F(CliTest, ToolExitCodes) {
    const auto cfg = write_config(kTiny);
    const auto bad = write_config("[run]\nname=x\nseed=1\nbogus=1\n", "bad.ini");
    const std::string out = " --out \"" + (root / "out").string() + "\"";
    EXPECT_EQ(run_tool("--help"), 0);
    EXPECT_EQ(run_tool(""), 1);
    EXPECT_EQ(run_tool("frobnicate"), 1);
    EXPECT_EQ(run_tool("gen-data"), 1);  // --config is required
    EXPECT_EQ(run_tool("gen-data --config \"" + bad.string() + "\"" + out), 1);
    EXPECT_EQ(run_tool("gen-data --config \"" + (root / "none.ini").string() + "\"" + out), 1);
    EXPECT_EQ(run_tool("train --config \"" + cfg.string() + "\"" + out), 2);
    EXPECT_EQ(run_tool("gen-data --quiet --config \"" + cfg.string() + "\"" + out), 0);
}
#endif

}  // namespace
}  // namespace t1lab
