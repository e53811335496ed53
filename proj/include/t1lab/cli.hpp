#pragma once

// Subcommand implementations behind the t1lab executable. Each command takes
// parsed Options, resolves the run directory from the config hash and writes
// its artifacts plus an entry in manifest.json.
//
// Run directory: <out>/<name>-<hash>/
//   config.ini  manifest.json  metrics.jsonl  timing.jsonl
//   data/  checkpoints/  curves/  reports/  trajectories/

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "t1lab/analysis.hpp"
#include "t1lab/checkpoint.hpp"
#include "t1lab/config.hpp"
#include "t1lab/env.hpp"
#include "t1lab/io.hpp"
#include "t1lab/shaping.hpp"
#include "t1lab/trainer.hpp"

#ifndef T1LAB_VERSION
#define T1LAB_VERSION "0.1.0"
#endif

namespace t1lab::cli {

namespace fs = std::filesystem;
using io::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

struct Options {
    fs::path config;
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
    std::optional<fs::path> resume;
    std::optional<fs::path> checkpoint;
    std::optional<fs::path> input;
    bool quiet = false;
};

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned i = 0; i < len; ++i) {
        s.push_back(hex[md[i] >> 4]);
        s.push_back(hex[md[i] & 15]);
    }
    return s;
}

struct Run {
    RunConfig cfg;
    std::string config_text;
    std::string hash;  // first 12 hex digits of SHA-256 over the config bytes (+ seed override)
    fs::path dir;
    bool quiet = false;

    fs::path data(const std::string& f) const { return dir / "data" / f; }
    fs::path ckpt(const std::string& f) const { return dir / "checkpoints" / f; }

    void log(const std::string& msg) const {
        if (!quiet) std::cerr << "[" << cfg.name << "] " << msg << "\n";
    }
};

inline Run open_run(const Options& opt) {
    if (opt.config.empty()) throw ConfigError("--config is required");
    if (!fs::exists(opt.config)) throw ConfigError("config file not found: " + opt.config.string());
    Run r;
    r.config_text = io::read_text(opt.config);
    r.cfg = parse_config(r.config_text);
    std::string hashed = r.config_text;
    if (opt.seed) {
        r.cfg.seed = *opt.seed;
        r.cfg.finalize();
        hashed += "\n# --seed " + std::to_string(*opt.seed) + "\n";
    }
    r.hash = sha256_hex(hashed).substr(0, 12);
    const fs::path root = opt.out ? *opt.out : fs::path(r.cfg.out_root);
    r.dir = root / (r.cfg.name + "-" + r.hash);
    r.quiet = opt.quiet;
    fs::create_directories(r.dir);
    const fs::path copy = r.dir / "config.ini";
    if (!fs::exists(copy) || io::read_text(copy) != r.config_text) io::write_text(copy, r.config_text);
    return r;
}

inline std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Records one subcommand invocation. Called with finished=false before work
/// starts and again with the artifact list when it ends.
inline void write_manifest(const Run& run, const std::string& command, const std::string& started,
                           const std::vector<fs::path>& artifacts, bool finished) {
    const fs::path path = run.dir / "manifest.json";
    json m = json::object();
    if (fs::exists(path)) {
        try {
            m = json::parse(io::read_text(path));
        } catch (const json::exception&) {
            m = json::object();
        }
    }
    m["config_hash"] = run.hash;
    m["config_file"] = "config.ini";
    m["seed"] = run.cfg.seed;
    m["code_version"] = T1LAB_VERSION;
    json entry{{"started_at", started}, {"finished_at", finished ? json(timestamp()) : json(nullptr)}};
    json arts = json::array();
    for (const auto& a : artifacts) arts.push_back(fs::relative(a, run.dir).generic_string());
    entry["artifacts"] = std::move(arts);
    m["commands"][command] = std::move(entry);
    io::write_text(path, m.dump(2) + "\n");
}

struct Splits {
    std::vector<TaskInstance> sft, eval, rl;
};

/// One instance stream split into disjoint id ranges: SFT, eval, RL.
inline Splits make_splits(const RunConfig& cfg) {
    const std::size_t total = cfg.data.sft_count + cfg.data.eval_count + cfg.data.rl_count;
    Splits s;
    if (total == 0) return s;
    auto all = gen_instances(cfg.seed, total, cfg.data.difficulty, cfg.data.family);
    auto at = [&](std::size_t i) { return all.begin() + static_cast<std::ptrdiff_t>(i); };
    s.sft.assign(at(0), at(cfg.data.sft_count));
    s.eval.assign(at(cfg.data.sft_count), at(cfg.data.sft_count + cfg.data.eval_count));
    s.rl.assign(at(cfg.data.sft_count + cfg.data.eval_count), all.end());
    return s;
}

/// SFT traces; a loop_fraction share (by per-instance coin) is made looping.
inline std::vector<SftTrace> make_traces(const RunConfig& cfg, std::span<const TaskInstance> xs) {
    std::vector<SftTrace> out;
    out.reserve(xs.size());
    for (const auto& x : xs) {
        SftTrace tr = synth_sft_trace(x, cfg.seed, cfg.data.n_attempts, cfg.data.error_rate);
        if (cfg.data.loop_fraction > 0.0) {
            SplitMix64 coin = substream(cfg.seed, {0x6c6f6f70ULL, static_cast<std::uint64_t>(x.id)});
            if (coin.uniform() < cfg.data.loop_fraction)
                tr = make_looping(std::move(tr), static_cast<std::size_t>(cfg.train.sampling.max_new_tokens));
        }
        out.push_back(std::move(tr));
    }
    return out;
}

inline int cmd_gen_data(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "gen-data", started, {}, false);
    const Splits s = make_splits(run.cfg);
    const auto traces = make_traces(run.cfg, s.sft);
    io::write_instances(run.data("sft.jsonl"), s.sft);
    io::write_instances(run.data("eval.jsonl"), s.eval);
    io::write_instances(run.data("rl.jsonl"), s.rl);
    io::write_traces(run.data("sft_traces.jsonl"), s.sft, traces);
    run.log("wrote " + std::to_string(s.sft.size()) + " SFT / " + std::to_string(s.eval.size()) + " eval / " +
            std::to_string(s.rl.size()) + " RL instances to " + (run.dir / "data").string());
    write_manifest(run, "gen-data", started,
                   {run.data("sft.jsonl"), run.data("eval.jsonl"), run.data("rl.jsonl"), run.data("sft_traces.jsonl")},
                   true);
    return kExitOk;
}

inline fs::path checkpoint_or(const Options& opt, const fs::path& fallback) {
    const fs::path p = opt.checkpoint ? *opt.checkpoint : fallback;
    if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
    return p;
}

inline std::vector<TaskInstance> require_instances(const fs::path& p) {
    if (!fs::exists(p)) throw IoError("dataset not found: " + p.string() + " (run gen-data first)");
    return io::read_instances(p);
}

inline int cmd_filter(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "filter", started, {}, false);
    const auto params = checkpoint::load_policy(checkpoint_or(opt, run.ckpt("sft.t1pk")));
    const auto rl = require_instances(run.data("rl.jsonl"));
    SamplingConfig scfg = run.cfg.train.sampling;
    scfg.seed = derive_seed(run.cfg.seed, {0x66696c74ULL});
    const auto res = pass_rate_filter(rl, params, ReferenceSnapshot::from(params), scfg, run.cfg.filter.n_samples,
                                      run.cfg.filter.delta);
    io::write_instances(run.data("rl_filtered.jsonl"), res.kept);
    std::vector<json> report;
    for (std::size_t i = 0; i < rl.size(); ++i) {
        const double p = res.pass_rates[i];
        report.push_back(json{{"id", rl[i].id}, {"pass_rate", p}, {"kept", p > 0.0 && p < run.cfg.filter.delta}});
    }
    io::write_jsonl(run.dir / "reports" / "pass_rates.jsonl", io::kPassRateFormat, report);
    run.log("kept " + std::to_string(res.kept.size()) + " of " + std::to_string(rl.size()) + " RL instances");
    write_manifest(run, "filter", started, {run.data("rl_filtered.jsonl"), run.dir / "reports" / "pass_rates.jsonl"},
                   true);
    return kExitOk;
}

inline int cmd_sft(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "sft", started, {}, false);
    const fs::path traces_path = run.data("sft_traces.jsonl");
    if (!fs::exists(traces_path)) throw IoError("trace corpus not found: " + traces_path.string());
    const auto corpus = io::read_traces(traces_path);
    const auto eval = require_instances(run.data("eval.jsonl"));
    std::vector<SftExample> data;
    for (std::size_t i = 0; i < corpus.instances.size(); ++i)
        data.push_back(sft_example(corpus.instances[i], corpus.traces[i]));
    PolicyParams params = init_params(run.cfg.seed, run.cfg.arch);
    AdamState opt_state(params.theta.size());
    const fs::path metrics = run.dir / "sft_metrics.jsonl";
    auto out = io::open_out(metrics);
    const int mnt = run.cfg.train.sampling.max_new_tokens;
    sft_train(params, opt_state, data, run.cfg.sft.epochs, run.cfg.sft.batch_size, run.cfg.sft.adam,
              run.cfg.sft.clip_norm, run.cfg.seed, run.cfg.sft.shuffle, [&](int epoch, double loss) {
                  json line{{"epoch", epoch}, {"loss", loss}};
                  if (!eval.empty()) line["eval_accuracy"] = greedy_eval(params, eval, mnt).accuracy;
                  out << io::dump_line(line) << std::flush;
                  run.log("sft epoch " + std::to_string(epoch) + " loss " + std::to_string(loss) +
                          (line.contains("eval_accuracy")
                               ? " eval " + std::to_string(line["eval_accuracy"].get<double>())
                               : std::string()));
              });
    checkpoint::save(run.ckpt("sft.t1pk"), params);
    write_manifest(run, "sft", started, {run.ckpt("sft.t1pk"), metrics}, true);
    return kExitOk;
}

inline std::string step_stem(std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step-%06llu", static_cast<unsigned long long>(step));
    return buf;
}

/// Writes policy, reference, optimizer moments and the scalar state that the
/// binary files do not carry.
inline void save_train_state(const fs::path& dir, const std::string& stem, const TrainerState& st) {
    checkpoint::save(dir / (stem + ".t1pk"), st.params);
    checkpoint::save(dir / (stem + ".t1rf"), st.ref);
    checkpoint::save(dir / (stem + ".t1om"), st.params.arch, st.opt);
    io::write_text(dir / (stem + ".json"),
                   json{{"step", st.step}, {"ref_step", st.ref.step}, {"cumulative_kl", st.cumulative_kl}}.dump() +
                       "\n");
}

inline TrainerState load_train_state(const fs::path& any_file) {
    fs::path base = any_file;
    base.replace_extension();
    for (const char* ext : {".t1pk", ".t1rf", ".t1om", ".json"}) {
        fs::path p = base;
        p += ext;
        if (!fs::exists(p)) throw IoError("resume checkpoint incomplete, missing " + p.string());
    }
    TrainerState st;
    st.params = checkpoint::load_policy(fs::path(base).concat(".t1pk"));
    const json meta = json::parse(io::read_text(fs::path(base).concat(".json")));
    st.step = meta.at("step").get<std::uint64_t>();
    st.cumulative_kl = meta.at("cumulative_kl").get<double>();
    st.ref = checkpoint::load_reference(fs::path(base).concat(".t1rf"), meta.at("ref_step").get<std::uint64_t>());
    st.opt = checkpoint::load_optimizer(fs::path(base).concat(".t1om"), st.params.arch);
    return st;
}

/// Keeps only the lines whose "step" is <= last_step.
inline void truncate_jsonl_by_step(const fs::path& path, std::uint64_t last_step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (json::parse(line).at("step").get<std::uint64_t>() <= last_step) kept += line + "\n";
    }
    in.close();
    io::write_text(path, kept);
}

inline int cmd_train(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "train", started, {}, false);
    const RunConfig& cfg = run.cfg;
    const fs::path dataset = cfg.use_filtered ? run.data("rl_filtered.jsonl") : run.data("rl.jsonl");
    const auto pool = require_instances(dataset);
    if (pool.empty()) throw ConfigError("RL dataset is empty: " + dataset.string());
    const auto eval = require_instances(run.data("eval.jsonl"));

    TrainerState st;
    const fs::path metrics_path = run.dir / "metrics.jsonl";
    const fs::path timing_path = run.dir / "timing.jsonl";
    if (opt.resume) {
        st = load_train_state(*opt.resume);
        truncate_jsonl_by_step(metrics_path, st.step);
        truncate_jsonl_by_step(timing_path, st.step);
        run.log("resuming after step " + std::to_string(st.step));
    } else {
        st = start_state(checkpoint::load_policy(checkpoint_or(opt, run.ckpt("sft.t1pk"))));
        io::write_text(metrics_path, "");
        io::write_text(timing_path, "");
    }
    if (st.params.arch.vocab != tok::kStandardSize) throw ConfigError("checkpoint vocabulary does not match");

    auto metrics = io::open_out(metrics_path, std::ios::app);
    auto timing = io::open_out(timing_path, std::ios::app);
    std::vector<fs::path> artifacts{metrics_path, timing_path};
    std::vector<TaskInstance> batch(static_cast<std::size_t>(cfg.train.prompts_per_step));
    for (std::uint64_t step = st.step + 1; step <= static_cast<std::uint64_t>(cfg.train.steps); ++step) {
        const auto idx = batch_indices(cfg.seed, step, batch.size(), pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = pool[idx[i]];
        StepResult res = rl_step(st, batch, cfg.train);
        StepMetrics& m = res.metrics;
        if (cfg.train.eval_every > 0 && step % static_cast<std::uint64_t>(cfg.train.eval_every) == 0 && !eval.empty())
            m.eval_accuracy = greedy_eval(st.params, eval, cfg.train.sampling.max_new_tokens).accuracy;
        metrics << io::dump_line(io::to_json(m)) << std::flush;
        timing << io::dump_line(json{{"step", m.step}, {"wall_seconds", m.wall_seconds}}) << std::flush;
        if (cfg.dump_every > 0 && step % static_cast<std::uint64_t>(cfg.dump_every) == 0) {
            std::vector<Trajectory> all;
            for (const auto& g : res.groups) all.insert(all.end(), g.trajectories.begin(), g.trajectories.end());
            const fs::path p = run.dir / "trajectories" / (step_stem(step) + ".jsonl");
            io::write_trajectories(p, all);
            artifacts.push_back(p);
        }
        if (cfg.checkpoint_every > 0 && step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0) {
            save_train_state(run.dir / "checkpoints", step_stem(step), st);
            artifacts.push_back(run.ckpt(step_stem(step) + ".t1pk"));
        }
        char line[256];
        std::snprintf(line, sizeof line, "step %llu reward %.3f acc %.3f len %.1f kl %.3f overlong %.3f%s",
                      static_cast<unsigned long long>(step), m.mean_shaped_reward, m.accuracy,
                      m.mean_response_length, m.mean_kl, m.overlong_ratio,
                      m.eval_accuracy ? (" eval " + std::to_string(*m.eval_accuracy)).c_str() : "");
        run.log(line);
    }
    save_train_state(run.dir / "checkpoints", "final", st);
    artifacts.push_back(run.ckpt("final.t1pk"));
    write_manifest(run, "train", started, artifacts, true);
    return kExitOk;
}

inline int cmd_eval(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "eval", started, {}, false);
    const fs::path ck = checkpoint_or(opt, run.ckpt("final.t1pk"));
    const auto params = checkpoint::load_policy(ck);
    const auto eval = require_instances(run.data("eval.jsonl"));
    const auto res = greedy_eval(params, eval, run.cfg.train.sampling.max_new_tokens);
    json by = json::object();
    for (const auto& [d, ct] : res.by_difficulty)
        by[std::to_string(d)] = json{{"correct", ct.first},
                                     {"total", ct.second},
                                     {"accuracy", static_cast<double>(ct.first) / static_cast<double>(ct.second)}};
    const json report{{"checkpoint", ck.filename().string()}, {"accuracy", res.accuracy}, {"n", eval.size()},
                      {"by_difficulty", by}};
    const fs::path out = run.dir / "reports" / ("eval-" + ck.stem().string() + ".json");
    io::write_text(out, report.dump(2) + "\n");
    if (!run.quiet) std::cout << report.dump() << "\n";
    write_manifest(run, "eval", started, {out}, true);
    return kExitOk;
}

inline int cmd_scaling(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "scaling", started, {}, false);
    const RunConfig& cfg = run.cfg;
    const fs::path ck = checkpoint_or(opt, run.ckpt("final.t1pk"));
    const auto params = checkpoint::load_policy(ck);
    auto eval = require_instances(run.data("eval.jsonl"));
    if (cfg.analysis.eval_limit > 0 && eval.size() > cfg.analysis.eval_limit) eval.resize(cfg.analysis.eval_limit);

    std::optional<PolicyParams> sft;
    Summarizer summarizer{cfg.analysis.mode};
    if (cfg.analysis.mode == SummaryMode::policy_continuation) {
        const fs::path p = run.ckpt("sft.t1pk");
        if (!fs::exists(p)) throw ConfigError("policy-continuation mode needs the SFT checkpoint " + p.string());
        sft = checkpoint::load_policy(p);
        summarizer.sft = &*sft;
    }
    std::optional<SamplingConfig> sampling;
    if (cfg.analysis.sampled) {
        sampling = cfg.train.sampling;
        sampling->seed = derive_seed(cfg.seed, {0x7363616cULL});
    }
    const int mnt = cfg.train.sampling.max_new_tokens;
    const auto responses = generate_responses(params, eval, mnt, sampling);
    ScalingCurve curve = scaling_curve(responses, eval, cfg.analysis.schedule, summarizer);
    curve.checkpoint_id = ck.filename().string();
    curve.eval_set_id = "eval.jsonl";

    const std::string stem = ck.stem().string();
    const fs::path csv = run.dir / "curves" / ("scaling-" + stem + ".csv");
    {
        auto f = io::open_out(csv);
        write_csv(f, curve);
    }
    const KeyStepReport ks = key_step_report(responses, eval, summarizer);
    std::vector<json> lines;
    for (const auto& k : ks.steps) {
        const auto it = std::find_if(eval.begin(), eval.end(), [&](const auto& x) { return x.id == k.instance_id; });
        const auto& resp = responses[static_cast<std::size_t>(it - eval.begin())];
        lines.push_back(json{{"instance_id", k.instance_id},
                             {"step_index", k.step_index},
                             {"begin", k.begin},
                             {"end", k.end},
                             {"tokens", TokenSeq(resp.begin() + static_cast<std::ptrdiff_t>(k.begin),
                                                 resp.begin() + static_cast<std::ptrdiff_t>(k.end))}});
    }
    const fs::path ks_path = run.dir / "reports" / ("key_steps-" + stem + ".jsonl");
    io::write_jsonl(ks_path, io::kKeyStepsFormat, lines);
    const Vocabulary vocab = Vocabulary::standard();
    json freq = json::array();
    for (const auto& [t, n] : ks.frequency) freq.push_back(json{{"token", t}, {"symbol", vocab.symbol(t)}, {"count", n}});
    PatternCounts pc;
    for (const auto& r : responses) pc += pattern_counts(r);
    const json summary{{"checkpoint", curve.checkpoint_id},
                       {"key_step_count", ks.steps.size()},
                       {"key_step_token_frequency", freq},
                       {"patterns",
                        {{"attempt", pc.attempt},
                         {"check", pc.check},
                         {"revise", pc.revise},
                         {"verify", pc.verify},
                         {"other", pc.other}}}};
    const fs::path summary_path = run.dir / "reports" / ("analysis-" + stem + ".json");
    io::write_text(summary_path, summary.dump(2) + "\n");
    if (!run.quiet) {
        std::ostringstream ss;
        write_csv(ss, curve);
        std::cout << ss.str();
    }
    write_manifest(run, "scaling", started, {csv, ks_path, summary_path}, true);
    return kExitOk;
}

inline int cmd_detect(const Options& opt) {
    Run run = open_run(opt);
    const std::string started = timestamp();
    write_manifest(run, "detect", started, {}, false);
    if (!opt.input) throw ConfigError("detect needs --input <trajectory dump>");
    if (!fs::exists(*opt.input)) throw IoError("trajectory dump not found: " + opt.input->string());
    auto trajs = io::read_trajectories(*opt.input);
    DetectorReport rep;
    for (auto& t : trajs) {
        t.flags = detect_all(t, run.cfg.train.penalty);
        rep.add(t.flags);
    }
    const json j = io::to_json(rep);
    const fs::path out = run.dir / "reports" / ("detect-" + opt.input->stem().string() + ".json");
    io::write_text(out, j.dump(2) + "\n");
    if (!run.quiet) std::cout << j.dump() << "\n";
    write_manifest(run, "detect", started, {out}, true);
    return kExitOk;
}

}  // namespace t1lab::cli
