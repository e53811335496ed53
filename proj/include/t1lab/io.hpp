#pragma once

// JSON-lines persistence. Dataset-like files open with a header line
// {"format": ..., "version": 1, "count": n} so an empty dataset is still a
// valid, self-describing file. metrics.jsonl has no header.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t1lab/env.hpp"
#include "t1lab/error.hpp"
#include "t1lab/shaping.hpp"
#include "t1lab/trainer.hpp"
#include "t1lab/trajectory.hpp"

namespace t1lab::io {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kInstancesFormat = "t1lab.instances";
inline constexpr const char* kTracesFormat = "t1lab.traces";
inline constexpr const char* kTrajectoriesFormat = "t1lab.trajectories";
inline constexpr const char* kPassRateFormat = "t1lab.pass_rates";
inline constexpr const char* kKeyStepsFormat = "t1lab.key_steps";

inline json to_json(const TaskInstance& t) {
    return json{{"id", t.id},
                {"family", to_string(t.family)},
                {"question_tokens", t.question},
                {"label_tokens", t.label},
                {"difficulty", t.difficulty}};
}

inline TaskInstance instance_from_json(const json& j) {
    TaskInstance t;
    t.id = j.at("id").get<std::int64_t>();
    t.family = parse_task_family(j.value("family", std::string("addition")));
    t.question = j.at("question_tokens").get<TokenSeq>();
    t.label = j.at("label_tokens").get<TokenSeq>();
    t.difficulty = j.at("difficulty").get<int>();
    return t;
}

inline json to_json(const TaskInstance& inst, const SftTrace& tr) {
    json j = to_json(inst);
    j["tokens"] = tr.tokens;
    json segs = json::array();
    for (const auto& s : tr.segments) segs.push_back(json::array({s.begin, s.end, s.role}));
    j["segments"] = std::move(segs);
    return j;
}

inline SftTrace trace_from_json(const json& j) {
    SftTrace tr;
    tr.instance_id = j.at("id").get<std::int64_t>();
    tr.tokens = j.at("tokens").get<TokenSeq>();
    for (const auto& s : j.at("segments"))
        tr.segments.push_back(Segment{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<Token>()});
    return tr;
}

inline json to_json(const Trajectory& t) {
    return json{{"instance_id", t.instance_id},
                {"sample_index", t.sample_index},
                {"prompt", t.prompt},
                {"response", t.response},
                {"policy_logprobs", t.policy_logprobs},
                {"ref_logprobs", t.ref_logprobs},
                {"entropy_sum", t.entropy_sum},
                {"finish", std::string(to_string(t.finish))},
                {"reward", t.reward},
                {"flags", t.flags.names()},
                {"shaped_reward", t.shaped_reward},
                {"normalized_reward", t.normalized_reward},
                {"kl", t.kl},
                {"normalized_kl", t.normalized_kl},
                {"advantage", t.advantage}};
}

inline Trajectory trajectory_from_json(const json& j) {
    Trajectory t;
    t.instance_id = j.at("instance_id").get<std::int64_t>();
    t.sample_index = j.value("sample_index", std::int64_t{0});
    t.prompt = j.value("prompt", TokenSeq{});
    t.response = j.at("response").get<TokenSeq>();
    t.policy_logprobs = j.value("policy_logprobs", std::vector<double>{});
    t.ref_logprobs = j.value("ref_logprobs", std::vector<double>{});
    t.entropy_sum = j.value("entropy_sum", 0.0);
    const std::string finish = j.value("finish", std::string("eos"));
    if (finish != "eos" && finish != "max_length") throw IoError("bad finish reason '" + finish + "'");
    t.finish = finish == "eos" ? FinishReason::eos : FinishReason::max_length;
    t.reward = j.value("reward", 0);
    for (const auto& name : j.value("flags", std::vector<std::string>{})) {
        bool known = false;
        for (auto f : kAllPenaltyFlags)
            if (name == to_string(f)) t.flags.insert(f), known = true;
        if (!known) throw IoError("unknown penalty flag '" + name + "'");
    }
    t.shaped_reward = j.value("shaped_reward", 0.0);
    t.normalized_reward = j.value("normalized_reward", 0.0);
    t.kl = j.value("kl", 0.0);
    t.normalized_kl = j.value("normalized_kl", 0.0);
    t.advantage = j.value("advantage", 0.0);
    return t;
}

inline json to_json(const DetectorReport& r) {
    return json{{"total", r.total},
                {"repetition", r.repetition},
                {"overlong", r.overlong},
                {"garbage_alphabet", r.garbage_alphabet},
                {"garbage_perplexity", r.garbage_perplexity},
                {"penalized", r.penalized},
                {"overlong_ratio", r.overlong_ratio()}};
}

/// Wall time is deliberately absent: it lives in timing.jsonl.
inline json to_json(const StepMetrics& m) {
    json j{{"step", m.step},
           {"mean_shaped_reward", m.mean_shaped_reward},
           {"accuracy", m.accuracy},
           {"mean_response_length", m.mean_response_length},
           {"mean_kl", m.mean_kl},
           {"cumulative_kl", m.cumulative_kl},
           {"entropy", m.entropy},
           {"overlong_ratio", m.overlong_ratio},
           {"flag_counts", to_json(m.flags)},
           {"grad_norm", m.grad_norm}};
    if (m.eval_accuracy) j["eval_accuracy"] = *m.eval_accuracy;
    return j;
}

inline std::string dump_line(const json& j) { return j.dump() + "\n"; }

inline json header(const char* format, std::size_t count) {
    return json{{"format", format}, {"version", kFormatVersion}, {"count", count}};
}

inline std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::trunc) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::out | mode);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    return f;
}

/// Writes header + one line per record.
inline void write_jsonl(const std::filesystem::path& path, const char* format, const std::vector<json>& records) {
    auto f = open_out(path);
    f << dump_line(header(format, records.size()));
    for (const auto& r : records) f << dump_line(r);
    if (!f) throw IoError("write failed: " + path.string());
}

/// Reads a headered JSONL file and checks its format tag.
inline std::vector<json> read_jsonl(const std::filesystem::path& path, const char* format) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw IoError("missing header line: " + path.string());
    json head;
    try {
        head = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError("bad header in " + path.string() + ": " + e.what());
    }
    if (head.value("format", std::string()) != format)
        throw IoError(path.string() + " is not a " + format + " file");
    if (head.value("version", 0) != kFormatVersion) throw IoError("unsupported version in " + path.string());
    std::vector<json> out;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (head.contains("count") && head["count"].get<std::size_t>() != out.size())
        throw IoError("record count does not match header in " + path.string());
    return out;
}

inline void write_instances(const std::filesystem::path& path, std::span<const TaskInstance> xs) {
    std::vector<json> recs;
    for (const auto& x : xs) recs.push_back(to_json(x));
    write_jsonl(path, kInstancesFormat, recs);
}

inline std::vector<TaskInstance> read_instances(const std::filesystem::path& path) {
    std::vector<TaskInstance> out;
    for (const auto& j : read_jsonl(path, kInstancesFormat)) out.push_back(instance_from_json(j));
    return out;
}

inline void write_traces(const std::filesystem::path& path, std::span<const TaskInstance> xs,
                         std::span<const SftTrace> traces) {
    if (xs.size() != traces.size()) throw ShapeError("one trace per instance required");
    std::vector<json> recs;
    for (std::size_t i = 0; i < xs.size(); ++i) recs.push_back(to_json(xs[i], traces[i]));
    write_jsonl(path, kTracesFormat, recs);
}

struct TraceCorpus {
    std::vector<TaskInstance> instances;
    std::vector<SftTrace> traces;
};

inline TraceCorpus read_traces(const std::filesystem::path& path) {
    TraceCorpus c;
    for (const auto& j : read_jsonl(path, kTracesFormat)) {
        c.instances.push_back(instance_from_json(j));
        c.traces.push_back(trace_from_json(j));
    }
    return c;
}

inline void write_trajectories(const std::filesystem::path& path, std::span<const Trajectory> ts) {
    std::vector<json> recs;
    for (const auto& t : ts) recs.push_back(to_json(t));
    write_jsonl(path, kTrajectoriesFormat, recs);
}

inline std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
    std::vector<Trajectory> out;
    for (const auto& j : read_jsonl(path, kTrajectoriesFormat)) out.push_back(trajectory_from_json(j));
    return out;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    auto f = open_out(path, std::ios::trunc | std::ios::binary);
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace t1lab::io
