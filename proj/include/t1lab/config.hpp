#pragma once

// Run configuration: one INI file with per-stage sections. Every key is
// declared in a table below; anything else is rejected with its full name.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "t1lab/analysis.hpp"
#include "t1lab/env.hpp"
#include "t1lab/error.hpp"
#include "t1lab/policy.hpp"
#include "t1lab/trainer.hpp"

namespace t1lab {

struct DataConfig {
    TaskFamily family = TaskFamily::addition;
    int difficulty = 2;
    std::size_t sft_count = 2000;
    std::size_t rl_count = 5700;
    std::size_t eval_count = 400;
    int n_attempts = 2;
    double error_rate = 0.0;
    double loop_fraction = 0.0;  // share of SFT traces turned into non-terminating loops
};

struct SftConfig {
    int epochs = 9;
    int batch_size = 32;
    bool shuffle = false;
    AdamConfig adam{1e-2};
    double clip_norm = 1.0;
};

struct FilterConfig {
    int n_samples = 16;
    double delta = 0.3;
};

struct AnalysisConfig {
    TruncationSchedule schedule = TruncationSchedule::deciles();
    SummaryMode mode = SummaryMode::extractor;
    bool sampled = false;  // seeded sampling instead of greedy responses
    std::size_t eval_limit = 0;  // 0 = the whole eval set
};

struct RunConfig {
    std::string name;
    std::uint64_t seed = 0;
    std::string out_root = "runs";
    DataConfig data;
    Architecture arch{tok::kStandardSize, 16, 16, 64, 2};
    SftConfig sft;
    FilterConfig filter;
    TrainConfig train;
    bool use_filtered = false;  // train on the filtered RL split when present
    int checkpoint_every = 20;
    int dump_every = 0;  // trajectory dumps every N steps, 0 = never
    AnalysisConfig analysis;
    bool task_alphabet_only = true;  // penalty.alphabet = task

    RunConfig() {
        train.sampling.max_new_tokens = 64;
        train.adam.learning_rate = 1e-3;
    }

    /// Cross-field consistency. Derived fields are filled here.
    void finalize() {
        if (name.empty()) throw ConfigError("run.name must not be empty");
        for (char c : name)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'))
                throw ConfigError("run.name may contain only letters, digits, '-' and '_'");
        train.seed = seed;
        train.sampling.seed = seed;
        train.penalty.max_length = train.sampling.max_new_tokens;
        if (task_alphabet_only) train.penalty.alphabet = task_alphabet(data.family, arch.vocab);
        else train.penalty.alphabet.clear();
        arch.validate();
        train.validate();
        sft.adam.validate();
        if (data.n_attempts < 1) throw ConfigError("data.n_attempts must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
        if (dump_every < 0) throw ConfigError("train.dump_every must be >= 0");
        analysis.schedule.validate();
    }
};

namespace config_detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
        throw ConfigError(key + ": cannot parse '" + raw + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + raw + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
    std::vector<T> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

template <class T>
T positive(const std::string& key, T v) {
    if (!(v > T{0})) throw ConfigError(key + ": must be > 0");
    return v;
}

struct Entry {
    const char* section;
    const char* key;
    bool required;
    std::function<void(RunConfig&, const std::string& full, const std::string& value)> set;
};

inline const std::vector<Entry>& schema() {
    using C = RunConfig;
    using S = const std::string&;
    static const std::vector<Entry> table = {
        {"run", "name", true, [](C& c, S, S v) { c.name = trim(v); }},
        {"run", "seed", true, [](C& c, S k, S v) { c.seed = parse_number<std::uint64_t>(k, v); }},
        {"run", "out", false, [](C& c, S, S v) { c.out_root = trim(v); }},

        {"data", "family", false, [](C& c, S k, S v) {
             try {
                 c.data.family = parse_task_family(trim(v));
             } catch (const ConfigError& e) {
                 throw ConfigError(k + ": " + e.what());
             }
         }},
        {"data", "difficulty", false, [](C& c, S k, S v) { c.data.difficulty = positive(k, parse_number<int>(k, v)); }},
        {"data", "sft_count", false, [](C& c, S k, S v) { c.data.sft_count = parse_number<std::size_t>(k, v); }},
        {"data", "rl_count", false, [](C& c, S k, S v) { c.data.rl_count = parse_number<std::size_t>(k, v); }},
        {"data", "eval_count", false, [](C& c, S k, S v) { c.data.eval_count = parse_number<std::size_t>(k, v); }},
        {"data", "n_attempts", false, [](C& c, S k, S v) { c.data.n_attempts = positive(k, parse_number<int>(k, v)); }},
        {"data", "error_rate", false, [](C& c, S k, S v) {
             c.data.error_rate = parse_number<double>(k, v);
             if (!(c.data.error_rate >= 0.0 && c.data.error_rate <= 1.0)) throw ConfigError(k + ": must be in [0, 1]");
         }},
        {"data", "loop_fraction", false, [](C& c, S k, S v) {
             c.data.loop_fraction = parse_number<double>(k, v);
             if (!(c.data.loop_fraction >= 0.0 && c.data.loop_fraction <= 1.0))
                 throw ConfigError(k + ": must be in [0, 1]");
         }},

        {"policy", "window", false, [](C& c, S k, S v) { c.arch.window = positive(k, parse_number<int>(k, v)); }},
        {"policy", "embed", false, [](C& c, S k, S v) { c.arch.embed = positive(k, parse_number<int>(k, v)); }},
        {"policy", "hidden", false, [](C& c, S k, S v) { c.arch.hidden = positive(k, parse_number<int>(k, v)); }},

        {"sft", "epochs", false, [](C& c, S k, S v) { c.sft.epochs = parse_number<int>(k, v); }},
        {"sft", "batch_size", false, [](C& c, S k, S v) { c.sft.batch_size = positive(k, parse_number<int>(k, v)); }},
        {"sft", "shuffle", false, [](C& c, S k, S v) { c.sft.shuffle = parse_bool(k, v); }},
        {"sft", "learning_rate", false,
         [](C& c, S k, S v) { c.sft.adam.learning_rate = positive(k, parse_number<double>(k, v)); }},
        {"sft", "clip_norm", false, [](C& c, S k, S v) { c.sft.clip_norm = parse_number<double>(k, v); }},

        {"filter", "n_samples", false, [](C& c, S k, S v) { c.filter.n_samples = parse_number<int>(k, v); }},
        {"filter", "delta", false, [](C& c, S k, S v) { c.filter.delta = parse_number<double>(k, v); }},

        {"sampling", "temperature", false,
         [](C& c, S k, S v) { c.train.sampling.temperature = parse_number<double>(k, v); }},
        {"sampling", "top_p", false, [](C& c, S k, S v) { c.train.sampling.top_p = parse_number<double>(k, v); }},
        {"sampling", "min_p", false, [](C& c, S k, S v) { c.train.sampling.min_p = parse_number<double>(k, v); }},
        {"sampling", "max_new_tokens", false,
         [](C& c, S k, S v) { c.train.sampling.max_new_tokens = positive(k, parse_number<int>(k, v)); }},
        {"sampling", "k", false, [](C& c, S k, S v) { c.train.sampling.k = parse_number<int>(k, v); }},

        {"train", "prompts_per_step", false,
         [](C& c, S k, S v) { c.train.prompts_per_step = positive(k, parse_number<int>(k, v)); }},
        {"train", "steps", false, [](C& c, S k, S v) { c.train.steps = parse_number<int>(k, v); }},
        {"train", "learning_rate", false,
         [](C& c, S k, S v) { c.train.adam.learning_rate = positive(k, parse_number<double>(k, v)); }},
        {"train", "beta", false, [](C& c, S k, S v) { c.train.beta = parse_number<double>(k, v); }},
        {"train", "entropy_coef", false, [](C& c, S k, S v) { c.train.entropy_coef = parse_number<double>(k, v); }},
        {"train", "ema_decay", false, [](C& c, S k, S v) { c.train.ema_decay = parse_number<double>(k, v); }},
        {"train", "clip_norm", false, [](C& c, S k, S v) { c.train.clip_norm = parse_number<double>(k, v); }},
        {"train", "eval_every", false, [](C& c, S k, S v) { c.train.eval_every = parse_number<int>(k, v); }},
        {"train", "checkpoint_every", false, [](C& c, S k, S v) { c.checkpoint_every = parse_number<int>(k, v); }},
        {"train", "dump_every", false, [](C& c, S k, S v) { c.dump_every = parse_number<int>(k, v); }},
        {"train", "penalties", false, [](C& c, S k, S v) { c.train.penalties_enabled = parse_bool(k, v); }},
        {"train", "use_filtered", false, [](C& c, S k, S v) { c.use_filtered = parse_bool(k, v); }},

        {"penalty", "ngram_n", false, [](C& c, S k, S v) { c.train.penalty.ngram_n = parse_number<int>(k, v); }},
        {"penalty", "ngram_max_repeats", false,
         [](C& c, S k, S v) { c.train.penalty.ngram_max_repeats = parse_number<int>(k, v); }},
        {"penalty", "ppl_threshold", false,
         [](C& c, S k, S v) { c.train.penalty.ppl_threshold = parse_number<double>(k, v); }},
        {"penalty", "alphabet", false, [](C& c, S k, S v) {
             const std::string a = trim(v);
             if (a != "all" && a != "task") throw ConfigError(k + ": expected 'task' or 'all', got '" + v + "'");
             c.task_alphabet_only = a == "task";
         }},

        {"analysis", "fractions", false, [](C& c, S k, S v) {
             c.analysis.schedule = TruncationSchedule{};
             c.analysis.schedule.fractions = parse_list<double>(k, v);
             try {
                 c.analysis.schedule.validate();
             } catch (const ConfigError& e) {
                 throw ConfigError(k + ": " + e.what());
             }
         }},
        {"analysis", "budgets", false, [](C& c, S k, S v) {
             c.analysis.schedule = TruncationSchedule{};
             c.analysis.schedule.budgets = parse_list<std::size_t>(k, v);
             try {
                 c.analysis.schedule.validate();
             } catch (const ConfigError& e) {
                 throw ConfigError(k + ": " + e.what());
             }
         }},
        {"analysis", "mode", false, [](C& c, S k, S v) {
             try {
                 c.analysis.mode = parse_summary_mode(trim(v));
             } catch (const ConfigError& e) {
                 throw ConfigError(k + ": " + e.what());
             }
         }},
        {"analysis", "responses", false, [](C& c, S k, S v) {
             const std::string r = trim(v);
             if (r != "greedy" && r != "sampled") throw ConfigError(k + ": expected 'greedy' or 'sampled'");
             c.analysis.sampled = r == "sampled";
         }},
        {"analysis", "eval_limit", false,
         [](C& c, S k, S v) { c.analysis.eval_limit = parse_number<std::size_t>(k, v); }},
    };
    return table;
}

}  // namespace config_detail

/// Parses INI text. Errors name the offending "section.key".
inline RunConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    const auto& table = config_detail::schema();
    std::set<std::string> known_sections;
    for (const auto& e : table) known_sections.insert(e.section);

    RunConfig cfg;
    std::set<std::string> seen;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError("key '" + section + "' must be inside a section");
        if (!known_sections.count(section)) throw ConfigError("unknown section [" + section + "]");
        for (const auto& [key, node] : body) {
            const std::string full = section + "." + key;
            const auto it = std::find_if(table.begin(), table.end(),
                                         [&](const auto& e) { return e.section == section && e.key == key; });
            if (it == table.end()) throw ConfigError("unknown key " + full);
            it->set(cfg, full, node.data());
            seen.insert(full);
        }
    }
    for (const auto& e : table) {
        const std::string full = std::string(e.section) + "." + e.key;
        if (e.required && !seen.count(full)) throw ConfigError("missing required key " + full);
    }
    cfg.finalize();
    return cfg;
}

}  // namespace t1lab
