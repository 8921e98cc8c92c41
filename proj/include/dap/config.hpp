#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dap/toyenv.hpp"

// Run configuration: one flat struct covering every stage, read from an INI
// file with one section per module and overridable entry-by-entry. The
// serialized form is embedded in output artifacts so runs stay diffable.

namespace dap {

// Command-line / configuration mistakes; the CLI maps these to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    // [data]
    std::string tasks = "open_drawer";
    std::size_t episodes = 100;
    std::size_t n_points = 512;
    double sigma_obs = 0.002;
    bool include_failures = false;
    std::uint64_t seed = 1;

    // [priors]
    double alpha = 10.0;

    // [afg]
    std::vector<std::size_t> afg_encoder_hidden = {64, 64};
    std::size_t afg_enc_dim = 64;
    std::size_t afg_task_dim = 8;
    std::size_t afg_noise_dim = 8;
    bool afg_noise_embedding = true;
    std::size_t afg_time_dim = 16;
    std::vector<std::size_t> afg_head_hidden = {96, 96};
    std::size_t afg_euler_steps = 10;
    std::size_t afg_epochs = 4;
    std::size_t afg_batch = 16;
    double afg_lr = 1e-3;
    bool afg_lr_decay = true;
    double afg_weight_decay = 1e-4;
    std::uint64_t afg_seed = 1;

    // [policy]
    std::vector<std::size_t> policy_point_hidden = {64, 64};
    std::size_t policy_enc_dim = 64;
    std::size_t policy_task_dim = 8;
    std::size_t policy_time_dim = 16;
    std::vector<std::size_t> policy_trunk_hidden = {128, 128};
    std::size_t horizon = 8;
    std::size_t execute_steps = 4;
    std::size_t diffusion_steps = 50;
    std::size_t ddim_steps = 10;
    double gamma = 0.75;
    bool predict_epsilon = false;
    bool use_affordance = true;
    bool use_flow = true;
    bool dual_actor = true;
    bool use_gt_priors = false;
    std::size_t policy_epochs = 4;
    std::size_t policy_batch = 80;
    double policy_lr = 1e-3;
    bool policy_lr_decay = true;
    double policy_weight_decay = 1e-4;
    std::uint64_t policy_seed = 1;

    // [decision]
    std::vector<std::size_t> decision_point_hidden = {64, 64};
    std::size_t decision_enc_dim = 64;
    std::size_t decision_task_dim = 8;
    std::vector<std::size_t> decision_head_hidden = {64};
    std::size_t decision_epochs = 2;
    std::size_t decision_batch = 64;
    double decision_lr = 1e-3;
    bool decision_lr_decay = true;
    std::uint64_t decision_seed = 1;

    // [eval]
    std::size_t eval_episodes = 50;
    std::uint64_t eval_seed = 1;
    std::size_t eval_max_steps = 0;  // 0 = each task's own horizon
    std::size_t afg_sample_steps = 10;
};

namespace configdetail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw UsageError("trailing characters in number: " + s);
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("not a number: " + s);
    }
}

inline std::uint64_t parse_u64(const std::string& s) {
    try {
        std::size_t pos = 0;
        auto v = std::stoull(s, &pos);
        if (pos != s.size()) throw UsageError("trailing characters in integer: " + s);
        return v;
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("not an integer: " + s);
    }
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw UsageError("not a boolean (true/false): " + s);
}

inline std::string format_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw UsageError("empty entry in size list: " + s);
        out.push_back(std::size_t(parse_u64(item)));
    }
    if (out.empty()) throw UsageError("empty size list");
    return out;
}

}  // namespace configdetail

struct ConfigField {
    const char* section;
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
    using namespace configdetail;
    auto str = [](const char* sec, const char* key, std::string TrainConfig::* m) {
        return ConfigField{sec, key, [m](const TrainConfig& c) { return c.*m; },
                           [m](TrainConfig& c, const std::string& s) { c.*m = s; }};
    };
    auto num = [](const char* sec, const char* key, double TrainConfig::* m) {
        return ConfigField{sec, key,
                           [m](const TrainConfig& c) { return format_double(c.*m); },
                           [m](TrainConfig& c, const std::string& s) { c.*m = parse_double(s); }};
    };
    auto size = [](const char* sec, const char* key, std::size_t TrainConfig::* m) {
        return ConfigField{sec, key,
                           [m](const TrainConfig& c) { return std::to_string(c.*m); },
                           [m](TrainConfig& c, const std::string& s) {
                               c.*m = std::size_t(parse_u64(s));
                           }};
    };
    auto u64 = [](const char* sec, const char* key, std::uint64_t TrainConfig::* m) {
        return ConfigField{sec, key,
                           [m](const TrainConfig& c) { return std::to_string(c.*m); },
                           [m](TrainConfig& c, const std::string& s) { c.*m = parse_u64(s); }};
    };
    auto boolean = [](const char* sec, const char* key, bool TrainConfig::* m) {
        return ConfigField{sec, key,
                           [m](const TrainConfig& c) { return c.*m ? "true" : "false"; },
                           [m](TrainConfig& c, const std::string& s) { c.*m = parse_bool(s); }};
    };
    auto sizes = [](const char* sec, const char* key, std::vector<std::size_t> TrainConfig::* m) {
        return ConfigField{sec, key,
                           [m](const TrainConfig& c) { return format_sizes(c.*m); },
                           [m](TrainConfig& c, const std::string& s) { c.*m = parse_sizes(s); }};
    };

    static const std::vector<ConfigField> fields = {
        str("data", "tasks", &TrainConfig::tasks),
        size("data", "episodes", &TrainConfig::episodes),
        size("data", "n_points", &TrainConfig::n_points),
        num("data", "sigma_obs", &TrainConfig::sigma_obs),
        boolean("data", "include_failures", &TrainConfig::include_failures),
        u64("data", "seed", &TrainConfig::seed),

        num("priors", "alpha", &TrainConfig::alpha),

        sizes("afg", "encoder_hidden", &TrainConfig::afg_encoder_hidden),
        size("afg", "enc_dim", &TrainConfig::afg_enc_dim),
        size("afg", "task_dim", &TrainConfig::afg_task_dim),
        size("afg", "noise_dim", &TrainConfig::afg_noise_dim),
        boolean("afg", "noise_embedding", &TrainConfig::afg_noise_embedding),
        size("afg", "time_dim", &TrainConfig::afg_time_dim),
        sizes("afg", "head_hidden", &TrainConfig::afg_head_hidden),
        size("afg", "euler_steps", &TrainConfig::afg_euler_steps),
        size("afg", "epochs", &TrainConfig::afg_epochs),
        size("afg", "batch", &TrainConfig::afg_batch),
        num("afg", "lr", &TrainConfig::afg_lr),
        boolean("afg", "lr_decay", &TrainConfig::afg_lr_decay),
        num("afg", "weight_decay", &TrainConfig::afg_weight_decay),
        u64("afg", "seed", &TrainConfig::afg_seed),

        sizes("policy", "point_hidden", &TrainConfig::policy_point_hidden),
        size("policy", "enc_dim", &TrainConfig::policy_enc_dim),
        size("policy", "task_dim", &TrainConfig::policy_task_dim),
        size("policy", "time_dim", &TrainConfig::policy_time_dim),
        sizes("policy", "trunk_hidden", &TrainConfig::policy_trunk_hidden),
        size("policy", "horizon", &TrainConfig::horizon),
        size("policy", "execute_steps", &TrainConfig::execute_steps),
        size("policy", "diffusion_steps", &TrainConfig::diffusion_steps),
        size("policy", "ddim_steps", &TrainConfig::ddim_steps),
        num("policy", "gamma", &TrainConfig::gamma),
        boolean("policy", "predict_epsilon", &TrainConfig::predict_epsilon),
        boolean("policy", "use_affordance", &TrainConfig::use_affordance),
        boolean("policy", "use_flow", &TrainConfig::use_flow),
        boolean("policy", "dual_actor", &TrainConfig::dual_actor),
        boolean("policy", "use_gt_priors", &TrainConfig::use_gt_priors),
        size("policy", "epochs", &TrainConfig::policy_epochs),
        size("policy", "batch", &TrainConfig::policy_batch),
        num("policy", "lr", &TrainConfig::policy_lr),
        boolean("policy", "lr_decay", &TrainConfig::policy_lr_decay),
        num("policy", "weight_decay", &TrainConfig::policy_weight_decay),
        u64("policy", "seed", &TrainConfig::policy_seed),

        sizes("decision", "point_hidden", &TrainConfig::decision_point_hidden),
        size("decision", "enc_dim", &TrainConfig::decision_enc_dim),
        size("decision", "task_dim", &TrainConfig::decision_task_dim),
        sizes("decision", "head_hidden", &TrainConfig::decision_head_hidden),
        size("decision", "epochs", &TrainConfig::decision_epochs),
        size("decision", "batch", &TrainConfig::decision_batch),
        num("decision", "lr", &TrainConfig::decision_lr),
        boolean("decision", "lr_decay", &TrainConfig::decision_lr_decay),
        u64("decision", "seed", &TrainConfig::decision_seed),

        size("eval", "episodes", &TrainConfig::eval_episodes),
        u64("eval", "seed", &TrainConfig::eval_seed),
        size("eval", "max_steps", &TrainConfig::eval_max_steps),
        size("eval", "afg_sample_steps", &TrainConfig::afg_sample_steps),
    };
    return fields;
}

// Comma-separated task names -> ids, in listed order.
inline std::vector<TaskId> parse_task_list(const std::string& csv) {
    std::vector<TaskId> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        while (!item.empty() && item.front() == ' ') item.erase(item.begin());
        while (!item.empty() && item.back() == ' ') item.pop_back();
        if (item.empty()) continue;
        try {
            out.push_back(parse_task(item));
        } catch (const std::exception&) {
            throw UsageError("unknown task name: " + item);
        }
    }
    if (out.empty()) throw UsageError("task list is empty");
    return out;
}

inline void validate_config(const TrainConfig& cfg) {
    if (!(cfg.gamma > 0.5 && cfg.gamma < 1.0))
        throw UsageError("stage weight gamma must lie in (0.5, 1)");
    if (cfg.n_points == 0) throw UsageError("n_points must be positive");
    if (cfg.horizon == 0) throw UsageError("horizon must be positive");
    if (cfg.execute_steps == 0) throw UsageError("execute_steps must be positive");
    if (cfg.execute_steps > cfg.horizon)
        throw UsageError("execute_steps cannot exceed the horizon");
    if (cfg.diffusion_steps == 0) throw UsageError("diffusion_steps must be positive");
    if (cfg.ddim_steps == 0 || cfg.ddim_steps > cfg.diffusion_steps)
        throw UsageError("ddim_steps must lie in 1..diffusion_steps");
    if (cfg.afg_euler_steps == 0 || cfg.afg_sample_steps == 0)
        throw UsageError("integration step counts must be positive");
    if (cfg.afg_batch == 0 || cfg.policy_batch == 0 || cfg.decision_batch == 0)
        throw UsageError("batch sizes must be positive");
    parse_task_list(cfg.tasks);
}

namespace configdetail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline void apply_field(TrainConfig& cfg, const std::string& section, const std::string& key,
                        const std::string& value) {
    for (const auto& f : config_fields()) {
        if (section == f.section && key == f.key) {
            f.set(cfg, value);
            return;
        }
    }
    throw UsageError("unknown config key: " + section + "." + key);
}

}  // namespace configdetail

// Applies "section.key=value" on top of an existing configuration.
inline void apply_override(TrainConfig& cfg, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos) throw UsageError("override must look like section.key=value");
    std::string path = configdetail::trim(spec.substr(0, eq));
    std::string value = configdetail::trim(spec.substr(eq + 1));
    auto dot = path.find('.');
    if (dot == std::string::npos) throw UsageError("override key must look like section.key");
    configdetail::apply_field(cfg, path.substr(0, dot), path.substr(dot + 1), value);
}

// INI text -> config, starting from defaults. '#' and ';' start comments.
inline TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = configdetail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw UsageError("malformed section header on line " + std::to_string(lineno));
            section = configdetail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("expected key = value on line " + std::to_string(lineno));
        std::string key = configdetail::trim(line.substr(0, eq));
        std::string value = configdetail::trim(line.substr(eq + 1));
        if (section.empty())
            throw UsageError("key outside any section on line " + std::to_string(lineno));
        configdetail::apply_field(cfg, section, key, value);
    }
    return cfg;
}

// Canonical INI serialization, grouped by section in registry order.
inline std::string config_to_ini(const TrainConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& f : config_fields()) {
        if (section != f.section) {
            if (!out.empty()) out += "\n";
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    }
    return out;
}

// Flat "section.key" -> value view, embedded in manifests and run records.
inline std::map<std::string, std::string> config_snapshot(const TrainConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& f : config_fields())
        out[std::string(f.section) + "." + f.key] = f.get(cfg);
    return out;
}

// Loads defaults, then the optional file, then overrides; validates the result.
inline TrainConfig load_config(const std::string& path,
                               const std::vector<std::string>& overrides) {
    TrainConfig cfg;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot read config file: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        cfg = parse_config_text(ss.str());
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    validate_config(cfg);
    return cfg;
}

}  // namespace dap
