#pragma once

#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dap/afgnet.hpp"
#include "dap/config.hpp"
#include "dap/dataset.hpp"
#include "dap/policy.hpp"

// End-to-end pipeline stages behind the command-line surface: data
// generation, generative-prior training, re-annotation, policy training,
// evaluation, the ablation grid, and report aggregation. Every stage is
// deterministic in its inputs; `jobs` only parallelizes index-independent
// work and never changes results.

namespace dap {

// A required upstream artifact is missing; the CLI maps this to exit code 3.
struct MissingStageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An input set exists but is empty; the CLI maps this to exit code 4.
struct EmptyInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small utilities

namespace pipedetail {

// Deterministic result placement: worker j handles indices it pulls from a
// shared counter, writing only to its own index; the first exception wins and
// is rethrown on the caller thread.
inline void parallel_for(std::size_t n, std::size_t jobs,
                         const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    std::size_t count = std::min(jobs, n);
    workers.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
        workers.emplace_back([&] {
            std::size_t i;
            while (!failed.load(std::memory_order_relaxed) && (i = next++) < n) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    failed = true;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pipedetail

// Best-effort source revision for run records.
inline std::string git_describe() {
    std::string out;
    if (FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r")) {
        char buf[256];
        while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
        ::pclose(pipe);
    }
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

// ---------------------------------------------------------------------------
// Embedded configuration: checkpoints carry their effective config as a text
// tensor under "meta.config", making them self-describing at load time.

inline constexpr const char* kConfigTensorName = "meta.config";

inline nn::Tensor encode_text_tensor(const std::string& text) {
    nn::Tensor t(1, text.empty() ? 1 : text.size());
    if (text.empty()) {
        t.data[0] = 0.0f;
    } else {
        for (std::size_t i = 0; i < text.size(); ++i)
            t.data[i] = float((unsigned char)(text[i]));
    }
    return t;
}

inline std::string decode_text_tensor(const nn::Tensor& t) {
    std::string s;
    s.reserve(t.size());
    for (float v : t.data) {
        char c = char((unsigned char)(v));
        if (c != '\0') s += c;
    }
    return s;
}

inline TrainConfig config_from_checkpoint(const nn::NamedTensors& loaded,
                                          const std::string& path) {
    for (const auto& [name, tensor] : loaded)
        if (name == kConfigTensorName) return parse_config_text(decode_text_tensor(tensor));
    throw std::runtime_error("checkpoint lacks an embedded configuration: " + path);
}

// ---------------------------------------------------------------------------
// Module configs from the run configuration

inline AfgConfig afg_config_from(const TrainConfig& cfg, std::size_t n_points) {
    AfgConfig a;
    a.n_points = n_points;
    a.encoder_hidden = cfg.afg_encoder_hidden;
    a.enc_dim = cfg.afg_enc_dim;
    a.task_dim = cfg.afg_task_dim;
    a.noise_dim = cfg.afg_noise_dim;
    a.use_noise_embedding = cfg.afg_noise_embedding;
    a.time_dim = cfg.afg_time_dim;
    a.head_hidden = cfg.afg_head_hidden;
    a.euler_steps = cfg.afg_euler_steps;
    return a;
}

inline ActorConfig actor_config_from(const TrainConfig& cfg, std::size_t n_points,
                                     bool fill_affordance, bool fill_flow) {
    ActorConfig a;
    a.n_points = n_points;
    a.point_hidden = cfg.policy_point_hidden;
    a.enc_dim = cfg.policy_enc_dim;
    a.task_dim = cfg.policy_task_dim;
    a.time_dim = cfg.policy_time_dim;
    a.trunk_hidden = cfg.policy_trunk_hidden;
    a.horizon = cfg.horizon;
    a.fill_affordance = fill_affordance;
    a.fill_flow = fill_flow;
    a.predict_epsilon = cfg.predict_epsilon;
    return a;
}

inline DecisionConfig decision_config_from(const TrainConfig& cfg, std::size_t n_points) {
    DecisionConfig d;
    d.n_points = n_points;
    d.point_hidden = cfg.decision_point_hidden;
    d.enc_dim = cfg.decision_enc_dim;
    d.task_dim = cfg.decision_task_dim;
    d.head_hidden = cfg.decision_head_hidden;
    return d;
}

// ---------------------------------------------------------------------------
// Loss curves and run records

// Curve name -> (step, value) samples, in step order.
using LossCurves = std::map<std::string, std::vector<std::pair<std::size_t, double>>>;

struct EvalRow {
    TaskId task = TaskId::OpenDrawer;
    std::uint64_t seed = 0;
    bool success = false;
    std::size_t steps = 0;
    std::size_t stage_switches = 0;
};

struct RunRecord {
    std::string command;
    std::string label = "run";
    std::string git;
    double wall_clock_sec = 0.0;
    std::map<std::string, std::string> config;
    std::map<std::string, std::uint64_t> seeds;
    std::vector<EvalRow> rows;
    LossCurves losses;
};

inline std::map<std::string, std::uint64_t> config_seeds(const TrainConfig& cfg) {
    return {{"data", cfg.seed},
            {"afg", cfg.afg_seed},
            {"policy", cfg.policy_seed},
            {"decision", cfg.decision_seed},
            {"eval", cfg.eval_seed}};
}

inline nlohmann::json record_to_json(const RunRecord& rec) {
    nlohmann::json j;
    j["command"] = rec.command;
    j["label"] = rec.label;
    j["git"] = rec.git;
    j["wall_clock_sec"] = rec.wall_clock_sec;
    j["config"] = rec.config;
    j["seeds"] = rec.seeds;
    j["rows"] = nlohmann::json::array();
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> per_task;
    for (const auto& r : rec.rows) {
        j["rows"].push_back({{"task", task_name(r.task)},
                             {"seed", r.seed},
                             {"success", r.success},
                             {"steps", r.steps},
                             {"stage_switches", r.stage_switches}});
        auto& [eps, wins] = per_task[task_name(r.task)];
        ++eps;
        if (r.success) ++wins;
    }
    j["per_task"] = nlohmann::json::object();
    for (const auto& [task, counts] : per_task)
        j["per_task"][task] = {{"episodes", counts.first}, {"successes", counts.second}};
    j["losses"] = nlohmann::json::object();
    for (const auto& [name, points] : rec.losses) {
        auto arr = nlohmann::json::array();
        for (const auto& [step, value] : points) arr.push_back({step, value});
        j["losses"][name] = std::move(arr);
    }
    return j;
}

// One structured-text record per line, appended.
inline void append_record(const std::string& path, const RunRecord& rec) {
    namespace fs = std::filesystem;
    auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot write run record: " + path);
    out << record_to_json(rec).dump() << "\n";
}

// ---------------------------------------------------------------------------
// gen-data

// Records `cfg.episodes` expert episodes per task with seeds cfg.seed + i,
// annotates ground-truth priors, and saves everything under `out_dir`.
inline Manifest run_gen_data(const TrainConfig& cfg, const std::string& out_dir,
                             std::size_t jobs, std::ostream& log) {
    if (cfg.episodes == 0) throw UsageError("episode count must be positive");
    auto tasks = parse_task_list(cfg.tasks);

    std::vector<Demonstration> demos(tasks.size() * cfg.episodes);
    pipedetail::parallel_for(demos.size(), jobs, [&](std::size_t idx) {
        const TaskSpec spec = make_task(tasks[idx / cfg.episodes]);
        std::uint64_t seed = cfg.seed + idx % cfg.episodes;
        Demonstration demo = record_episode(spec, seed, cfg.n_points, cfg.sigma_obs);
        annotate_ground_truth(demo, cfg.alpha);
        demos[idx] = std::move(demo);
    });

    for (std::size_t t = 0; t < tasks.size(); ++t) {
        std::size_t wins = 0;
        for (std::size_t i = 0; i < cfg.episodes; ++i)
            if (demos[t * cfg.episodes + i].success) ++wins;
        log << "gen-data: " << task_name(tasks[t]) << " expert success " << wins << "/"
            << cfg.episodes << "\n";
    }
    return save_dataset(out_dir, demos, config_snapshot(cfg));
}

// ---------------------------------------------------------------------------
// train-afg

namespace pipedetail {

inline LoadedDataset load_nonempty_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw MissingStageError("no dataset under " + dir + "; run gen-data first");
    LoadedDataset ds = load_dataset(dir);
    if (ds.demos.empty()) throw EmptyInputError("dataset has no episodes: " + dir);
    return ds;
}

inline std::size_t dataset_point_count(const LoadedDataset& ds) {
    for (const auto& demo : ds.demos)
        if (!demo.frames.empty()) return demo.frames[0].obs.size();
    throw EmptyInputError("dataset has no frames");
}

inline void check_point_count(const LoadedDataset& ds, const TrainConfig& cfg) {
    std::size_t n = dataset_point_count(ds);
    if (n != cfg.n_points)
        throw UsageError("dataset observations have " + std::to_string(n) +
                         " points; pass data.n_points=" + std::to_string(n));
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, CounterRng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.next_u64() % i]);
}

// Half-cosine decay from `base` to ~0 across `total` steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
    if (total == 0) return base;
    double frac = std::min(1.0, double(step) / double(total));
    return base * 0.5 * (1.0 + std::cos(3.141592653589793 * frac));
}

}  // namespace pipedetail

// Trains the generative prior on every frame of the usable episodes and
// writes a self-describing checkpoint to `out_ckpt`.
inline LossCurves run_train_afg(const TrainConfig& cfg, const std::string& data_dir,
                                const std::string& out_ckpt, std::ostream& log) {
    auto ds = pipedetail::load_nonempty_dataset(data_dir);
    pipedetail::check_point_count(ds, cfg);

    std::vector<AfgExample> pool;
    for (const auto& demo : ds.demos) {
        if (!demo.success && !cfg.include_failures) continue;
        for (const auto& frame : demo.frames) pool.push_back({&frame.obs, demo.task});
    }
    if (pool.empty()) throw EmptyInputError("no training frames (all episodes excluded)");

    AfgParams params = AfgParams::init(afg_config_from(cfg, cfg.n_points), cfg.afg_seed);
    nn::AdamWState opt;
    opt.lr = cfg.afg_lr;
    opt.weight_decay = cfg.afg_weight_decay;

    const std::size_t steps_per_epoch = (pool.size() + cfg.afg_batch - 1) / cfg.afg_batch;
    const std::size_t total_steps = steps_per_epoch * cfg.afg_epochs;

    LossCurves curves;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.afg_epochs; ++epoch) {
        CounterRng shuffle_rng(cfg.afg_seed, CounterRng::derive(0xE9, epoch));
        pipedetail::seeded_shuffle(pool, shuffle_rng);
        double epoch_sum = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start = 0; start < pool.size(); start += cfg.afg_batch) {
            std::size_t stop = std::min(start + cfg.afg_batch, pool.size());
            std::vector<AfgExample> batch(pool.begin() + long(start),
                                          pool.begin() + long(stop));
            if (cfg.afg_lr_decay)
                opt.lr = pipedetail::cosine_lr(cfg.afg_lr, global_step, total_steps);
            auto losses = afg_train_step(params, batch, opt,
                                         CounterRng::derive(cfg.afg_seed, 0xA16, global_step));
            curves["afg_total"].push_back({global_step, losses.total()});
            curves["afg_affordance"].push_back({global_step, losses.affordance});
            curves["afg_flow"].push_back({global_step, losses.flow});
            epoch_sum += losses.total();
            ++epoch_steps;
            ++global_step;
        }
        log << "train-afg: epoch " << epoch + 1 << "/" << cfg.afg_epochs << " mean loss "
            << epoch_sum / double(epoch_steps) << "\n";
    }

    nn::Tensor cfg_tensor = encode_text_tensor(config_to_ini(cfg));
    auto entries = afg_checkpoint_entries(params);
    entries.push_back({kConfigTensorName, &cfg_tensor});
    namespace fs = std::filesystem;
    auto parent = fs::path(out_ckpt).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    nn::save_checkpoint(out_ckpt, entries);
    log << "train-afg: wrote " << out_ckpt << "\n";
    return curves;
}

// ---------------------------------------------------------------------------
// annotate

// Rebuilds the generative prior recorded in a checkpoint. `n_points` patches
// the validation-only field so the model accepts the current observations.
inline AfgParams afg_from_checkpoint(const std::string& ckpt_path, std::size_t n_points) {
    namespace fs = std::filesystem;
    if (!fs::exists(ckpt_path))
        throw MissingStageError("missing prior checkpoint " + ckpt_path +
                                "; run train-afg first");
    auto loaded = nn::load_checkpoint(ckpt_path);
    TrainConfig ckpt_cfg = config_from_checkpoint(loaded, ckpt_path);
    AfgParams params =
        AfgParams::init(afg_config_from(ckpt_cfg, n_points), ckpt_cfg.afg_seed);
    afg_restore(params, loaded);
    return params;
}

// Replaces the predicted prior channels of every episode in place and rewrites
// the dataset; idempotent for a fixed checkpoint.
inline void run_annotate(const TrainConfig& cfg, const std::string& data_dir,
                         const std::string& afg_ckpt, std::size_t jobs, std::ostream& log) {
    (void)cfg;
    auto ds = pipedetail::load_nonempty_dataset(data_dir);
    AfgParams params = afg_from_checkpoint(afg_ckpt, pipedetail::dataset_point_count(ds));

    pipedetail::parallel_for(ds.demos.size(), jobs, [&](std::size_t i) {
        annotate_with_afg(ds.demos[i], params, CounterRng::derive(ds.demos[i].seed, 0xA11));
    });
    save_dataset(data_dir, ds.demos, ds.manifest.config);
    log << "annotate: rewrote " << ds.demos.size() << " episodes under " << data_dir
        << "\n";
}

// ---------------------------------------------------------------------------
// train-policy

namespace pipedetail {

inline std::vector<double> normalized_chunk(const Demonstration& demo, std::size_t frame,
                                            std::size_t horizon) {
    auto chunk = action_chunk(demo, frame, horizon);
    std::vector<double> flat;
    flat.reserve(4 * chunk.size());
    for (const auto& a : chunk) {
        auto z = normalize_action(a);
        flat.insert(flat.end(), z.begin(), z.end());
    }
    return flat;
}

inline std::vector<ActorExample> actor_batch(const std::vector<Demonstration>& demos,
                                             const Batch& batch, std::size_t horizon,
                                             bool use_gt_priors) {
    std::vector<ActorExample> out;
    out.reserve(batch.windows.size());
    for (const auto& w : batch.windows) {
        const Demonstration& demo = demos[w.demo];
        ActorExample ex;
        ex.bundle = frame_bundle(demo.frames[w.frame], demo.task, use_gt_priors);
        ex.chunk = normalized_chunk(demo, w.frame, horizon);
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace pipedetail

// Trains the actor(s) plus the decision maker on an annotated dataset and
// writes one self-describing checkpoint. With `dual_actor` the first actor
// fills the affordance slot and the second the flow slot (each gated by its
// use_* flag); a single actor fills whatever the flags enable.
inline LossCurves run_train_policy(const TrainConfig& cfg, const std::string& data_dir,
                                   const std::string& out_ckpt, std::ostream& log) {
    auto ds = pipedetail::load_nonempty_dataset(data_dir);
    pipedetail::check_point_count(ds, cfg);

    const bool needs_pred = !cfg.use_gt_priors && (cfg.use_affordance || cfg.use_flow);
    if (needs_pred) {
        const Frame* probe = nullptr;
        for (const auto& demo : ds.demos)
            if (!demo.frames.empty()) {
                probe = &demo.frames[0];
                break;
            }
        if (!probe || !probe->obs.has_channel(kPredAffordance) ||
            !probe->obs.has_channel(kPredFlow))
            throw MissingStageError(
                "dataset lacks predicted prior channels; run annotate first or pass "
                "policy.use_gt_priors=true");
    }

    const DiffusionSchedule sched = make_schedule(cfg.diffusion_steps);
    ActorConfig cfg1 = cfg.dual_actor
                           ? actor_config_from(cfg, cfg.n_points, cfg.use_affordance, false)
                           : actor_config_from(cfg, cfg.n_points, cfg.use_affordance,
                                               cfg.use_flow);
    ActorParams actor1 = ActorParams::init(cfg1, StageLabel::Approach, cfg.policy_seed);
    ActorParams actor2;
    nn::AdamWState opt1, opt2;
    opt1.lr = opt2.lr = cfg.policy_lr;
    opt1.weight_decay = opt2.weight_decay = cfg.policy_weight_decay;
    if (cfg.dual_actor) {
        ActorConfig cfg2 = actor_config_from(cfg, cfg.n_points, false, cfg.use_flow);
        actor2 = ActorParams::init(cfg2, StageLabel::Manipulate,
                                   CounterRng::derive(cfg.policy_seed, 0xA2));
    }

    LossCurves curves;
    std::size_t global_step = 0;
    BatchingOptions bopt;
    bopt.batch_size = cfg.policy_batch;
    bopt.horizon = cfg.horizon;
    bopt.include_failures = cfg.include_failures;
    std::vector<BatchPlan> plans;
    std::size_t total_steps = 0;
    for (std::size_t epoch = 0; epoch < cfg.policy_epochs; ++epoch) {
        plans.push_back(
            make_batches(ds.demos, bopt, CounterRng::derive(cfg.policy_seed, 0xBB, epoch)));
        if (plans.back().batches.empty())
            throw EmptyInputError("no training windows (all episodes excluded or too short)");
        total_steps += plans.back().batches.size();
    }
    for (std::size_t epoch = 0; epoch < cfg.policy_epochs; ++epoch) {
        const auto& plan = plans[epoch];
        double epoch_sum = 0.0;
        for (const auto& batch : plan.batches) {
            auto examples =
                pipedetail::actor_batch(ds.demos, batch, cfg.horizon, cfg.use_gt_priors);
            std::uint64_t step_seed = CounterRng::derive(cfg.policy_seed, 0xAC5, global_step);
            if (cfg.policy_lr_decay)
                opt1.lr = opt2.lr =
                    pipedetail::cosine_lr(cfg.policy_lr, global_step, total_steps);
            double loss;
            if (cfg.dual_actor) {
                auto rep = dual_train_step(actor1, actor2, examples, batch.stage, cfg.gamma,
                                           sched, opt1, opt2, step_seed);
                loss = rep.total;
            } else {
                loss = single_train_step(actor1, examples, sched, opt1, step_seed);
            }
            curves["policy_total"].push_back({global_step, loss});
            epoch_sum += loss;
            ++global_step;
        }
        log << "train-policy: epoch " << epoch + 1 << "/" << cfg.policy_epochs
            << " mean loss " << epoch_sum / double(plan.batches.size()) << "\n";
    }

    // The decision maker trains on every frame's heuristic stage label; its
    // data and seeds are independent of the actor variant, so ablation runs
    // share identical deciders.
    DecisionParams decision =
        DecisionParams::init(decision_config_from(cfg, cfg.n_points), cfg.decision_seed);
    nn::AdamWState dopt;
    dopt.lr = cfg.decision_lr;
    std::vector<DecisionExample> dpool;
    for (const auto& demo : ds.demos) {
        if (!demo.success && !cfg.include_failures) continue;
        for (const auto& frame : demo.frames)
            dpool.push_back({&frame.obs, frame.state, demo.task, frame.stage});
    }
    std::size_t dstep = 0;
    const std::size_t dsteps_total = dpool.empty() ? 0
                                                   : ((dpool.size() + cfg.decision_batch - 1) /
                                                      cfg.decision_batch) *
                                                         cfg.decision_epochs;
    for (std::size_t epoch = 0; epoch < cfg.decision_epochs; ++epoch) {
        CounterRng shuffle_rng(cfg.decision_seed, CounterRng::derive(0xDE, epoch));
        pipedetail::seeded_shuffle(dpool, shuffle_rng);
        double epoch_sum = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start = 0; start < dpool.size(); start += cfg.decision_batch) {
            std::size_t stop = std::min(start + cfg.decision_batch, dpool.size());
            std::vector<DecisionExample> batch(dpool.begin() + long(start),
                                               dpool.begin() + long(stop));
            if (cfg.decision_lr_decay)
                dopt.lr = pipedetail::cosine_lr(cfg.decision_lr, dstep, dsteps_total);
            double loss = decision_train_step(decision, batch, dopt);
            curves["decision"].push_back({dstep, loss});
            epoch_sum += loss;
            ++epoch_steps;
            ++dstep;
        }
        log << "train-policy: decision epoch " << epoch + 1 << "/" << cfg.decision_epochs
            << " mean loss " << epoch_sum / double(epoch_steps) << "\n";
    }

    nn::Tensor cfg_tensor = encode_text_tensor(config_to_ini(cfg));
    auto entries = actor_checkpoint_entries(actor1, "actor1.");
    if (cfg.dual_actor) {
        auto e2 = actor_checkpoint_entries(actor2, "actor2.");
        entries.insert(entries.end(), e2.begin(), e2.end());
    }
    auto de = decision_checkpoint_entries(decision);
    entries.insert(entries.end(), de.begin(), de.end());
    entries.push_back({kConfigTensorName, &cfg_tensor});
    namespace fs = std::filesystem;
    auto parent = fs::path(out_ckpt).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    nn::save_checkpoint(out_ckpt, entries);
    log << "train-policy: wrote " << out_ckpt << "\n";
    return curves;
}

// ---------------------------------------------------------------------------
// eval

struct PolicyModel {
    TrainConfig config;  // the configuration the policy was trained with
    ActorParams actor1, actor2;
    DecisionParams decision;
    DiffusionSchedule schedule;
    bool dual = true;
};

inline PolicyModel policy_from_checkpoint(const std::string& ckpt_path,
                                          std::size_t n_points) {
    namespace fs = std::filesystem;
    if (!fs::exists(ckpt_path))
        throw MissingStageError("missing policy checkpoint " + ckpt_path +
                                "; run train-policy first");
    auto loaded = nn::load_checkpoint(ckpt_path);
    PolicyModel m;
    m.config = config_from_checkpoint(loaded, ckpt_path);
    m.dual = m.config.dual_actor;

    ActorConfig cfg1 =
        m.dual ? actor_config_from(m.config, n_points, m.config.use_affordance, false)
               : actor_config_from(m.config, n_points, m.config.use_affordance,
                                   m.config.use_flow);
    m.actor1 = ActorParams::init(cfg1, StageLabel::Approach, m.config.policy_seed);
    actor_restore(m.actor1, loaded, "actor1.");
    if (m.dual) {
        ActorConfig cfg2 = actor_config_from(m.config, n_points, false, m.config.use_flow);
        m.actor2 = ActorParams::init(cfg2, StageLabel::Manipulate,
                                     CounterRng::derive(m.config.policy_seed, 0xA2));
        actor_restore(m.actor2, loaded, "actor2.");
    }
    m.decision = DecisionParams::init(decision_config_from(m.config, n_points),
                                      m.config.decision_seed);
    decision_restore(m.decision, loaded);
    m.schedule = make_schedule(m.config.diffusion_steps);
    return m;
}

// Runs `cfg.eval_episodes` seeded episodes per task through the checkpointed
// policy; rows come back in (task, seed) order regardless of `jobs`.
inline std::vector<EvalRow> run_eval(const TrainConfig& cfg, const std::string& policy_ckpt,
                                     const std::string& afg_ckpt, std::size_t jobs,
                                     std::ostream& log) {
    if (cfg.eval_episodes == 0) throw UsageError("episode count must be positive");
    PolicyModel model = policy_from_checkpoint(policy_ckpt, cfg.n_points);
    AfgParams afg = afg_from_checkpoint(afg_ckpt, cfg.n_points);
    auto tasks = parse_task_list(cfg.tasks);

    RolloutConfig rc;
    rc.n_points = cfg.n_points;
    rc.sigma_obs = cfg.sigma_obs;
    rc.execute_steps = model.config.execute_steps;
    rc.ddim_steps = model.config.ddim_steps;
    rc.afg_steps = cfg.afg_sample_steps;
    rc.dual = model.dual;

    std::vector<EvalRow> rows(tasks.size() * cfg.eval_episodes);
    pipedetail::parallel_for(rows.size(), jobs, [&](std::size_t idx) {
        TaskId task = tasks[idx / cfg.eval_episodes];
        std::uint64_t seed = cfg.eval_seed + idx % cfg.eval_episodes;
        RolloutConfig rci = rc;
        rci.max_steps = cfg.eval_max_steps ? cfg.eval_max_steps
                                           : std::size_t(make_task(task).horizon);
        auto res = rollout(model.actor1, model.dual ? model.actor2 : model.actor1,
                           model.decision, afg, model.schedule, task, seed, rci);
        rows[idx] = {task, seed, res.success, res.steps, res.stage_switches()};
    });

    for (std::size_t t = 0; t < tasks.size(); ++t) {
        std::size_t wins = 0;
        for (std::size_t i = 0; i < cfg.eval_episodes; ++i)
            if (rows[t * cfg.eval_episodes + i].success) ++wins;
        log << "eval: " << task_name(tasks[t]) << " success " << wins << "/"
            << cfg.eval_episodes << "\n";
    }
    return rows;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationVariant {
    const char* label;
    bool dual_actor;
    bool use_affordance;
    bool use_flow;
};

// The six-variant grid: one knob set at a time, then the full model.
inline const std::vector<AblationVariant>& ablation_grid() {
    static const std::vector<AblationVariant> grid = {
        {"baseline", false, false, false},    {"affordance_only", false, true, false},
        {"flow_only", false, false, true},    {"dual_actor_only", true, false, false},
        {"both_priors_single", false, true, true}, {"full", true, true, true},
    };
    return grid;
}

inline TrainConfig variant_config(const TrainConfig& base, const AblationVariant& v) {
    TrainConfig cfg = base;
    cfg.dual_actor = v.dual_actor;
    cfg.use_affordance = v.use_affordance;
    cfg.use_flow = v.use_flow;
    return cfg;
}

// Trains and evaluates every variant on one dataset, appending one run record
// per variant to `records_path`; checkpoints land next to the records.
inline void run_ablate(const TrainConfig& cfg, const std::string& data_dir,
                       const std::string& afg_ckpt, const std::string& out_dir,
                       std::size_t jobs, std::ostream& log) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string records_path = (fs::path(out_dir) / "records.jsonl").string();
    const std::string git = git_describe();

    for (const auto& v : ablation_grid()) {
        TrainConfig vcfg = variant_config(cfg, v);
        log << "ablate: variant " << v.label << "\n";
        auto t0 = std::chrono::steady_clock::now();
        std::string ckpt = (fs::path(out_dir) / ("policy_" + std::string(v.label) + ".dapc"))
                               .string();
        LossCurves curves = run_train_policy(vcfg, data_dir, ckpt, log);
        std::vector<EvalRow> rows = run_eval(vcfg, ckpt, afg_ckpt, jobs, log);
        auto t1 = std::chrono::steady_clock::now();

        RunRecord rec;
        rec.command = "ablate";
        rec.label = v.label;
        rec.git = git;
        rec.wall_clock_sec = std::chrono::duration<double>(t1 - t0).count();
        rec.config = config_snapshot(vcfg);
        rec.seeds = config_seeds(vcfg);
        rec.rows = std::move(rows);
        rec.losses = std::move(curves);
        append_record(records_path, rec);
    }
    log << "ablate: wrote " << records_path << "\n";
}

// ---------------------------------------------------------------------------
// report

namespace pipedetail {

struct TaskCounts {
    std::uint64_t episodes = 0;
    std::uint64_t successes = 0;
};

inline std::string sanitize_label(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum((unsigned char)c) || c == '_' || c == '-') ? c : '_';
    return out.empty() ? "run" : out;
}

}  // namespace pipedetail

// Aggregates run records into summary.tsv (counts summed per label/task
// before dividing) plus one loss-curve TSV per recorded curve; returns the
// summary text, which is the only parseable standard-output surface.
inline std::string run_report(const std::vector<std::string>& record_paths,
                              const std::string& out_dir, std::ostream& log) {
    std::vector<RunRecord> records;
    for (const auto& path : record_paths) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot read record file: " + path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const std::exception& ex) {
                throw std::runtime_error("bad record in " + path + " line " +
                                         std::to_string(lineno) + ": " + ex.what());
            }
            RunRecord rec;
            rec.command = j.value("command", "");
            rec.label = j.value("label", "run");
            for (const auto& jr : j.value("rows", nlohmann::json::array())) {
                EvalRow r;
                r.task = parse_task(jr.at("task").get<std::string>());
                r.seed = jr.at("seed").get<std::uint64_t>();
                r.success = jr.at("success").get<bool>();
                r.steps = jr.at("steps").get<std::size_t>();
                r.stage_switches = jr.at("stage_switches").get<std::size_t>();
                rec.rows.push_back(r);
            }
            if (j.contains("losses"))
                for (const auto& [name, arr] : j["losses"].items()) {
                    auto& curve = rec.losses[name];
                    for (const auto& p : arr)
                        curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
                }
            records.push_back(std::move(rec));
        }
    }
    if (records.empty()) throw EmptyInputError("no run records found");

    std::map<std::pair<std::string, std::string>, pipedetail::TaskCounts> table;
    for (const auto& rec : records)
        for (const auto& r : rec.rows) {
            auto& c = table[{rec.label, task_name(r.task)}];
            ++c.episodes;
            if (r.success) ++c.successes;
        }

    std::string tsv = "label\ttask\tepisodes\tsuccesses\tsuccess_rate\n";
    for (const auto& [key, c] : table) {
        char rate[32];
        std::snprintf(rate, sizeof(rate), "%.3f",
                      c.episodes ? double(c.successes) / double(c.episodes) : 0.0);
        tsv += key.first + "\t" + key.second + "\t" + std::to_string(c.episodes) + "\t" +
               std::to_string(c.successes) + "\t" + rate + "\n";
    }

    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream out(fs::path(out_dir) / "summary.tsv");
        out << tsv;
        if (!out) throw std::runtime_error("cannot write summary.tsv under " + out_dir);
    }
    std::size_t curve_files = 0;
    for (const auto& rec : records)
        for (const auto& [name, points] : rec.losses) {
            std::string fname = "loss_" + pipedetail::sanitize_label(rec.label) + "_" +
                                pipedetail::sanitize_label(name) + ".tsv";
            std::ofstream out(fs::path(out_dir) / fname);
            out << "step\tvalue\n";
            for (const auto& [step, value] : points)
                out << step << "\t" << configdetail::format_double(value) << "\n";
            ++curve_files;
        }
    log << "report: " << table.size() << " summary rows, " << curve_files
        << " loss curves -> " << out_dir << "\n";
    return tsv;
}

}  // namespace dap
