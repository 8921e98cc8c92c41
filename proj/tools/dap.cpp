// dap: desk-scale articulated-object manipulation pipeline in one binary.
//
// Subcommands wire the stages end to end: gen-data -> train-afg -> annotate ->
// train-policy -> eval, plus ablate (variant grid) and report (aggregation).
// Progress goes to standard error; only `report` prints parseable output on
// standard output. Exit codes: 0 success, 2 usage, 3 missing upstream stage,
// 4 empty input, 1 internal error.

#include <chrono>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dap/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"desk-scale articulated-object manipulation pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "INI configuration file");
    app.add_option("--set", overrides,
                   "override one config entry as section.key=value (repeatable)");

    auto* gen = app.add_subcommand("gen-data", "record and annotate expert demonstrations");
    gen->fallthrough();
    std::string gen_out, gen_tasks;
    std::size_t gen_episodes = 0, gen_jobs = 1;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    auto* gen_tasks_opt = gen->add_option("--tasks", gen_tasks, "comma-separated task list");
    auto* gen_eps_opt = gen->add_option("--episodes", gen_episodes, "episodes per task");
    auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "base episode seed");
    gen->add_option("--jobs", gen_jobs, "worker threads");

    auto* tafg = app.add_subcommand("train-afg", "train the generative prior network");
    tafg->fallthrough();
    std::string tafg_data, tafg_out, tafg_record, tafg_label;
    tafg->add_option("--data", tafg_data, "dataset directory")->required();
    tafg->add_option("--out", tafg_out, "output checkpoint path")->required();
    tafg->add_option("--out-record", tafg_record, "append a run record to this file");
    tafg->add_option("--label", tafg_label, "label for the run record");

    auto* ann = app.add_subcommand("annotate",
                                   "replace predicted prior channels across a dataset");
    ann->fallthrough();
    std::string ann_data, ann_afg;
    std::size_t ann_jobs = 1;
    ann->add_option("--data", ann_data, "dataset directory (rewritten in place)")->required();
    ann->add_option("--afg", ann_afg, "prior checkpoint path")->required();
    ann->add_option("--jobs", ann_jobs, "worker threads");

    auto* tpol = app.add_subcommand("train-policy",
                                    "train the actors and the decision maker");
    tpol->fallthrough();
    std::string tpol_data, tpol_out, tpol_record, tpol_label;
    bool tpol_gt = false;
    tpol->add_option("--data", tpol_data, "dataset directory")->required();
    tpol->add_option("--out", tpol_out, "output checkpoint path")->required();
    tpol->add_flag("--use-gt-priors", tpol_gt,
                   "condition on ground-truth prior channels instead of predictions");
    tpol->add_option("--out-record", tpol_record, "append a run record to this file");
    tpol->add_option("--label", tpol_label, "label for the run record");

    auto* ev = app.add_subcommand("eval", "run seeded closed-loop evaluation episodes");
    ev->fallthrough();
    std::string ev_policy, ev_afg, ev_record, ev_label;
    std::size_t ev_episodes = 0, ev_jobs = 1;
    std::uint64_t ev_seed = 0;
    ev->add_option("--policy", ev_policy, "policy checkpoint path")->required();
    ev->add_option("--afg", ev_afg, "prior checkpoint path")->required();
    auto* ev_eps_opt = ev->add_option("--episodes", ev_episodes, "episodes per task");
    auto* ev_seed_opt = ev->add_option("--seed", ev_seed, "base evaluation seed");
    ev->add_option("--out-record", ev_record, "append a run record to this file");
    ev->add_option("--label", ev_label, "label for the run record");
    ev->add_option("--jobs", ev_jobs, "worker threads");

    auto* abl = app.add_subcommand("ablate", "train and evaluate the six-variant grid");
    abl->fallthrough();
    std::string abl_data, abl_afg, abl_out;
    std::size_t abl_jobs = 1;
    abl->add_option("--data", abl_data, "annotated dataset directory")->required();
    abl->add_option("--afg", abl_afg, "prior checkpoint path")->required();
    abl->add_option("--out", abl_out, "output directory for checkpoints and records")
        ->required();
    abl->add_option("--jobs", abl_jobs, "worker threads");

    auto* rep = app.add_subcommand("report", "aggregate run records into summary tables");
    rep->fallthrough();
    std::vector<std::string> rep_records;
    std::string rep_out;
    rep->add_option("--records", rep_records, "run-record files (repeatable)")->required();
    rep->add_option("--out", rep_out, "output directory for summary and curves")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        dap::TrainConfig cfg = dap::load_config(config_path, overrides);

        auto emit_record = [&](const std::string& command, const std::string& label,
                               std::vector<dap::EvalRow> rows, dap::LossCurves curves,
                               const std::string& record_path) {
            if (record_path.empty()) return;
            dap::RunRecord rec;
            rec.command = command;
            rec.label = label.empty() ? command : label;
            rec.git = dap::git_describe();
            rec.wall_clock_sec =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count();
            rec.config = dap::config_snapshot(cfg);
            rec.seeds = dap::config_seeds(cfg);
            rec.rows = std::move(rows);
            rec.losses = std::move(curves);
            dap::append_record(record_path, rec);
            std::cerr << "wrote run record to " << record_path << "\n";
        };

        if (app.got_subcommand(gen)) {
            if (gen_tasks_opt->count()) cfg.tasks = gen_tasks;
            if (gen_eps_opt->count()) cfg.episodes = gen_episodes;
            if (gen_seed_opt->count()) cfg.seed = gen_seed;
            dap::run_gen_data(cfg, gen_out, gen_jobs, std::cerr);
        } else if (app.got_subcommand(tafg)) {
            auto curves = dap::run_train_afg(cfg, tafg_data, tafg_out, std::cerr);
            emit_record("train-afg", tafg_label, {}, std::move(curves), tafg_record);
        } else if (app.got_subcommand(ann)) {
            dap::run_annotate(cfg, ann_data, ann_afg, ann_jobs, std::cerr);
        } else if (app.got_subcommand(tpol)) {
            if (tpol_gt) cfg.use_gt_priors = true;
            auto curves = dap::run_train_policy(cfg, tpol_data, tpol_out, std::cerr);
            emit_record("train-policy", tpol_label, {}, std::move(curves), tpol_record);
        } else if (app.got_subcommand(ev)) {
            if (ev_eps_opt->count()) cfg.eval_episodes = ev_episodes;
            if (ev_seed_opt->count()) cfg.eval_seed = ev_seed;
            auto rows = dap::run_eval(cfg, ev_policy, ev_afg, ev_jobs, std::cerr);
            emit_record("eval", ev_label, std::move(rows), {}, ev_record);
        } else if (app.got_subcommand(abl)) {
            dap::run_ablate(cfg, abl_data, abl_afg, abl_out, abl_jobs, std::cerr);
        } else if (app.got_subcommand(rep)) {
            std::cout << dap::run_report(rep_records, rep_out, std::cerr);
        }
        return 0;
    } catch (const dap::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const dap::MissingStageError& e) {
        std::cerr << "missing stage: " << e.what() << "\n";
        return 3;
    } catch (const dap::EmptyInputError& e) {
        std::cerr << "empty input: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
