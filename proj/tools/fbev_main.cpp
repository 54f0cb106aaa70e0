// Copyright (c) 2026 fbev contributors.
// SPDX-License-Identifier: Apache-2.0
//
// Command line for the surround-view fisheye BEV pipeline: dataset
// synthesis, training, evaluation, gradient checking and geometry debug
// exports. Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.

#include <CLI11.hpp>
#include <iomanip>
#include <iostream>

#include "fbev/pipeline.hpp"

namespace {

using namespace fbev;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

struct CommonOpts {
    std::string config_file;
    std::string profile = "desk";
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts)
{
    cmd->add_option("--config", opts.config_file, "configuration file (section.key = value)");
    cmd->add_option("--profile", opts.profile, "base profile: desk or full")
        ->check(CLI::IsMember({"desk", "full"}));
    cmd->add_option("--seed", opts.seed, "override run.seed")->each([&](const std::string&) {
        opts.seed_set = true;
    });
    cmd->add_option("--set", opts.overrides, "override single keys, e.g. --set encoder.kappa=12");
}

RunConfig resolve_config(const CommonOpts& opts)
{
    RunConfig cfg = profile_by_name(opts.profile);
    if (!opts.config_file.empty())
        cfg = parse_config_file(opts.config_file, cfg);
    for (const std::string& kv : opts.overrides)
    {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opts.seed_set)
        cfg.seed = opts.seed;
    cfg.validate();
    return cfg;
}

int cmd_synth(const CommonOpts& opts, const std::string& out)
{
    const RunConfig cfg = resolve_config(opts);
    const CameraRig rig =
        cfg.rig_file.empty() ? default_rig(cfg.img_w, cfg.img_h) : load_rig(cfg.rig_file);
    BEVGrid grid{cfg.grid_h, cfg.grid_w, cfg.grid_cell_m, cfg.grid_z_anchors};
    SynthParams params;
    params.frames = cfg.synth_frames;
    params.map_cells = cfg.scene_cells;
    params.res_m = cfg.scene_res_m;

    std::array<std::uint64_t, kNumClasses> histogram{};
    write_dataset(out, rig, grid, params, cfg.synth_scenes, cfg.seed, &histogram);
    std::cout << "wrote " << cfg.synth_scenes << " scenes x " << params.frames << " frames to "
              << out << "\n";
    static const char* names[kNumClasses] = {"void",       "road",    "sidewalk",
                                             "vegetation", "vehicle", "ego"};
    std::uint64_t total = 0;
    for (std::uint64_t h : histogram)
        total += h;
    std::cout << "BEV ground-truth class histogram:\n";
    for (std::size_t c = 0; c < kNumClasses; ++c)
        std::cout << "  " << std::left << std::setw(12) << names[c] << histogram[c] << " ("
                  << std::fixed << std::setprecision(2)
                  << (total ? 100.0 * static_cast<double>(histogram[c]) / static_cast<double>(total)
                            : 0.0)
                  << "%)\n";
    return kExitOk;
}

int cmd_train(const CommonOpts& opts, const std::string& dataset, const std::string& out)
{
    const RunConfig cfg = resolve_config(opts);
    const TrainResult result = train_model(cfg, dataset, out, &std::cout);
    std::cout << "finished " << result.rows.size() << " steps in " << std::fixed
              << std::setprecision(1) << result.seconds << " s; checkpoint at "
              << result.checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, const std::string& dataset,
             const std::string& out, bool ablation_table)
{
    const RunConfig cfg = resolve_config(opts);
    if (ablation_table)
    {
        evaluate_ablation_table(cfg, checkpoint, dataset, out, &std::cout);
        return kExitOk;
    }
    Model model = load_model(cfg, checkpoint);
    evaluate_model(model, dataset, out, &std::cout);
    return kExitOk;
}

int cmd_gradcheck(const CommonOpts& opts, bool corrupt)
{
    const RunConfig cfg = resolve_config(opts);
    const auto results = run_gradcheck(cfg.seed, corrupt);
    bool all_pass = true;
    for (const auto& comp : results)
    {
        std::cout << (comp.pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(26)
                  << comp.name << " max rel err " << std::scientific << std::setprecision(3)
                  << comp.max_rel_err << "  (" << std::fixed << std::setprecision(2)
                  << comp.seconds << " s)\n";
        all_pass = all_pass && comp.pass;
    }
    return all_pass ? kExitOk : kExitCheck;
}

int cmd_project_debug(const CommonOpts& opts, const std::string& out)
{
    const RunConfig cfg = resolve_config(opts);
    export_projection_debug(cfg, out);
    std::cout << "wrote camN_grid.ppm, camN_anisotropy.{pgm,fbt}, camN_visibility.pgm to " << out
              << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"surround-view fisheye BEV segmentation pipeline"};
    app.require_subcommand(1);

    CommonOpts synth_opts, train_opts, eval_opts, grad_opts, debug_opts;
    std::string synth_out, train_dataset, train_out, eval_checkpoint, eval_dataset, eval_out,
        debug_out;
    bool ablation_table = false;
    bool corrupt_gradient = false;

    CLI::App* synth = app.add_subcommand("synth", "render a synthetic fisheye dataset");
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    add_common(synth, synth_opts);

    CLI::App* train = app.add_subcommand("train", "train on a synthesized dataset");
    train->add_option("dataset", train_dataset, "dataset directory")->required();
    train->add_option("--out", train_out, "run output directory")->required();
    add_common(train, train_opts);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("checkpoint", eval_checkpoint, "checkpoint directory")->required();
    eval->add_option("dataset", eval_dataset, "dataset directory")->required();
    eval->add_option("--out", eval_out, "report output directory")->required();
    eval->add_flag("--ablation-table", ablation_table,
                   "emit the baseline / +gating / +uncertainty / +both rows");
    add_common(eval, eval_opts);

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_flag("--corrupt-gradient", corrupt_gradient,
                        "inject a wrong backward rule (negative control)");
    add_common(gradcheck, grad_opts);

    CLI::App* debug = app.add_subcommand("project-debug", "geometry diagnostics");
    debug->add_option("--out", debug_out, "output directory")->required();
    add_common(debug, debug_opts);

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e)
    {
        const int code = app.exit(e);  // prints the message or requested help
        return code == 0 ? kExitOk : kExitUsage;
    }

    try
    {
        if (synth->parsed())
            return cmd_synth(synth_opts, synth_out);
        if (train->parsed())
            return cmd_train(train_opts, train_dataset, train_out);
        if (eval->parsed())
            return cmd_eval(eval_opts, eval_checkpoint, eval_dataset, eval_out, ablation_table);
        if (gradcheck->parsed())
            return cmd_gradcheck(grad_opts, corrupt_gradient);
        if (debug->parsed())
            return cmd_project_debug(debug_opts, debug_out);
    }
    catch (const fbev::TrainError& e)
    {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kExitCheck;
    }
    catch (const std::invalid_argument& e)
    {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    catch (const std::exception& e)
    {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
