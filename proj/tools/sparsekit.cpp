// Command-line front end: plan, mask, ratios, train, sweep, plotdata.
// Exit codes: 0 success, 2 validation error, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparsekit/runner.hpp"

namespace {

using namespace sparsekit;

NetworkSpec network_from_path(const std::string& path) { return parse_network(read_file_bytes(path)); }

SparsityPlan plan_from_args(const NetworkSpec& net, const std::string& method, double sparsity,
                            const std::string& ratios_path) {
    if (method == "external") {
        if (ratios_path.empty()) throw ValidationError("method external needs --ratios");
        SparsityPlan loaded = parse_plan(read_file_bytes(ratios_path));
        check_plan_matches(loaded, net);
        return plan_from_ratios(net, loaded.densities);
    }
    return make_plan(net, plan_method_from_string(method), sparsity);
}

void write_or_print(const std::string& out_path, const std::string& text) {
    if (out_path.empty())
        std::fputs(text.c_str(), stdout);
    else
        write_file_bytes(out_path, text);
}

int run_cli(int argc, char** argv) {
    CLI::App app{"layer-wise sparsity planning, random mask sampling, and static sparse training"};
    app.require_subcommand(1);

    // --- plan ---------------------------------------------------------
    auto* plan_cmd = app.add_subcommand("plan", "compute a layer-wise density plan");
    std::string plan_net, plan_method = "erk", plan_ratios, plan_out;
    double plan_sparsity = 0.5;
    plan_cmd->add_option("--network", plan_net, "network document path")->required();
    plan_cmd->add_option("--method", plan_method, "uniform|uniform_plus|er|erk|erk_plus|external");
    plan_cmd->add_option("--sparsity", plan_sparsity, "global sparsity in [0,1)");
    plan_cmd->add_option("--ratios", plan_ratios, "plan document supplying external ratios");
    plan_cmd->add_option("-o,--out", plan_out, "write the plan here instead of stdout");
    plan_cmd->callback([&] {
        const NetworkSpec net = network_from_path(plan_net);
        write_or_print(plan_out, serialize_plan(plan_from_args(net, plan_method, plan_sparsity, plan_ratios)));
    });

    // --- mask ---------------------------------------------------------
    auto* mask_cmd = app.add_subcommand("mask", "sample a seeded random mask for a plan");
    std::string mask_net, mask_method = "erk", mask_ratios, mask_out, mask_mode = "exact";
    double mask_sparsity = 0.5;
    std::uint64_t mask_seed = 1;
    bool mask_print_summary = false;
    mask_cmd->add_option("--network", mask_net, "network document path")->required();
    mask_cmd->add_option("--method", mask_method, "uniform|uniform_plus|er|erk|erk_plus|external");
    mask_cmd->add_option("--sparsity", mask_sparsity, "global sparsity in [0,1)");
    mask_cmd->add_option("--ratios", mask_ratios, "plan document supplying external ratios");
    mask_cmd->add_option("--seed", mask_seed, "mask sampling seed");
    mask_cmd->add_option("--mode", mask_mode, "exact|bernoulli");
    mask_cmd->add_option("-o,--out", mask_out, "mask file to write")->required();
    mask_cmd->add_flag("--summary", mask_print_summary, "print the human-readable summary");
    mask_cmd->callback([&] {
        const NetworkSpec net = network_from_path(mask_net);
        const SparsityPlan plan = plan_from_args(net, mask_method, mask_sparsity, mask_ratios);
        const Mask mask = sample_mask(plan, net, mask_seed, mask_mode_from_string(mask_mode));
        write_file_bytes(mask_out, serialize_mask(mask));
        if (mask_print_summary) std::fputs(mask_summary(mask).c_str(), stdout);
    });

    // --- ratios -------------------------------------------------------
    auto* ratios_cmd = app.add_subcommand("ratios", "extract snip/grasp layer-wise ratios to a plan document");
    std::string rat_net, rat_method = "snip", rat_dataset, rat_out;
    double rat_sparsity = 0.5;
    std::uint64_t rat_seed = 2;
    int rat_batch = 64;
    ratios_cmd->add_option("--network", rat_net, "network document path")->required();
    ratios_cmd->add_option("--method", rat_method, "snip|grasp");
    ratios_cmd->add_option("--dataset", rat_dataset, "dataset spec line")->required();
    ratios_cmd->add_option("--sparsity", rat_sparsity, "global sparsity in [0,1)");
    ratios_cmd->add_option("--seed", rat_seed, "init seed for the scored network");
    ratios_cmd->add_option("--batch-size", rat_batch, "scoring batch size");
    ratios_cmd->add_option("-o,--out", rat_out, "write the plan here instead of stdout");
    ratios_cmd->callback([&] {
        if (rat_method != "snip" && rat_method != "grasp")
            throw ValidationError("ratios method must be snip or grasp");
        if (rat_batch < 1) throw ValidationError("batch size must be >= 1");
        const NetworkSpec net = network_from_path(rat_net);
        const Dataset data = load_dataset(rat_dataset);
        check_dataset_matches(data, net);
        const Batch scoring = detail::head_batch(data.train, static_cast<std::size_t>(rat_batch));
        const auto densities = rat_method == "snip" ? snip_ratios(net, rat_seed, scoring, rat_sparsity)
                                                    : grasp_ratios(net, rat_seed, scoring, rat_sparsity);
        write_or_print(rat_out, serialize_plan(plan_from_ratios(net, densities)));
    });

    // --- train --------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "run one experiment from a config document");
    std::string train_config, train_outdir;
    train_cmd->add_option("--config", train_config, "experiment config path")->required();
    train_cmd->add_option("--outdir", train_outdir, "override the config's output directory");
    train_cmd->callback([&] {
        const std::string base_dir = std::filesystem::path(train_config).parent_path().string();
        ExperimentConfig cfg = parse_experiment_config(read_file_bytes(train_config), base_dir);
        if (!train_outdir.empty()) cfg.outdir = train_outdir;
        const RunResult res = run_experiment(cfg);
        const MetricsRecord& last = res.records.back();
        std::printf("epoch %d accuracy %.4f nll %.4f params %lld flops %lld\n", last.epoch, last.clean_accuracy,
                    last.nll, last.params, last.flops);
    });

    // --- sweep --------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "run a grid of experiments around a base config");
    std::string sweep_config, sweep_axis = "sparsity", sweep_outdir;
    std::vector<std::string> sweep_grid;
    int sweep_repeats = 3;
    sweep_cmd->add_option("--config", sweep_config, "base experiment config path")->required();
    sweep_cmd->add_option("--axis", sweep_axis, "depth|width|sparsity|method");
    sweep_cmd->add_option("--grid", sweep_grid, "grid values (defaults to 0.7 0.5 0.3 for sparsity)");
    sweep_cmd->add_option("--repeats", sweep_repeats, "seeds per cell");
    sweep_cmd->add_option("--outdir", sweep_outdir, "override the config's output directory");
    sweep_cmd->callback([&] {
        const std::string base_dir = std::filesystem::path(sweep_config).parent_path().string();
        ExperimentConfig base = parse_experiment_config(read_file_bytes(sweep_config), base_dir);
        if (!sweep_outdir.empty()) base.outdir = sweep_outdir;
        SweepSpec spec;
        spec.axis = sweep_axis_from_string(sweep_axis);
        spec.grid = sweep_grid;
        spec.repeats = sweep_repeats;
        const SweepResult result = run_sweep(spec, base);
        std::fputs(sweep_summary_csv(result).c_str(), stdout);
    });

    // --- plotdata -----------------------------------------------------
    auto* plot_cmd = app.add_subcommand("plotdata", "emit plot-ready tables from a sweep's cells.csv");
    std::string plot_cells, plot_outdir;
    plot_cmd->add_option("--cells", plot_cells, "cells.csv from a sweep")->required();
    plot_cmd->add_option("--outdir", plot_outdir, "directory for the plot tables")->required();
    plot_cmd->callback([&] {
        const auto runs = parse_cells_csv(read_file_bytes(plot_cells));
        const auto files = emit_plot_data(runs);
        const std::string outdir = resolve_outdir(plot_outdir);
        std::filesystem::create_directories(outdir);
        for (const auto& [name, content] : files)
            write_file_bytes((std::filesystem::path(outdir) / name).string(), content);
        std::printf("wrote %zu tables to %s\n", files.size(), outdir.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help and friends exit 0; genuine argument errors count as
        // validation failures.
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const sparsekit::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "failure: %s\n", e.what());
        return 3;
    }
}
