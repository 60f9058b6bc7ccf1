#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>

#include "helpers.hpp"

using namespace sparsekit;

namespace {

namespace fs = std::filesystem;

struct CliResult {
    int exit_code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args, const fs::path& scratch) {
    const fs::path out_path = scratch / "stdout.txt";
    const std::string cmd =
        std::string("\"") + SPARSEKIT_CLI_PATH + "\" " + args + " > \"" + out_path.string() + "\" 2> /dev/null";
    const int rc = std::system(cmd.c_str());
    CliResult r;
    if (rc != -1 && WIFEXITED(rc)) r.exit_code = WEXITSTATUS(rc);
    if (fs::exists(out_path)) r.out = read_file_bytes(out_path.string());
    return r;
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

} // namespace

TEST_CASE("cli plan prints the same document the library builds", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-plan");
    const fs::path net_path = dir / "net.txt";
    write_file_bytes(net_path.string(), testutil::small_convnet_text());

    const CliResult r =
        run_cli("plan --network " + quoted(net_path) + " --method erk --sparsity 0.5", dir);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out == serialize_plan(plan_erk(testutil::small_convnet(), 0.5)));

    const CliResult to_file = run_cli(
        "plan --network " + quoted(net_path) + " --method uniform --sparsity 0.5 -o " + quoted(dir / "plan.txt"),
        dir);
    REQUIRE(to_file.exit_code == 0);
    const SparsityPlan plan = parse_plan(read_file_bytes((dir / "plan.txt").string()));
    CHECK(plan.method == PlanMethod::uniform);
    CHECK(plan.total_retained() == 38); // 18 of 36 conv + 20 of 40 fc
}

TEST_CASE("cli surfaces validation problems as exit code 2", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-errors");
    const fs::path net_path = dir / "net.txt";
    write_file_bytes(net_path.string(), testutil::small_convnet_text());

    CHECK(run_cli("plan --network " + quoted(net_path) + " --method magnitude", dir).exit_code == 2);
    CHECK(run_cli("plan --network " + quoted(dir / "absent.txt"), dir).exit_code == 2);
    CHECK(run_cli("plan --network " + quoted(net_path) + " --sparsity 1.5", dir).exit_code == 2);
    CHECK(run_cli("", dir).exit_code == 2);          // a subcommand is required
    CHECK(run_cli("unplan", dir).exit_code == 2);    // unknown subcommand
    CHECK(run_cli("mask --network " + quoted(net_path), dir).exit_code == 2); // missing required --out
    CHECK(run_cli("--help", dir).exit_code == 0);
    CHECK(run_cli("plan --help", dir).exit_code == 0);
}

TEST_CASE("cli mask matches in-process sampling", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-mask");
    const fs::path net_path = dir / "net.txt";
    write_file_bytes(net_path.string(), testutil::small_convnet_text());

    const CliResult r = run_cli("mask --network " + quoted(net_path) +
                                    " --method erk --sparsity 0.5 --seed 7 --mode exact -o " +
                                    quoted(dir / "mask.bin") + " --summary",
                                dir);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("conv1") != std::string::npos);

    const NetworkSpec net = testutil::small_convnet();
    const Mask expected = sample_mask(plan_erk(net, 0.5), net, 7, MaskMode::exact);
    const Mask loaded = parse_mask(read_file_bytes((dir / "mask.bin").string()));
    REQUIRE(loaded == expected);
    long long kept = 0;
    for (const auto& ml : loaded.layers) kept += ml.popcount();
    CHECK(kept == 38);
}

TEST_CASE("cli ratios emits a reusable plan document", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-ratios");
    const fs::path net_path = dir / "net.txt";
    write_file_bytes(net_path.string(), testutil::small_convnet_text());

    const CliResult r = run_cli("ratios --network " + quoted(net_path) +
                                    " --method snip --sparsity 0.5 --seed 3 --batch-size 16 --dataset " +
                                    "\"grid classes=10 size=6 train=32 test=10 seed=4\"",
                                dir);
    REQUIRE(r.exit_code == 0);
    const SparsityPlan plan = parse_plan(r.out);
    REQUIRE(plan.layer_names == std::vector<std::string>{"conv1", "fc1"});
    for (double d : plan.densities) {
        CHECK(d > 0.0);
        CHECK(d <= 1.0);
    }
    // The document feeds straight back into an external-method plan.
    write_file_bytes((dir / "ratios.txt").string(), r.out);
    const CliResult ext = run_cli("plan --network " + quoted(net_path) + " --method external --ratios " +
                                      quoted(dir / "ratios.txt"),
                                  dir);
    REQUIRE(ext.exit_code == 0);
    CHECK(parse_plan(ext.out).densities == plan.densities);

    CHECK(run_cli("ratios --network " + quoted(net_path) + " --method lottery --dataset \"grid classes=10 " +
                      "size=6 train=32 test=10 seed=4\"",
                  dir)
              .exit_code == 2);
}

TEST_CASE("cli train runs a config and writes artifacts", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-train");
    write_file_bytes((dir / "net.txt").string(), "input 6\nclasses 3\nfc1: fc 6->8\nfc2: fc 8->3\n");
    write_file_bytes((dir / "exp.cfg").string(),
                     "network net.txt\n"
                     "dataset gaussians classes=3 dim=6 train=24 test=9 seed=1\n"
                     "method er\n"
                     "sparsity 0.5\n"
                     "epochs 2\n"
                     "batch_size 8\n"
                     "milestones 1\n"
                     "outdir run\n");

    const CliResult r = run_cli("train --config " + quoted(dir / "exp.cfg"), dir);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.rfind("epoch 2 accuracy ", 0) == 0);
    for (const char* name : {"records.jsonl", "summary.csv", "plan.txt", "mask.bin", "checkpoint.bin"})
        CHECK(fs::exists(dir / "run" / name));

    // --outdir overrides the config's destination.
    const CliResult moved =
        run_cli("train --config " + quoted(dir / "exp.cfg") + " --outdir " + quoted(dir / "elsewhere"), dir);
    REQUIRE(moved.exit_code == 0);
    CHECK(fs::exists(dir / "elsewhere" / "records.jsonl"));
    CHECK(read_file_bytes((dir / "run" / "records.jsonl").string()) ==
          read_file_bytes((dir / "elsewhere" / "records.jsonl").string()));
}

TEST_CASE("cli sweep and plotdata chain through cells.csv", "[cli]") {
    const fs::path dir = testutil::fresh_dir("cli-sweep");
    write_file_bytes((dir / "net.txt").string(), "input 6\nclasses 3\nfc1: fc 6->8\nfc2: fc 8->3\n");
    write_file_bytes((dir / "base.cfg").string(),
                     "network net.txt\n"
                     "dataset gaussians classes=3 dim=6 train=24 test=9 seed=1\n"
                     "method er\n"
                     "epochs 1\n"
                     "batch_size 8\n"
                     "milestones \n"
                     "metrics all\n");

    // An empty milestones value is a parse error; fix the config first.
    CHECK(run_cli("sweep --config " + quoted(dir / "base.cfg"), dir).exit_code == 2);
    write_file_bytes((dir / "base.cfg").string(),
                     "network net.txt\n"
                     "dataset gaussians classes=3 dim=6 train=24 test=9 seed=1\n"
                     "method er\n"
                     "epochs 1\n"
                     "batch_size 8\n"
                     "metrics all\n");

    const CliResult r = run_cli("sweep --config " + quoted(dir / "base.cfg") +
                                    " --axis sparsity --grid 0.5 0.7 --repeats 1 --outdir " +
                                    quoted(dir / "sweep"),
                                dir);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.rfind("value,method,sparsity,runs,", 0) == 0);
    REQUIRE(fs::exists(dir / "sweep" / "cells.csv"));
    REQUIRE(fs::exists(dir / "sweep" / "sweep_summary.csv"));

    const CliResult plots = run_cli("plotdata --cells " + quoted(dir / "sweep" / "cells.csv") + " --outdir " +
                                        quoted(dir / "plots"),
                                    dir);
    REQUIRE(plots.exit_code == 0);
    CHECK(plots.out.rfind("wrote 18 tables", 0) == 0);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir / "plots")) {
        ++n;
        CHECK(e.path().filename().string().rfind("plot_", 0) == 0);
    }
    CHECK(n == 18);

    CHECK(run_cli("sweep --config " + quoted(dir / "base.cfg") + " --axis flavor", dir).exit_code == 2);
    CHECK(run_cli("plotdata --cells " + quoted(dir / "sweep" / "sweep_summary.csv") + " --outdir " +
                      quoted(dir / "plots2"),
                  dir)
              .exit_code == 2);
}
