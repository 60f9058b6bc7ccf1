#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "alloc.hpp"
#include "arch.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "engine.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "mask.hpp"
#include "rng.hpp"

namespace sparsekit {

// Accuracy, ECE, and NLL are always computed; the costlier metrics can be
// switched off per run.
struct MetricToggles {
    bool fgsm = true;
    bool ood = true;
    bool grad_flow = true;
};

struct ExperimentConfig {
    std::string network_path;  // ignored when network_text is set
    std::string network_text;
    std::string dataset_spec;
    std::string method = "erk"; // uniform|uniform_plus|er|erk|erk_plus|snip|grasp|external
    double sparsity = 0.0;
    std::string ratios_path;    // plan document, required for method external
    std::uint64_t mask_seed = 1;
    std::uint64_t init_seed = 2;
    MaskMode mask_mode = MaskMode::exact;
    TrainConfig train;
    AttackConfig attack;
    MetricToggles metrics;
    int eval_every = 1;
    std::string outdir;         // empty: keep results in memory only
};

struct RunResult {
    NetworkSpec net;
    SparsityPlan plan;
    Mask mask;
    ParamState params; // final state
    std::vector<MetricsRecord> records;
    MetricToggles metrics;
};

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string record_json(const MetricsRecord& r, const MetricToggles& t) {
    std::ostringstream o;
    o << "{\"epoch\":" << r.epoch;
    o << ",\"clean_accuracy\":" << fmt_g17(r.clean_accuracy);
    o << ",\"ece\":" << fmt_g17(r.ece);
    o << ",\"nll\":" << fmt_g17(r.nll);
    o << ",\"fgsm_accuracy\":" << (t.fgsm ? fmt_g17(r.fgsm_accuracy) : "null");
    o << ",\"ood_auc\":" << (t.ood ? fmt_g17(r.ood_auc) : "null");
    o << ",\"grad_flow_norm\":" << (t.grad_flow ? fmt_g17(r.grad_flow_norm) : "null");
    o << ",\"params\":" << r.params;
    o << ",\"flops\":" << r.flops;
    o << ",\"sparsity\":" << fmt_g17(r.sparsity) << "}";
    return o.str();
}

inline const char* metrics_csv_header() {
    return "epoch,clean_accuracy,ece,nll,fgsm_accuracy,ood_auc,grad_flow_norm,params,flops,sparsity";
}

inline std::string record_csv(const MetricsRecord& r, const MetricToggles& t) {
    std::ostringstream o;
    o << r.epoch << ',' << fmt_g17(r.clean_accuracy) << ',' << fmt_g17(r.ece) << ',' << fmt_g17(r.nll) << ','
      << (t.fgsm ? fmt_g17(r.fgsm_accuracy) : "-") << ',' << (t.ood ? fmt_g17(r.ood_auc) : "-") << ','
      << (t.grad_flow ? fmt_g17(r.grad_flow_norm) : "-") << ',' << r.params << ',' << r.flops << ','
      << fmt_g17(r.sparsity);
    return o.str();
}

inline Batch slice_batch(const Batch& src, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
    const std::size_t flat = src.inputs.numel() / src.labels.size();
    Batch out;
    out.inputs.shape = src.inputs.shape;
    out.inputs.shape[0] = end - begin;
    out.inputs.data.resize((end - begin) * flat);
    out.labels.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        std::copy_n(src.inputs.data.begin() + static_cast<std::ptrdiff_t>(order[i] * flat), flat,
                    out.inputs.data.begin() + static_cast<std::ptrdiff_t>((i - begin) * flat));
        out.labels[i - begin] = src.labels[order[i]];
    }
    return out;
}

inline Batch head_batch(const Batch& src, std::size_t n) {
    std::vector<std::size_t> order(src.labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    return slice_batch(src, order, 0, std::min(n, src.labels.size()));
}

} // namespace detail

// Resolve an output directory against SPARSEKIT_OUT_ROOT (relative paths
// only); the environment variable is the single supported override.
inline std::string resolve_outdir(const std::string& outdir) {
    if (outdir.empty()) return outdir;
    const char* root = std::getenv("SPARSEKIT_OUT_ROOT");
    std::filesystem::path p(outdir);
    if (root && *root && p.is_relative()) p = std::filesystem::path(root) / p;
    return p.string();
}

inline NetworkSpec load_network(const ExperimentConfig& cfg) {
    if (!cfg.network_text.empty()) return parse_network(cfg.network_text);
    if (cfg.network_path.empty()) throw ValidationError("config gives no network document");
    return parse_network(read_file_bytes(cfg.network_path));
}

// Build the plan the configured method asks for. snip/grasp score the dense
// init (init_seed) on the first training batch, keep only the layer-wise
// ratios, and leave position sampling to the mask seed.
inline SparsityPlan plan_for_config(const ExperimentConfig& cfg, const NetworkSpec& net, const Dataset& data) {
    const std::string& m = cfg.method;
    if (m == "uniform" || m == "uniform_plus" || m == "er" || m == "erk" || m == "erk_plus")
        return make_plan(net, plan_method_from_string(m), cfg.sparsity);
    if (m == "snip" || m == "grasp") {
        const Batch scoring = detail::head_batch(data.train, static_cast<std::size_t>(cfg.train.batch_size));
        const auto ratios = m == "snip" ? snip_ratios(net, cfg.init_seed, scoring, cfg.sparsity)
                                        : grasp_ratios(net, cfg.init_seed, scoring, cfg.sparsity);
        SparsityPlan plan = plan_from_ratios(net, ratios);
        return plan;
    }
    if (m == "external") {
        if (cfg.ratios_path.empty()) throw ValidationError("method external needs a ratios file");
        SparsityPlan plan = parse_plan(read_file_bytes(cfg.ratios_path));
        check_plan_matches(plan, net);
        return plan_from_ratios(net, plan.densities);
    }
    throw ValidationError("unknown method '" + m + "'");
}

inline MetricsRecord snapshot_metrics(const NetworkSpec& net, const ParamState& params, const Mask& mask,
                                      const Dataset& data, const ExperimentConfig& cfg, int epoch_done,
                                      long long run_params, long long run_flops, double realized_sparsity) {
    MetricsRecord r;
    r.epoch = epoch_done;
    r.clean_accuracy = accuracy(net, params, mask, data.test);
    r.ece = ece(net, params, mask, data.test);
    r.nll = nll(net, params, mask, data.test);
    if (cfg.metrics.fgsm) r.fgsm_accuracy = fgsm_accuracy(net, params, mask, data.test, cfg.attack);
    if (cfg.metrics.ood) r.ood_auc = ood_auc(net, params, mask, data.test.inputs, data.ood_inputs);
    if (cfg.metrics.grad_flow) {
        const Batch probe = detail::head_batch(data.train, static_cast<std::size_t>(cfg.train.batch_size));
        r.grad_flow_norm = grad_flow_norm(net, params, mask, probe);
    }
    r.params = run_params;
    r.flops = run_flops;
    r.sparsity = realized_sparsity;
    return r;
}

// plan -> mask -> init -> masked SGD with per-epoch snapshots. Everything is
// validated before training starts and nothing is written until it ends, so
// a config error never leaves partial output.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg.train);
    validate_attack(cfg.attack);
    if (cfg.eval_every < 1) throw ValidationError("eval_every must be >= 1");

    RunResult res;
    res.metrics = cfg.metrics;
    res.net = load_network(cfg);
    Dataset data = load_dataset(cfg.dataset_spec);
    check_dataset_matches(data, res.net);
    res.plan = plan_for_config(cfg, res.net, data);
    res.mask = sample_mask(res.plan, res.net, cfg.mask_seed, cfg.mask_mode);
    res.params = init_params(res.net, cfg.init_seed);
    apply_mask(res.params, res.mask);

    const long long run_params = sparse_param_count(res.mask, res.net);
    const long long run_flops = sparse_flops(res.mask, res.net);
    const long long dense_params = param_count(res.net);
    const double realized_sparsity =
        dense_params > 0 ? 1.0 - static_cast<double>(run_params) / static_cast<double>(dense_params) : 0.0;

    const std::uint64_t order_seed = mix64(cfg.init_seed ^ 0x6f72646572ULL);
    const std::size_t n_train = data.train.labels.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
    std::vector<std::size_t> order(n_train);

    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 rng = substream(order_seed, static_cast<std::uint64_t>(epoch));
        shuffle(order, rng);
        for (std::size_t start = 0; start < n_train; start += bs) {
            const Batch batch = detail::slice_batch(data.train, order, start, std::min(start + bs, n_train));
            backward(res.net, res.params, res.mask, batch);
            sgd_step(res.params, res.mask, cfg.train, epoch);
        }
        const int done = epoch + 1;
        if (done % cfg.eval_every == 0 || done == cfg.train.epochs)
            res.records.push_back(
                snapshot_metrics(res.net, res.params, res.mask, data, cfg, done, run_params, run_flops,
                                 realized_sparsity));
    }

    const std::string outdir = resolve_outdir(cfg.outdir);
    if (!outdir.empty()) {
        std::filesystem::create_directories(outdir);
        const auto path = [&](const char* name) { return (std::filesystem::path(outdir) / name).string(); };
        std::string jsonl;
        for (const auto& r : res.records) jsonl += detail::record_json(r, cfg.metrics) + "\n";
        write_file_bytes(path("records.jsonl"), jsonl);
        write_file_bytes(path("summary.csv"), std::string(detail::metrics_csv_header()) + "\n" +
                                                  detail::record_csv(res.records.back(), cfg.metrics) + "\n");
        write_file_bytes(path("plan.txt"), serialize_plan(res.plan));
        write_file_bytes(path("mask.bin"), serialize_mask(res.mask));
        Checkpoint ck{res.params, res.mask, cfg.train.epochs, {order_seed}};
        write_file_bytes(path("checkpoint.bin"), serialize_checkpoint(ck));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { depth, width, sparsity, method };

inline const char* to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::depth: return "depth";
        case SweepAxis::width: return "width";
        case SweepAxis::sparsity: return "sparsity";
        case SweepAxis::method: return "method";
    }
    return "?";
}

inline SweepAxis sweep_axis_from_string(const std::string& s) {
    for (SweepAxis a : {SweepAxis::depth, SweepAxis::width, SweepAxis::sparsity, SweepAxis::method})
        if (s == to_string(a)) return a;
    throw ValidationError("unknown sweep axis '" + s + "'");
}

struct SweepSpec {
    SweepAxis axis = SweepAxis::sparsity;
    std::vector<std::string> grid; // empty sparsity grid defaults to 0.7/0.5/0.3
    int repeats = 1;
};

// Recompute fan_in / out_positions after a structural edit, walking the
// feature map exactly like the parser does.
inline NetworkSpec rebuild_dims(NetworkSpec net) {
    int c = net.input_channels, h = net.input_height, w = net.input_width;
    for (auto& l : net.layers) {
        if (l.kind == LayerKind::conv) {
            l.fan_in_channels = c;
            const int oh = h - l.kernel_h + 1, ow = w - l.kernel_w + 1;
            if (oh <= 0 || ow <= 0)
                throw ValidationError("layer '" + l.name + "': kernel no longer fits the feature map");
            l.out_positions = oh * ow;
            if (l.pool_after > 1 && (oh % l.pool_after != 0 || ow % l.pool_after != 0))
                throw ValidationError("layer '" + l.name + "': pool no longer divides the feature map");
            c = l.fan_out_channels;
            h = oh / l.pool_after;
            w = ow / l.pool_after;
        } else {
            l.fan_in_channels = c * h * w;
            l.out_positions = 1;
            c = l.fan_out_channels;
            h = w = 1;
        }
    }
    validate_network(net);
    return net;
}

// Set every hidden layer's fan-out (conv channels / fc units) to `width`.
inline NetworkSpec with_width(const NetworkSpec& base, int width) {
    if (width < 1) throw ValidationError("width must be positive");
    NetworkSpec net = base;
    if (net.layers.size() < 2) throw ValidationError("width sweeps need at least one hidden layer");
    for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) net.layers[i].fan_out_channels = width;
    return rebuild_dims(net);
}

// Grow an MLP to `depth` weight layers by inserting square hidden layers
// (same width and flags as the first hidden layer) before the output layer.
inline NetworkSpec with_depth(const NetworkSpec& base, int depth) {
    if (depth < 2) throw ValidationError("depth must be >= 2");
    for (const auto& l : base.layers)
        if (l.kind != LayerKind::fc) throw ValidationError("depth sweeps support fc-only networks");
    if (base.layers.size() < 2) throw ValidationError("depth sweeps need at least one hidden layer");
    NetworkSpec net = base;
    LayerSpec tpl = net.layers.front();
    tpl.fan_in_channels = tpl.fan_out_channels;
    std::vector<LayerSpec> layers{net.layers.front()};
    for (int i = 0; i < depth - 2; ++i) {
        LayerSpec mid = tpl;
        mid.name = "mid" + std::to_string(i + 1);
        layers.push_back(mid);
    }
    layers.push_back(net.layers.back());
    net.layers = std::move(layers);
    return rebuild_dims(net);
}

// One executed run within a sweep.
struct CellRun {
    std::string value;  // grid value this run belongs to
    std::string method;
    double sparsity = 0.0;
    int repeat = 0;
    bool dense_baseline = false;
    bool failed = false;
    std::string error;
    MetricsRecord final_record;
    MetricToggles metrics;
};

// Per-grid-value aggregate over repeats.
struct SweepCell {
    std::string value;
    std::string method;
    double sparsity = 0.0;
    int runs = 0;
    MetricsRecord mean;
    MetricsRecord stdev;
    bool has_std = false;
    bool has_dense = false;
    double dense_accuracy = 0.0;
    double accuracy_gap = 0.0; // dense minus mean sparse accuracy
    bool failed = false;
    std::string error;
};

struct SweepResult {
    std::vector<CellRun> runs;
    std::vector<SweepCell> cells;
};

inline std::string sweep_runs_csv(const SweepResult& result);
inline std::string sweep_summary_csv(const SweepResult& result);

namespace detail {

inline ExperimentConfig cell_config(const ExperimentConfig& base, const NetworkSpec& base_net, SweepAxis axis,
                                    const std::string& value, int repeat, NetworkSpec& net_out) {
    ExperimentConfig cfg = base;
    cfg.outdir.clear();
    net_out = base_net;
    switch (axis) {
        case SweepAxis::sparsity:
            cfg.sparsity = parse_real(value, "sweep grid value");
            break;
        case SweepAxis::method:
            cfg.method = value;
            break;
        case SweepAxis::width:
            net_out = with_width(base_net, static_cast<int>(parse_int(value, "sweep grid value")));
            break;
        case SweepAxis::depth:
            net_out = with_depth(base_net, static_cast<int>(parse_int(value, "sweep grid value")));
            break;
    }
    cfg.network_text = serialize_network(net_out);
    cfg.network_path.clear();
    cfg.mask_seed = base.mask_seed + static_cast<std::uint64_t>(repeat);
    cfg.init_seed = base.init_seed + static_cast<std::uint64_t>(repeat);
    return cfg;
}

struct Welford {
    int n = 0;
    double mean = 0.0, m2 = 0.0;
    void add(double x) {
        ++n;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    double stdev() const { return n > 1 ? std::sqrt(m2 / (n - 1)) : 0.0; }
};

} // namespace detail

// Cartesian grid x repeats, plus one dense (S=0) baseline per distinct
// derived architecture. A failing cell is recorded and skipped.
inline SweepResult run_sweep(const SweepSpec& sweep, const ExperimentConfig& base) {
    if (sweep.repeats < 1) throw ValidationError("sweep repeats must be >= 1");
    std::vector<std::string> grid = sweep.grid;
    if (grid.empty()) {
        if (sweep.axis != SweepAxis::sparsity) throw ValidationError("sweep grid must not be empty");
        grid = {"0.7", "0.5", "0.3"};
    }
    const NetworkSpec base_net = load_network(base);
    const std::string outdir = resolve_outdir(base.outdir);

    SweepResult result;
    std::map<std::string, std::size_t> dense_runs; // serialized net -> index into result.runs

    for (const std::string& value : grid) {
        SweepCell cell;
        cell.value = value;
        detail::Welford acc_w, ece_w, nll_w, fgsm_w, ood_w, gf_w, params_w, flops_w, sparsity_w;

        for (int rep = 0; rep < sweep.repeats; ++rep) {
            CellRun run;
            run.value = value;
            run.repeat = rep;
            try {
                NetworkSpec net;
                ExperimentConfig cfg = detail::cell_config(base, base_net, sweep.axis, value, rep, net);
                if (!outdir.empty())
                    cfg.outdir = (std::filesystem::path(outdir) / "cells" / (to_string(sweep.axis) + ("-" + value) +
                                                                             "-rep" + std::to_string(rep)))
                                     .string();
                run.method = cfg.method;
                run.sparsity = cfg.sparsity;
                const RunResult rr = run_experiment(cfg);
                run.final_record = rr.records.back();
                run.metrics = rr.metrics;
                cell.method = cfg.method;
                cell.sparsity = cfg.sparsity;
                acc_w.add(run.final_record.clean_accuracy);
                ece_w.add(run.final_record.ece);
                nll_w.add(run.final_record.nll);
                if (rr.metrics.fgsm) fgsm_w.add(run.final_record.fgsm_accuracy);
                if (rr.metrics.ood) ood_w.add(run.final_record.ood_auc);
                if (rr.metrics.grad_flow) gf_w.add(run.final_record.grad_flow_norm);
                params_w.add(static_cast<double>(run.final_record.params));
                flops_w.add(static_cast<double>(run.final_record.flops));
                sparsity_w.add(run.final_record.sparsity);
            } catch (const std::exception& e) {
                run.failed = true;
                run.error = e.what();
            }
            result.runs.push_back(run);
        }

        // Dense baseline for this cell's architecture, reused across cells
        // that share it.
        try {
            NetworkSpec net;
            ExperimentConfig cfg = detail::cell_config(base, base_net, sweep.axis, value, 0, net);
            cfg.method = "uniform";
            cfg.sparsity = 0.0;
            const std::string key = serialize_network(net);
            auto it = dense_runs.find(key);
            if (it == dense_runs.end()) {
                if (!outdir.empty())
                    cfg.outdir = (std::filesystem::path(outdir) / "cells" /
                                  ("dense-" + std::to_string(dense_runs.size())))
                                     .string();
                CellRun dense;
                dense.value = value;
                dense.method = "uniform";
                dense.sparsity = 0.0;
                dense.dense_baseline = true;
                const RunResult rr = run_experiment(cfg);
                dense.final_record = rr.records.back();
                dense.metrics = rr.metrics;
                result.runs.push_back(dense);
                it = dense_runs.emplace(key, result.runs.size() - 1).first;
            }
            cell.has_dense = true;
            cell.dense_accuracy = result.runs[it->second].final_record.clean_accuracy;
        } catch (const std::exception& e) {
            cell.error = std::string("dense baseline failed: ") + e.what();
        }

        cell.runs = acc_w.n;
        if (cell.runs == 0) {
            cell.failed = true;
            for (const auto& r : result.runs)
                if (r.value == value && r.failed && !r.dense_baseline) cell.error = r.error;
        } else {
            cell.mean.clean_accuracy = acc_w.mean;
            cell.mean.ece = ece_w.mean;
            cell.mean.nll = nll_w.mean;
            cell.mean.fgsm_accuracy = fgsm_w.mean;
            cell.mean.ood_auc = ood_w.mean;
            cell.mean.grad_flow_norm = gf_w.mean;
            cell.mean.params = static_cast<long long>(params_w.mean);
            cell.mean.flops = static_cast<long long>(flops_w.mean);
            cell.mean.sparsity = sparsity_w.mean;
            cell.has_std = acc_w.n > 1;
            if (cell.has_std) {
                cell.stdev.clean_accuracy = acc_w.stdev();
                cell.stdev.ece = ece_w.stdev();
                cell.stdev.nll = nll_w.stdev();
                cell.stdev.fgsm_accuracy = fgsm_w.stdev();
                cell.stdev.ood_auc = ood_w.stdev();
                cell.stdev.grad_flow_norm = gf_w.stdev();
                cell.stdev.sparsity = sparsity_w.stdev();
            }
            if (cell.has_dense) cell.accuracy_gap = cell.dense_accuracy - cell.mean.clean_accuracy;
        }
        result.cells.push_back(cell);
    }

    if (!outdir.empty()) {
        std::filesystem::create_directories(outdir);
        write_file_bytes((std::filesystem::path(outdir) / "cells.csv").string(), sweep_runs_csv(result));
        write_file_bytes((std::filesystem::path(outdir) / "sweep_summary.csv").string(), sweep_summary_csv(result));
    }
    return result;
}

inline std::string sweep_runs_csv(const SweepResult& result) {
    std::ostringstream o;
    o << "value,method,sparsity,repeat,dense,failed,epoch,clean_accuracy,ece,nll,fgsm_accuracy,ood_auc,"
         "grad_flow_norm,params,flops,realized_sparsity,error\n";
    for (const auto& r : result.runs) {
        o << r.value << ',' << r.method << ',' << detail::fmt_g17(r.sparsity) << ',' << r.repeat << ','
          << (r.dense_baseline ? 1 : 0) << ',' << (r.failed ? 1 : 0) << ',';
        if (r.failed) {
            std::string msg = r.error;
            for (char& c : msg)
                if (c == ',' || c == '\n') c = ';';
            o << std::string(9, ',') << ',' << msg << "\n"; // 10 empty metric columns
            continue;
        }
        const MetricsRecord& m = r.final_record;
        o << m.epoch << ',' << detail::fmt_g17(m.clean_accuracy) << ',' << detail::fmt_g17(m.ece) << ','
          << detail::fmt_g17(m.nll) << ',' << (r.metrics.fgsm ? detail::fmt_g17(m.fgsm_accuracy) : "-") << ','
          << (r.metrics.ood ? detail::fmt_g17(m.ood_auc) : "-") << ','
          << (r.metrics.grad_flow ? detail::fmt_g17(m.grad_flow_norm) : "-") << ',' << m.params << ',' << m.flops
          << ',' << detail::fmt_g17(m.sparsity) << ",\n";
    }
    return o.str();
}

inline std::string sweep_summary_csv(const SweepResult& result) {
    std::ostringstream o;
    o << "value,method,sparsity,runs,accuracy_mean,accuracy_std,ece_mean,ece_std,nll_mean,nll_std,"
         "fgsm_mean,fgsm_std,ood_mean,ood_std,grad_flow_mean,grad_flow_std,params,flops,"
         "dense_accuracy,accuracy_gap,error\n";
    for (const auto& c : result.cells) {
        o << c.value << ',' << c.method << ',' << detail::fmt_g17(c.sparsity) << ',' << c.runs << ',';
        if (c.failed) {
            std::string msg = c.error;
            for (char& ch : msg)
                if (ch == ',' || ch == '\n') ch = ';';
            o << std::string(16, ',') << msg << "\n"; // 16 empty stat columns, then error
            continue;
        }
        const auto stat = [&](double mean, double sd) {
            return detail::fmt_g17(mean) + "," + (c.has_std ? detail::fmt_g17(sd) : std::string("-"));
        };
        o << stat(c.mean.clean_accuracy, c.stdev.clean_accuracy) << ',' << stat(c.mean.ece, c.stdev.ece) << ','
          << stat(c.mean.nll, c.stdev.nll) << ',' << stat(c.mean.fgsm_accuracy, c.stdev.fgsm_accuracy) << ','
          << stat(c.mean.ood_auc, c.stdev.ood_auc) << ',' << stat(c.mean.grad_flow_norm, c.stdev.grad_flow_norm)
          << ',' << c.mean.params << ',' << c.mean.flops << ','
          << (c.has_dense ? detail::fmt_g17(c.dense_accuracy) : "-") << ','
          << (c.has_dense ? detail::fmt_g17(c.accuracy_gap) : "-") << ",";
        std::string msg = c.error;
        for (char& ch : msg)
            if (ch == ',' || ch == '\n') ch = ';';
        o << msg << "\n";
    }
    return o.str();
}

// ---------------------------------------------------------------------------
// Plot data: one table per (x-axis, metric) pair, one series per method,
// points averaged over runs sharing an x value and sorted by x.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> emit_plot_data(const std::vector<CellRun>& runs) {
    if (runs.empty()) throw ValidationError("no records to plot");
    struct MetricRef {
        const char* name;
        double MetricsRecord::* field;
    };
    const MetricRef metrics[] = {
        {"clean_accuracy", &MetricsRecord::clean_accuracy}, {"ece", &MetricsRecord::ece},
        {"nll", &MetricsRecord::nll},                       {"fgsm_accuracy", &MetricsRecord::fgsm_accuracy},
        {"ood_auc", &MetricsRecord::ood_auc},               {"grad_flow_norm", &MetricsRecord::grad_flow_norm},
    };
    struct AxisRef {
        const char* name;
        double (*get)(const MetricsRecord&);
    };
    const AxisRef axes[] = {
        {"params", [](const MetricsRecord& m) { return static_cast<double>(m.params); }},
        {"flops", [](const MetricsRecord& m) { return static_cast<double>(m.flops); }},
        {"sparsity", [](const MetricsRecord& m) { return m.sparsity; }},
    };

    std::map<std::string, std::string> files;
    for (const auto& axis : axes) {
        for (const auto& metric : metrics) {
            // (method, x) -> mean of the metric
            std::map<std::pair<std::string, double>, detail::Welford> series;
            for (const auto& r : runs) {
                if (r.failed) continue;
                series[{r.method, axis.get(r.final_record)}].add(r.final_record.*(metric.field));
            }
            std::ostringstream o;
            o << "method," << axis.name << "," << metric.name << "\n";
            for (const auto& [key, w] : series)
                o << key.first << ',' << detail::fmt_g17(key.second) << ',' << detail::fmt_g17(w.mean) << "\n";
            files[std::string("plot_") + axis.name + "_" + metric.name + ".csv"] = o.str();
        }
    }
    return files;
}

// Rebuild CellRun rows from a cells.csv emitted by run_sweep.
inline std::vector<CellRun> parse_cells_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty cells file");
    if (line.rfind("value,method,", 0) != 0) throw ValidationError("not a cells.csv file");
    std::vector<CellRun> runs;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            f.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        const std::string where = "cells.csv line " + std::to_string(lineno);
        if (f.size() != 17) throw ValidationError(where + ": expected 17 columns");
        CellRun r;
        r.value = f[0];
        r.method = f[1];
        r.sparsity = detail::parse_real(f[2], where);
        r.repeat = static_cast<int>(detail::parse_int(f[3], where));
        r.dense_baseline = f[4] == "1";
        r.failed = f[5] == "1";
        if (!r.failed) {
            r.final_record.epoch = static_cast<int>(detail::parse_int(f[6], where));
            r.final_record.clean_accuracy = detail::parse_real(f[7], where);
            r.final_record.ece = detail::parse_real(f[8], where);
            r.final_record.nll = detail::parse_real(f[9], where);
            r.metrics.fgsm = f[10] != "-";
            if (r.metrics.fgsm) r.final_record.fgsm_accuracy = detail::parse_real(f[10], where);
            r.metrics.ood = f[11] != "-";
            if (r.metrics.ood) r.final_record.ood_auc = detail::parse_real(f[11], where);
            r.metrics.grad_flow = f[12] != "-";
            if (r.metrics.grad_flow) r.final_record.grad_flow_norm = detail::parse_real(f[12], where);
            r.final_record.params = detail::parse_int(f[13], where);
            r.final_record.flops = detail::parse_int(f[14], where);
            r.final_record.sparsity = detail::parse_real(f[15], where);
        } else {
            r.error = f[16];
        }
        runs.push_back(r);
    }
    return runs;
}

// ---------------------------------------------------------------------------
// Experiment config document: key/value lines, '#' comments. `dataset` takes
// the rest of its line; relative paths resolve against base_dir.
// ---------------------------------------------------------------------------

inline ExperimentConfig parse_experiment_config(const std::string& text, const std::string& base_dir = "") {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    const auto resolve = [&](const std::string& p) {
        if (base_dir.empty() || std::filesystem::path(p).is_absolute()) return p;
        return (std::filesystem::path(base_dir) / p).string();
    };
    bool saw_network = false, saw_dataset = false;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno);
        const std::string line = detail::strip_comment(raw);
        auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        const std::string& key = toks[0];
        const auto one = [&]() -> const std::string& {
            if (toks.size() != 2) throw ValidationError(where + ": '" + key + "' expects one value");
            return toks[1];
        };
        if (key == "network") {
            cfg.network_path = resolve(one());
            saw_network = true;
        } else if (key == "dataset") {
            const auto pos = line.find("dataset");
            cfg.dataset_spec = line.substr(pos + 7);
            const auto nonspace = cfg.dataset_spec.find_first_not_of(" \t");
            if (nonspace == std::string::npos) throw ValidationError(where + ": dataset spec is empty");
            cfg.dataset_spec = cfg.dataset_spec.substr(nonspace);
            saw_dataset = true;
        } else if (key == "method") {
            cfg.method = one();
        } else if (key == "sparsity") {
            cfg.sparsity = detail::parse_real(one(), where);
        } else if (key == "ratios") {
            cfg.ratios_path = resolve(one());
        } else if (key == "mask_seed") {
            cfg.mask_seed = static_cast<std::uint64_t>(detail::parse_int(one(), where));
        } else if (key == "init_seed") {
            cfg.init_seed = static_cast<std::uint64_t>(detail::parse_int(one(), where));
        } else if (key == "mask_mode") {
            cfg.mask_mode = mask_mode_from_string(one());
        } else if (key == "epochs") {
            cfg.train.epochs = static_cast<int>(detail::parse_int(one(), where));
        } else if (key == "batch_size") {
            cfg.train.batch_size = static_cast<int>(detail::parse_int(one(), where));
        } else if (key == "learning_rate") {
            cfg.train.learning_rate = detail::parse_real(one(), where);
        } else if (key == "momentum") {
            cfg.train.momentum = detail::parse_real(one(), where);
        } else if (key == "lr_decay_factor") {
            cfg.train.lr_decay_factor = detail::parse_real(one(), where);
        } else if (key == "milestones") {
            cfg.train.decay_milestone_epochs.clear();
            std::istringstream ms(one());
            std::string tok;
            while (std::getline(ms, tok, ','))
                cfg.train.decay_milestone_epochs.push_back(static_cast<int>(detail::parse_int(tok, where)));
        } else if (key == "weight_decay") {
            cfg.train.weight_decay = detail::parse_real(one(), where);
        } else if (key == "fgsm_epsilon") {
            cfg.attack.epsilon = detail::parse_real(one(), where);
        } else if (key == "metrics") {
            const std::string& v = one();
            if (v == "all") {
                cfg.metrics = MetricToggles{};
            } else if (v == "basic") {
                cfg.metrics = MetricToggles{false, false, false};
            } else {
                cfg.metrics = MetricToggles{false, false, false};
                std::istringstream ms(v);
                std::string tok;
                while (std::getline(ms, tok, ',')) {
                    if (tok == "fgsm")
                        cfg.metrics.fgsm = true;
                    else if (tok == "ood")
                        cfg.metrics.ood = true;
                    else if (tok == "gradflow")
                        cfg.metrics.grad_flow = true;
                    else
                        throw ValidationError(where + ": unknown metric toggle '" + tok + "'");
                }
            }
        } else if (key == "eval_every") {
            cfg.eval_every = static_cast<int>(detail::parse_int(one(), where));
        } else if (key == "outdir") {
            cfg.outdir = resolve(one());
        } else {
            throw ValidationError(where + ": unknown key '" + key + "'");
        }
    }
    if (!saw_network) throw ValidationError("config missing 'network'");
    if (!saw_dataset) throw ValidationError("config missing 'dataset'");
    return cfg;
}

} // namespace sparsekit
