#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "arch.hpp"
#include "errors.hpp"

namespace sparsekit {

enum class PlanMethod { uniform, uniform_plus, er, erk, erk_plus, external };

inline const char* to_string(PlanMethod m) {
    switch (m) {
        case PlanMethod::uniform: return "uniform";
        case PlanMethod::uniform_plus: return "uniform_plus";
        case PlanMethod::er: return "er";
        case PlanMethod::erk: return "erk";
        case PlanMethod::erk_plus: return "erk_plus";
        case PlanMethod::external: return "external";
    }
    return "?";
}

inline PlanMethod plan_method_from_string(const std::string& s) {
    for (PlanMethod m : {PlanMethod::uniform, PlanMethod::uniform_plus, PlanMethod::er, PlanMethod::erk,
                         PlanMethod::erk_plus, PlanMethod::external})
        if (s == to_string(m)) return m;
    throw ValidationError("unknown plan method '" + s + "'");
}

// Per-prunable-layer density assignment. Layers appear in network order;
// non-prunable layers are absent (they stay dense and outside the budget).
struct SparsityPlan {
    PlanMethod method = PlanMethod::uniform;
    double global_sparsity = 0.0;
    std::vector<std::string> layer_names;
    std::vector<long long> layer_totals;
    std::vector<double> densities;
    std::vector<long long> retained_counts;

    long long total_params() const {
        long long t = 0;
        for (long long p : layer_totals) t += p;
        return t;
    }
    long long total_retained() const {
        long long t = 0;
        for (long long r : retained_counts) t += r;
        return t;
    }

    bool operator==(const SparsityPlan&) const = default;
};

namespace detail {

inline long long round_half_up(double x) { return static_cast<long long>(std::floor(x + 0.5)); }

// round(d*p) clamped to [1, p]: every layer keeps at least one weight.
inline long long retained_for(double density, long long params) {
    return std::clamp(round_half_up(density * static_cast<double>(params)), 1LL, params);
}

inline void check_sparsity_arg(double S) {
    if (!(S >= 0.0 && S < 1.0))
        throw ValidationError("sparsity must lie in [0,1), got " + std::to_string(S));
}

inline std::vector<const LayerSpec*> prunable_layers(const NetworkSpec& net) {
    validate_network(net);
    std::vector<const LayerSpec*> out;
    for (const auto& l : net.layers)
        if (l.prunable) out.push_back(&l);
    if (out.empty()) throw ValidationError("network has no prunable layers to plan over");
    return out;
}

inline SparsityPlan plan_shell(const std::vector<const LayerSpec*>& layers, PlanMethod method, double S) {
    SparsityPlan plan;
    plan.method = method;
    plan.global_sparsity = S;
    for (const auto* l : layers) {
        plan.layer_names.push_back(l->name);
        plan.layer_totals.push_back(l->param_count());
    }
    return plan;
}

inline void finish_retained(SparsityPlan& plan) {
    plan.retained_counts.clear();
    for (std::size_t i = 0; i < plan.densities.size(); ++i)
        plan.retained_counts.push_back(retained_for(plan.densities[i], plan.layer_totals[i]));
}

} // namespace detail

// Scale raw per-layer values r^l so that sum(min(1, eps*r^l) * p^l) hits the
// budget: repeatedly solve for eps over the uncapped layers, cap any layer
// whose density would exceed 1, and re-solve. eps never decreases across
// iterations, so the loop ends after at most one cap per layer.
struct CappedScaleResult {
    double eps = 0.0;
    std::vector<double> densities;
};

inline CappedScaleResult solve_capped_scale(const std::vector<double>& raw, const std::vector<long long>& params,
                                            double budget, const std::vector<bool>& pre_capped) {
    const std::size_t n = raw.size();
    std::vector<bool> capped = pre_capped;
    CappedScaleResult res;
    res.densities.assign(n, 1.0);

    for (;;) {
        double capped_params = 0.0, denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (capped[i])
                capped_params += static_cast<double>(params[i]);
            else
                denom += raw[i] * static_cast<double>(params[i]);
        }
        if (denom == 0.0) {
            res.eps = 0.0;
            break;
        }
        res.eps = (budget - capped_params) / denom;
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (!capped[i] && res.eps * raw[i] > 1.0) {
                capped[i] = true;
                changed = true;
            }
        }
        if (!changed) break;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!capped[i]) res.densities[i] = res.eps * raw[i];
    return res;
}

// Raw proportionality values. ER uses channel counts only; ERK additionally
// credits kernel area on conv layers. On fc layers the two coincide, so
// plan_er and plan_erk agree exactly on pure-MLP networks.
inline double er_raw_value(const LayerSpec& l) {
    const double a = l.fan_in_channels, b = l.fan_out_channels;
    return (a + b) / (a * b);
}

inline double erk_raw_value(const LayerSpec& l) {
    if (l.kind == LayerKind::fc) return er_raw_value(l);
    const double a = l.fan_in_channels, b = l.fan_out_channels;
    const double w = l.kernel_w, h = l.kernel_h;
    return (a + b + w + h) / (a * b * w * h);
}

namespace detail {

inline SparsityPlan plan_scaled(const NetworkSpec& net, double S, PlanMethod method,
                                double (*raw_fn)(const LayerSpec&), bool force_last_fc_dense) {
    check_sparsity_arg(S);
    const auto layers = prunable_layers(net);
    SparsityPlan plan = plan_shell(layers, method, S);
    const std::size_t n = layers.size();

    if (S == 0.0) {
        plan.densities.assign(n, 1.0);
        finish_retained(plan);
        return plan;
    }

    const double total = static_cast<double>(plan.total_params());
    const double budget = (1.0 - S) * total;
    if (budget < static_cast<double>(n))
        throw ValidationError("budget " + std::to_string(budget) + " cannot keep one weight in each of " +
                              std::to_string(n) + " prunable layers");

    std::vector<bool> pre_capped(n, false);
    if (force_last_fc_dense) {
        std::size_t last_fc = n;
        for (std::size_t i = 0; i < n; ++i)
            if (layers[i]->kind == LayerKind::fc) last_fc = i;
        if (last_fc == n) throw ValidationError("no prunable fc layer to force dense");
        const double p_last = static_cast<double>(plan.layer_totals[last_fc]);
        if (p_last > budget)
            throw ValidationError("forcing layer '" + plan.layer_names[last_fc] + "' dense needs " +
                                  std::to_string(plan.layer_totals[last_fc]) + " weights but the budget is " +
                                  std::to_string(budget));
        if (budget - p_last < static_cast<double>(n - 1))
            throw ValidationError("forcing layer '" + plan.layer_names[last_fc] +
                                  "' dense leaves no budget for the remaining layers");
        pre_capped[last_fc] = true;
    }

    std::vector<double> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = raw_fn(*layers[i]);
    plan.densities = solve_capped_scale(raw, plan.layer_totals, budget, pre_capped).densities;
    finish_retained(plan);
    return plan;
}

} // namespace detail

inline SparsityPlan plan_uniform(const NetworkSpec& net, double S) {
    detail::check_sparsity_arg(S);
    const auto layers = detail::prunable_layers(net);
    SparsityPlan plan = detail::plan_shell(layers, PlanMethod::uniform, S);
    plan.densities.assign(layers.size(), 1.0 - S);
    detail::finish_retained(plan);
    return plan;
}

// First conv dense, last fc floored at 20% density, the middle layers share
// one common density that balances the budget. If the middles would exceed
// density 1 they cap there and the surplus raises the last fc above its
// floor.
inline SparsityPlan plan_uniform_plus(const NetworkSpec& net, double S) {
    detail::check_sparsity_arg(S);
    const auto layers = detail::prunable_layers(net);
    const std::size_t n = layers.size();
    SparsityPlan plan = detail::plan_shell(layers, PlanMethod::uniform_plus, S);

    if (S == 0.0) {
        plan.densities.assign(n, 1.0);
        detail::finish_retained(plan);
        return plan;
    }

    std::size_t first_conv = n, last_fc = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (layers[i]->kind == LayerKind::conv && first_conv == n) first_conv = i;
        if (layers[i]->kind == LayerKind::fc) last_fc = i;
    }

    const double total = static_cast<double>(plan.total_params());
    const double tol = 1e-9 * total; // absorbs rounding noise at exact-feasibility boundaries
    double budget = (1.0 - S) * total;
    plan.densities.assign(n, 0.0);

    if (first_conv != n) {
        plan.densities[first_conv] = 1.0;
        budget -= static_cast<double>(plan.layer_totals[first_conv]);
        if (budget < -tol)
            throw ValidationError("keeping layer '" + plan.layer_names[first_conv] +
                                  "' dense already exceeds the parameter budget");
        budget = std::max(budget, 0.0);
    }

    double floor_last = 0.0;
    if (last_fc != n && last_fc != first_conv) {
        floor_last = 0.2;
        budget -= floor_last * static_cast<double>(plan.layer_totals[last_fc]);
        if (budget < -tol)
            throw ValidationError("the 20% floor on layer '" + plan.layer_names[last_fc] +
                                  "' does not fit the parameter budget");
        budget = std::max(budget, 0.0);
    }

    double middle_params = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (i != first_conv && i != last_fc) middle_params += static_cast<double>(plan.layer_totals[i]);

    double d_mid = middle_params > 0.0 ? budget / middle_params : 0.0;
    double overflow = 0.0;
    if (middle_params == 0.0) {
        overflow = budget;
    } else if (d_mid > 1.0) {
        d_mid = 1.0;
        overflow = budget - middle_params;
    }
    for (std::size_t i = 0; i < n; ++i)
        if (i != first_conv && i != last_fc) plan.densities[i] = d_mid;

    if (last_fc != n && last_fc != first_conv) {
        const double p_last = static_cast<double>(plan.layer_totals[last_fc]);
        double d_last = floor_last + overflow / p_last;
        if (d_last > 1.0 + 1e-12)
            throw ValidationError("budget overflow pushes layer '" + plan.layer_names[last_fc] +
                                  "' past density 1");
        plan.densities[last_fc] = std::min(d_last, 1.0);
    } else if (overflow > 1e-9) {
        throw ValidationError("no layer can absorb the leftover budget");
    }

    for (std::size_t i = 0; i < n; ++i)
        if (!(plan.densities[i] > 0.0 && plan.densities[i] <= 1.0))
            throw ValidationError("layer '" + plan.layer_names[i] + "' would get density " +
                                  std::to_string(plan.densities[i]) + ", outside (0,1]");
    detail::finish_retained(plan);
    return plan;
}

inline SparsityPlan plan_er(const NetworkSpec& net, double S) {
    return detail::plan_scaled(net, S, PlanMethod::er, &er_raw_value, false);
}

inline SparsityPlan plan_erk(const NetworkSpec& net, double S) {
    return detail::plan_scaled(net, S, PlanMethod::erk, &erk_raw_value, false);
}

inline SparsityPlan plan_erk_plus(const NetworkSpec& net, double S) {
    return detail::plan_scaled(net, S, PlanMethod::erk_plus, &erk_raw_value, true);
}

inline SparsityPlan plan_from_ratios(const NetworkSpec& net, const std::vector<double>& ratios) {
    const auto layers = detail::prunable_layers(net);
    if (ratios.size() != layers.size())
        throw ValidationError("expected " + std::to_string(layers.size()) + " densities, got " +
                              std::to_string(ratios.size()));
    SparsityPlan plan = detail::plan_shell(layers, PlanMethod::external, 0.0);
    double kept = 0.0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0 && ratios[i] <= 1.0))
            throw ValidationError("density for layer '" + plan.layer_names[i] + "' is " +
                                  std::to_string(ratios[i]) + ", outside (0,1]");
        kept += ratios[i] * static_cast<double>(plan.layer_totals[i]);
    }
    plan.densities = ratios;
    plan.global_sparsity = 1.0 - kept / static_cast<double>(plan.total_params());
    detail::finish_retained(plan);
    return plan;
}

inline SparsityPlan make_plan(const NetworkSpec& net, PlanMethod method, double S) {
    switch (method) {
        case PlanMethod::uniform: return plan_uniform(net, S);
        case PlanMethod::uniform_plus: return plan_uniform_plus(net, S);
        case PlanMethod::er: return plan_er(net, S);
        case PlanMethod::erk: return plan_erk(net, S);
        case PlanMethod::erk_plus: return plan_erk_plus(net, S);
        case PlanMethod::external: break;
    }
    throw ValidationError("external plans come from plan_from_ratios, not make_plan");
}

// Check that a plan (possibly loaded from disk) matches a network's prunable
// layers by name and size.
inline void check_plan_matches(const SparsityPlan& plan, const NetworkSpec& net) {
    const auto layers = detail::prunable_layers(net);
    if (plan.layer_names.size() != layers.size())
        throw ValidationError("plan covers " + std::to_string(plan.layer_names.size()) + " layers but the network has " +
                              std::to_string(layers.size()) + " prunable layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (plan.layer_names[i] != layers[i]->name)
            throw ValidationError("plan layer '" + plan.layer_names[i] + "' does not match network layer '" +
                                  layers[i]->name + "'");
        if (plan.layer_totals[i] != layers[i]->param_count())
            throw ValidationError("plan layer '" + plan.layer_names[i] + "' has " +
                                  std::to_string(plan.layer_totals[i]) + " weights but the network layer has " +
                                  std::to_string(layers[i]->param_count()));
    }
}

// ---------------------------------------------------------------------------
// Plan document: key-value lines, round-trip exact (densities printed with
// 17 significant digits).
//
//   method erk
//   sparsity 0.5
//   layer conv1 density 0.46444444444444442 retained 17 total 36
// ---------------------------------------------------------------------------

inline std::string serialize_plan(const SparsityPlan& plan) {
    std::ostringstream out;
    char buf[64];
    out << "method " << to_string(plan.method) << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", plan.global_sparsity);
    out << "sparsity " << buf << "\n";
    for (std::size_t i = 0; i < plan.layer_names.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", plan.densities[i]);
        out << "layer " << plan.layer_names[i] << " density " << buf << " retained " << plan.retained_counts[i]
            << " total " << plan.layer_totals[i] << "\n";
    }
    return out.str();
}

inline SparsityPlan parse_plan(const std::string& text) {
    SparsityPlan plan;
    bool saw_method = false, saw_sparsity = false;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno);
        auto toks = detail::split_ws(detail::strip_comment(raw));
        if (toks.empty()) continue;
        if (toks[0] == "method") {
            if (toks.size() != 2) throw ValidationError(where + ": method expects one value");
            plan.method = plan_method_from_string(toks[1]);
            saw_method = true;
        } else if (toks[0] == "sparsity") {
            if (toks.size() != 2) throw ValidationError(where + ": sparsity expects one value");
            plan.global_sparsity = detail::parse_real(toks[1], where);
            saw_sparsity = true;
        } else if (toks[0] == "layer") {
            if (toks.size() != 8 || toks[2] != "density" || toks[4] != "retained" || toks[6] != "total")
                throw ValidationError(where + ": expected 'layer <name> density <d> retained <r> total <p>'");
            plan.layer_names.push_back(toks[1]);
            plan.densities.push_back(detail::parse_real(toks[3], where));
            plan.retained_counts.push_back(detail::parse_int(toks[5], where));
            plan.layer_totals.push_back(detail::parse_int(toks[7], where));
        } else {
            throw ValidationError(where + ": unknown key '" + toks[0] + "'");
        }
    }
    if (!saw_method) throw ValidationError("plan document missing 'method'");
    if (!saw_sparsity) throw ValidationError("plan document missing 'sparsity'");
    if (plan.layer_names.empty()) throw ValidationError("plan document has no layers");
    for (std::size_t i = 0; i < plan.layer_names.size(); ++i) {
        if (!(plan.densities[i] > 0.0 && plan.densities[i] <= 1.0))
            throw ValidationError("layer '" + plan.layer_names[i] + "' density outside (0,1]");
        if (plan.retained_counts[i] < 1 || plan.retained_counts[i] > plan.layer_totals[i])
            throw ValidationError("layer '" + plan.layer_names[i] + "' retained count outside [1, total]");
    }
    return plan;
}

} // namespace sparsekit
