#pragma once

// Shared fixtures for the unit and acceptance suites: small reference
// networks, random network generators, an independent bisection solver used
// as the allocation oracle, and an analytic softmax Hessian for single-layer
// nets.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sparsekit/alloc.hpp"
#include "sparsekit/arch.hpp"
#include "sparsekit/checkpoint.hpp"
#include "sparsekit/data.hpp"
#include "sparsekit/engine.hpp"
#include "sparsekit/errors.hpp"
#include "sparsekit/eval.hpp"
#include "sparsekit/mask.hpp"
#include "sparsekit/rng.hpp"
#include "sparsekit/runner.hpp"
#include "sparsekit/tensor.hpp"

namespace testutil {

// conv 36 weights (16 positions) + fc 40 weights: 76 prunable params.
inline std::string small_convnet_text() {
    return "input 1x6x6\n"
           "classes 10\n"
           "conv1: conv 1->4 k3x3\n"
           "pool 4\n"
           "fc1: fc 4->10\n";
}

inline sparsekit::NetworkSpec small_convnet() { return sparsekit::parse_network(small_convnet_text()); }

// fc 40 + fc 100 weights.
inline sparsekit::NetworkSpec two_fc_net() {
    return sparsekit::parse_network(
        "input 4\n"
        "classes 10\n"
        "fc1: fc 4->10\n"
        "fc2: fc 10->10\n");
}

// conv 36 / fc 100 / fc 40 weights.
inline sparsekit::NetworkSpec three_layer_net() {
    return sparsekit::parse_network(
        "input 1x3x7\n"
        "classes 8\n"
        "conv1: conv 1->4 k3x3\n"
        "fc1: fc 20->5\n"
        "fc2: fc 5->8\n");
}

// conv/pool/conv/fc with biases everywhere; used for gradient checks.
inline sparsekit::NetworkSpec grad_check_net() {
    return sparsekit::parse_network(
        "input 1x6x6\n"
        "classes 3\n"
        "c1: conv 1->2 k3x3\n"
        "pool 2\n"
        "c2: conv 2->2 k2x2\n"
        "f1: fc 2->3\n");
}

// Random sequential net: up to two k3 convs (optionally pooled) followed by
// fc layers, 2..8 weight layers total. Every layer is large enough that a
// 0.05 density budget still feeds one weight per layer.
inline sparsekit::NetworkSpec random_net(sparsekit::SplitMix64& rng, bool allow_conv = true) {
    using namespace sparsekit;
    NetworkSpec net;
    const int n_layers = 2 + static_cast<int>(rng.next_below(7));
    int n_conv = allow_conv ? static_cast<int>(rng.next_below(3)) : 0;
    if (n_conv > n_layers - 1) n_conv = n_layers - 1;
    net.class_count = 4 + static_cast<int>(rng.next_below(9));
    if (n_conv > 0) {
        net.input_channels = 1 + static_cast<int>(rng.next_below(3));
        net.input_height = net.input_width = 12;
    } else {
        net.input_channels = 16 + static_cast<int>(rng.next_below(49));
        net.input_height = net.input_width = 1;
    }

    int c = net.input_channels, h = net.input_height, w = net.input_width;
    for (int i = 0; i < n_conv; ++i) {
        LayerSpec l;
        l.kind = LayerKind::conv;
        l.name = "c" + std::to_string(i + 1);
        l.fan_in_channels = c;
        l.fan_out_channels = 4 + static_cast<int>(rng.next_below(9));
        l.kernel_w = l.kernel_h = 3;
        const int oh = h - 2, ow = w - 2;
        l.pool_after = (oh % 2 == 0 && ow % 2 == 0 && rng.next_below(2) == 0) ? 2 : 1;
        l.out_positions = oh * ow;
        net.layers.push_back(l);
        c = l.fan_out_channels;
        h = oh / l.pool_after;
        w = ow / l.pool_after;
    }
    int flat = c * h * w;
    const int n_fc = n_layers - n_conv;
    for (int i = 0; i < n_fc; ++i) {
        LayerSpec l;
        l.kind = LayerKind::fc;
        l.name = "f" + std::to_string(i + 1);
        l.fan_in_channels = flat;
        l.fan_out_channels = (i == n_fc - 1) ? net.class_count : 8 + static_cast<int>(rng.next_below(25));
        l.out_positions = 1;
        net.layers.push_back(l);
        flat = l.fan_out_channels;
    }
    validate_network(net);
    return net;
}

inline sparsekit::NetworkSpec random_mlp(sparsekit::SplitMix64& rng) { return random_net(rng, false); }

// Uniform [0,1) inputs shaped for the net, round-robin labels.
inline sparsekit::Batch random_batch(const sparsekit::NetworkSpec& net, std::size_t n, std::uint64_t seed) {
    sparsekit::Batch b;
    const auto C = static_cast<std::size_t>(net.input_channels);
    const auto H = static_cast<std::size_t>(net.input_height);
    const auto W = static_cast<std::size_t>(net.input_width);
    if (H == 1 && W == 1)
        b.inputs.shape = {n, C};
    else
        b.inputs.shape = {n, C, H, W};
    b.inputs.data.resize(n * C * H * W);
    sparsekit::SplitMix64 rng(seed);
    for (double& v : b.inputs.data) v = rng.next_double();
    b.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % static_cast<std::size_t>(net.class_count));
    return b;
}

// Independent scalar bisection on f(eps) = sum(min(1, eps*r^l) * p^l) - budget.
// f is nondecreasing and, for budget < total, crosses zero exactly once.
inline double bisect_eps(const std::vector<double>& raw, const std::vector<long long>& params, double budget,
                         const std::vector<bool>& pre_capped) {
    const auto f = [&](double eps) {
        double s = 0.0;
        for (std::size_t i = 0; i < raw.size(); ++i)
            s += (pre_capped[i] ? 1.0 : std::min(1.0, eps * raw[i])) * static_cast<double>(params[i]);
        return s - budget;
    };
    double lo = 0.0, hi = 1.0;
    while (f(hi) < 0.0) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Exact Hessian-vector product for a single-fc-layer softmax-CE net. With
// logits z_i = W x_i + b the per-sample weight Hessian is
// (diag(p_i) - p_i p_i^T) (x) x_i x_i^T, so Hv has the closed form below.
inline std::vector<double> analytic_hv_single_fc(const sparsekit::NetworkSpec& net,
                                                 const sparsekit::ParamState& params, const sparsekit::Batch& batch,
                                                 const std::vector<double>& v) {
    const auto C = static_cast<std::size_t>(net.class_count);
    const auto D = static_cast<std::size_t>(net.layers[0].fan_in_channels);
    const auto N = batch.size();
    const auto& wt = params.layers[0].weights.data;
    const auto& bias = params.layers[0].bias;
    std::vector<double> out(C * D, 0.0);
    std::vector<double> z(C), p(C), u(C), s(C);
    for (std::size_t i = 0; i < N; ++i) {
        const double* x = batch.inputs.data.data() + i * D;
        for (std::size_t a = 0; a < C; ++a) {
            double acc = bias.empty() ? 0.0 : bias[a];
            double uv = 0.0;
            for (std::size_t j = 0; j < D; ++j) {
                acc += wt[a * D + j] * x[j];
                uv += v[a * D + j] * x[j];
            }
            z[a] = acc;
            u[a] = uv;
        }
        const double zmax = *std::max_element(z.begin(), z.end());
        double zsum = 0.0;
        for (std::size_t a = 0; a < C; ++a) zsum += std::exp(z[a] - zmax);
        double pu = 0.0;
        for (std::size_t a = 0; a < C; ++a) {
            p[a] = std::exp(z[a] - zmax) / zsum;
            pu += p[a] * u[a];
        }
        for (std::size_t a = 0; a < C; ++a) s[a] = p[a] * (u[a] - pu);
        for (std::size_t a = 0; a < C; ++a)
            for (std::size_t j = 0; j < D; ++j) out[a * D + j] += s[a] * x[j];
    }
    for (double& o : out) o /= static_cast<double>(N);
    return out;
}

// Fresh directory under the system temp root; wiped first if it exists.
inline std::string fresh_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / "sparsekit-tests" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

inline double rel_diff(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / denom;
}

struct StopWatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

} // namespace testutil
