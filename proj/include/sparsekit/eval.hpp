#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "arch.hpp"
#include "engine.hpp"
#include "errors.hpp"
#include "mask.hpp"
#include "tensor.hpp"

namespace sparsekit {

// One evaluation snapshot; the runner serializes these as JSON lines.
struct MetricsRecord {
    int epoch = 0;
    double clean_accuracy = 0.0;
    double ece = 0.0;
    double nll = 0.0;
    double fgsm_accuracy = 0.0;
    double ood_auc = 0.0;
    double grad_flow_norm = 0.0;
    long long params = 0;
    long long flops = 0;
    double sparsity = 0.0;
};

struct AttackConfig {
    double epsilon = 8.0 / 255.0;
    double input_min = 0.0;
    double input_max = 1.0;
};

inline void validate_attack(const AttackConfig& a) {
    if (!(a.epsilon >= 0.0)) throw ValidationError("attack epsilon must be >= 0");
    if (!(a.input_min < a.input_max)) throw ValidationError("attack input range must satisfy min < max");
}

namespace detail {

// Row-wise softmax probabilities, logsumexp-stabilized.
inline std::vector<double> softmax_rows(const Tensor& logits) {
    const std::size_t N = logits.shape[0], C = logits.shape[1];
    std::vector<double> p(N * C);
    for (std::size_t n = 0; n < N; ++n) {
        const double* z = logits.data.data() + n * C;
        double* pn = p.data() + n * C;
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            pn[c] = std::exp(z[c] - zmax);
            sum += pn[c];
        }
        for (std::size_t c = 0; c < C; ++c) pn[c] /= sum;
    }
    return p;
}

// Argmax with ties broken toward the lowest class index.
inline int argmax_row(const double* row, std::size_t C) {
    int best = 0;
    for (std::size_t c = 1; c < C; ++c)
        if (row[c] > row[best]) best = static_cast<int>(c);
    return best;
}

inline Tensor logits_of(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Tensor& inputs) {
    Batch b;
    b.inputs = inputs;
    b.labels.assign(inputs.shape.empty() ? 0 : inputs.shape[0], 0);
    return forward_loss(net, params, mask, b).logits;
}

// Max-softmax confidence per sample, the OoD detection score.
inline std::vector<double> confidence_scores(const NetworkSpec& net, const ParamState& params, const Mask& mask,
                                             const Tensor& inputs) {
    if (inputs.shape.empty() || inputs.shape[0] == 0) throw ValidationError("empty dataset");
    const Tensor logits = logits_of(net, params, mask, inputs);
    const std::vector<double> probs = softmax_rows(logits);
    const std::size_t N = logits.shape[0], C = logits.shape[1];
    std::vector<double> conf(N);
    for (std::size_t n = 0; n < N; ++n) {
        const double* pn = probs.data() + n * C;
        conf[n] = pn[argmax_row(pn, C)];
    }
    return conf;
}

} // namespace detail

inline double accuracy(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& data) {
    const Tensor logits = forward_loss(net, params, mask, data).logits;
    const std::size_t N = data.size(), C = logits.shape[1];
    std::size_t correct = 0;
    for (std::size_t n = 0; n < N; ++n)
        if (detail::argmax_row(logits.data.data() + n * C, C) == data.labels[n]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(N);
}

// Expected calibration error over equal-width confidence bins:
// sum_b (n_b/N) * |acc_b - conf_b|.
inline double ece(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& data,
                  int bins = 15) {
    if (bins < 1) throw ValidationError("ece bins must be >= 1");
    const Tensor logits = forward_loss(net, params, mask, data).logits;
    const std::vector<double> probs = detail::softmax_rows(logits);
    const std::size_t N = data.size(), C = logits.shape[1];
    std::vector<long long> count(static_cast<std::size_t>(bins), 0);
    std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
    std::vector<long long> hits(static_cast<std::size_t>(bins), 0);
    for (std::size_t n = 0; n < N; ++n) {
        const double* pn = probs.data() + n * C;
        const int pred = detail::argmax_row(pn, C);
        const double conf = pn[pred];
        const auto b = static_cast<std::size_t>(
            std::min(static_cast<int>(conf * bins), bins - 1));
        ++count[b];
        conf_sum[b] += conf;
        if (pred == data.labels[n]) ++hits[b];
    }
    double e = 0.0;
    for (std::size_t b = 0; b < static_cast<std::size_t>(bins); ++b) {
        if (count[b] == 0) continue;
        const double acc_b = static_cast<double>(hits[b]) / static_cast<double>(count[b]);
        const double conf_b = conf_sum[b] / static_cast<double>(count[b]);
        e += (static_cast<double>(count[b]) / static_cast<double>(N)) * std::fabs(acc_b - conf_b);
    }
    return e;
}

// Mean negative log-probability of the true class; identical to the
// training loss by construction.
inline double nll(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& data) {
    return forward_loss(net, params, mask, data).loss;
}

// Accuracy after one signed-gradient step on the inputs:
//   x <- clamp(x + eps * sign(dL/dx), min, max), with the true labels.
inline double fgsm_accuracy(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& data,
                            const AttackConfig& attack) {
    validate_attack(attack);
    const Tensor g = input_gradient(net, params, mask, data);
    Batch perturbed = data;
    for (std::size_t i = 0; i < perturbed.inputs.data.size(); ++i) {
        const double s = g.data[i] > 0.0 ? 1.0 : (g.data[i] < 0.0 ? -1.0 : 0.0);
        perturbed.inputs.data[i] =
            std::clamp(perturbed.inputs.data[i] + attack.epsilon * s, attack.input_min, attack.input_max);
    }
    return accuracy(net, params, mask, perturbed);
}

// Mann-Whitney AUC of in-distribution vs out-of-distribution confidence,
// ties counted half. The numerator is kept in integers (2 per win, 1 per
// tie), so auc(A,B) + auc(B,A) == 1 holds exactly.
inline double ood_auc(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Tensor& in_inputs,
                      const Tensor& out_inputs) {
    const std::vector<double> in_scores = detail::confidence_scores(net, params, mask, in_inputs);
    std::vector<double> out_scores = detail::confidence_scores(net, params, mask, out_inputs);
    std::sort(out_scores.begin(), out_scores.end());
    long long k = 0;
    for (double s : in_scores) {
        const auto lo = std::lower_bound(out_scores.begin(), out_scores.end(), s);
        const auto hi = std::upper_bound(lo, out_scores.end(), s);
        k += 2 * (lo - out_scores.begin()) + (hi - lo);
    }
    return static_cast<double>(k) /
           (2.0 * static_cast<double>(in_scores.size()) * static_cast<double>(out_scores.size()));
}

// L2 norm of the loss gradient over unmasked weights (biases excluded).
inline double grad_flow_norm(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& batch) {
    ParamState scratch = params;
    backward(net, scratch, mask, batch);
    double s = 0.0;
    for (std::size_t li = 0; li < scratch.layers.size(); ++li) {
        const auto& g = scratch.layers[li].grad.data;
        const auto& bits = mask.layers[li].bits;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (bits[i]) s += g[i] * g[i];
    }
    return std::sqrt(s);
}

} // namespace sparsekit
