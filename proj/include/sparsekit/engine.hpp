#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "arch.hpp"
#include "errors.hpp"
#include "mask.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace sparsekit {

struct LayerParams {
    Tensor weights; // [out, in, kh, kw] for conv, [out, in] for fc
    std::vector<double> bias;
    Tensor grad;
    std::vector<double> bias_grad;
    Tensor momentum;
    std::vector<double> bias_momentum;

    bool operator==(const LayerParams&) const = default;
};

struct ParamState {
    std::uint64_t init_seed = 0;
    std::vector<LayerParams> layers;

    bool operator==(const ParamState&) const = default;
};

struct TrainConfig {
    int epochs = 40;
    int batch_size = 64;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double lr_decay_factor = 10.0;
    std::vector<int> decay_milestone_epochs = {20, 30};
    double weight_decay = 5e-4;
};

inline void validate_config(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw ValidationError("epochs must be >= 1");
    if (cfg.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ValidationError("momentum must lie in [0,1)");
    if (!(cfg.lr_decay_factor >= 1.0)) throw ValidationError("lr_decay_factor must be >= 1");
    if (!(cfg.weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    for (std::size_t i = 0; i < cfg.decay_milestone_epochs.size(); ++i) {
        const int m = cfg.decay_milestone_epochs[i];
        if (m <= 0 || m >= cfg.epochs)
            throw ValidationError("decay milestone " + std::to_string(m) + " must lie in (0, epochs)");
        if (i > 0 && m <= cfg.decay_milestone_epochs[i - 1])
            throw ValidationError("decay milestones must be strictly increasing");
    }
}

// inputs: {N, C, H, W} for image data or {N, D} for flat vectors.
struct Batch {
    Tensor inputs;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

inline Mask all_ones_mask(const NetworkSpec& net) {
    validate_network(net);
    Mask mask;
    mask.mode = MaskMode::exact;
    for (const auto& l : net.layers) {
        MaskLayer ml;
        ml.name = l.name;
        ml.shape = l.weight_shape();
        ml.bits.assign(static_cast<std::size_t>(l.param_count()), 1);
        mask.layers.push_back(std::move(ml));
    }
    return mask;
}

// Fan-in-scaled normal init (variance 2/fan_in), zero biases, zero momentum.
// Each layer draws from substream(seed, layer index).
inline ParamState init_params(const NetworkSpec& net, std::uint64_t seed) {
    validate_network(net);
    ParamState ps;
    ps.init_seed = seed;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& l = net.layers[li];
        LayerParams lp;
        lp.weights.shape = l.weight_shape();
        lp.weights.data.resize(static_cast<std::size_t>(l.param_count()));
        const double stddev = std::sqrt(2.0 / (static_cast<double>(l.fan_in_channels) * l.kernel_w * l.kernel_h));
        SplitMix64 rng = substream(seed, li);
        for (double& w : lp.weights.data) w = rng.next_normal() * stddev;
        lp.grad.shape = lp.momentum.shape = lp.weights.shape;
        lp.grad.data.assign(lp.weights.data.size(), 0.0);
        lp.momentum.data.assign(lp.weights.data.size(), 0.0);
        const std::size_t nb = l.has_bias ? static_cast<std::size_t>(l.fan_out_channels) : 0;
        lp.bias.assign(nb, 0.0);
        lp.bias_grad.assign(nb, 0.0);
        lp.bias_momentum.assign(nb, 0.0);
        ps.layers.push_back(std::move(lp));
    }
    return ps;
}

// Zero out masked weights and momentum so the static-sparsity invariant
// holds bitwise from the first step.
inline void apply_mask(ParamState& params, const Mask& mask) {
    if (params.layers.size() != mask.layers.size()) throw ValidationError("params/mask layer count mismatch");
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        LayerParams& lp = params.layers[li];
        const MaskLayer& ml = mask.layers[li];
        if (lp.weights.data.size() != ml.bits.size()) throw ValidationError("params/mask shape mismatch");
        for (std::size_t i = 0; i < ml.bits.size(); ++i) {
            if (!ml.bits[i]) {
                lp.weights.data[i] = 0.0;
                lp.momentum.data[i] = 0.0;
            }
        }
    }
}

namespace detail {

struct ActCache {
    // inputs[l]: activation entering layer l, flat (N x C*H*W).
    // preact[l]: z before ReLU/pool, flat (N x Cout*Ho*Wo).
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> preact;
    Tensor logits; // {N, classes}
};

inline void check_batch(const NetworkSpec& net, const Batch& batch) {
    if (batch.labels.empty()) throw ValidationError("empty batch");
    if (batch.inputs.shape.empty() || batch.inputs.shape[0] != batch.labels.size())
        throw ValidationError("batch inputs/labels length mismatch");
    const std::size_t flat = batch.inputs.numel() / batch.labels.size();
    const std::size_t expected = static_cast<std::size_t>(net.input_channels) * net.input_height * net.input_width;
    if (flat != expected)
        throw ValidationError("batch input size " + std::to_string(flat) + " does not match network input " +
                              std::to_string(expected));
    for (std::size_t i = 0; i < batch.labels.size(); ++i)
        if (batch.labels[i] < 0 || batch.labels[i] >= net.class_count)
            throw ValidationError("label " + std::to_string(batch.labels[i]) + " out of range at sample " +
                                  std::to_string(i));
}

inline std::vector<double> masked_weights(const LayerParams& lp, const MaskLayer& ml) {
    std::vector<double> w(lp.weights.data.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = ml.bits[i] ? lp.weights.data[i] : 0.0;
    return w;
}

// Forward pass caching per-layer inputs and preactivations for backward.
inline void run_forward(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& batch,
                        const std::vector<SpatialStage>& trace, ActCache& cache) {
    const std::size_t N = batch.size();
    cache.inputs.assign(net.layers.size(), {});
    cache.preact.assign(net.layers.size(), {});

    std::vector<double> act(batch.inputs.data);
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& l = net.layers[li];
        const SpatialStage& st = trace[li];
        const bool last = li + 1 == net.layers.size();
        cache.inputs[li] = act;
        const std::vector<double> w = masked_weights(params.layers[li], mask.layers[li]);
        const std::vector<double>& b = params.layers[li].bias;

        if (l.kind == LayerKind::conv) {
            const int Cin = st.in_channels, Hin = st.in_h, Win = st.in_w;
            const int Cout = l.fan_out_channels, Ho = st.out_h, Wo = st.out_w;
            const int Kh = l.kernel_h, Kw = l.kernel_w;
            std::vector<double> z(N * Cout * Ho * Wo, 0.0);
            for (std::size_t n = 0; n < N; ++n) {
                const double* in = act.data() + n * Cin * Hin * Win;
                double* zn = z.data() + n * Cout * Ho * Wo;
                for (int co = 0; co < Cout; ++co) {
                    for (int y = 0; y < Ho; ++y) {
                        for (int x = 0; x < Wo; ++x) {
                            double acc = b.empty() ? 0.0 : b[co];
                            for (int ci = 0; ci < Cin; ++ci) {
                                for (int dy = 0; dy < Kh; ++dy) {
                                    const double* row = in + (ci * Hin + y + dy) * Win + x;
                                    const double* wr = w.data() + ((co * Cin + ci) * Kh + dy) * Kw;
                                    for (int dx = 0; dx < Kw; ++dx) acc += row[dx] * wr[dx];
                                }
                            }
                            zn[(co * Ho + y) * Wo + x] = acc;
                        }
                    }
                }
            }
            cache.preact[li] = z;
            // ReLU (never the last layer, which arch guarantees is fc).
            for (double& v : z) v = v > 0.0 ? v : 0.0;
            if (l.pool_after > 1) {
                const int k = l.pool_after, Hp = st.pooled_h, Wp = st.pooled_w;
                const double inv = 1.0 / (k * k);
                std::vector<double> pooled(N * Cout * Hp * Wp, 0.0);
                for (std::size_t n = 0; n < N; ++n) {
                    for (int c = 0; c < Cout; ++c) {
                        const double* zc = z.data() + (n * Cout + c) * Ho * Wo;
                        double* pc = pooled.data() + (n * Cout + c) * Hp * Wp;
                        for (int py = 0; py < Hp; ++py)
                            for (int px = 0; px < Wp; ++px) {
                                double s = 0.0;
                                for (int dy = 0; dy < k; ++dy)
                                    for (int dx = 0; dx < k; ++dx) s += zc[(py * k + dy) * Wo + (px * k + dx)];
                                pc[py * Wp + px] = s * inv;
                            }
                    }
                }
                act = std::move(pooled);
            } else {
                act = std::move(z);
            }
        } else {
            const int D = l.fan_in_channels, O = l.fan_out_channels;
            std::vector<double> z(N * O, 0.0);
            for (std::size_t n = 0; n < N; ++n) {
                const double* in = act.data() + n * D;
                double* zn = z.data() + n * O;
                for (int o = 0; o < O; ++o) {
                    double acc = b.empty() ? 0.0 : b[o];
                    const double* wo = w.data() + o * D;
                    for (int i = 0; i < D; ++i) acc += in[i] * wo[i];
                    zn[o] = acc;
                }
            }
            cache.preact[li] = z;
            if (!last)
                for (double& v : z) v = v > 0.0 ? v : 0.0;
            act = std::move(z);
        }
    }
    cache.logits.shape = {N, static_cast<std::size_t>(net.class_count)};
    cache.logits.data = std::move(act);
}

// Mean softmax cross-entropy, logsumexp-stabilized.
inline double ce_loss(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t N = labels.size(), C = logits.shape[1];
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const double* z = logits.data.data() + n * C;
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
        total += zmax + std::log(sum) - z[labels[n]];
    }
    return total / static_cast<double>(N);
}

// d(mean CE)/d(logits) = (softmax - onehot)/N.
inline std::vector<double> ce_grad(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t N = labels.size(), C = logits.shape[1];
    std::vector<double> g(N * C, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        const double* z = logits.data.data() + n * C;
        double* gn = g.data() + n * C;
        double zmax = z[0];
        for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            gn[c] = std::exp(z[c] - zmax);
            sum += gn[c];
        }
        for (std::size_t c = 0; c < C; ++c) gn[c] /= sum;
        gn[labels[n]] -= 1.0;
        for (std::size_t c = 0; c < C; ++c) gn[c] /= static_cast<double>(N);
    }
    return g;
}

struct BackpropBuffers {
    std::vector<Tensor> weight_grads;
    std::vector<std::vector<double>> bias_grads;
    std::vector<double> input_grad;
};

// Reverse pass over the cached forward. Gradients at masked weights come out
// zero because the forward consumed masked weights.
inline void run_backward(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& batch,
                         const std::vector<SpatialStage>& trace, const ActCache& cache, bool want_input_grad,
                         BackpropBuffers& out) {
    const std::size_t N = batch.size();
    const std::size_t L = net.layers.size();
    out.weight_grads.assign(L, {});
    out.bias_grads.assign(L, {});

    // grad w.r.t. the activation a layer handed to its successor
    std::vector<double> gout = ce_grad(cache.logits, batch.labels);

    for (std::size_t li = L; li-- > 0;) {
        const LayerSpec& l = net.layers[li];
        const SpatialStage& st = trace[li];
        const bool last = li + 1 == L;
        const std::vector<double> w = masked_weights(params.layers[li], mask.layers[li]);
        const std::vector<double>& z = cache.preact[li];
        const std::vector<double>& in = cache.inputs[li];

        Tensor& wg = out.weight_grads[li];
        wg.shape = params.layers[li].weights.shape;
        wg.data.assign(w.size(), 0.0);
        out.bias_grads[li].assign(params.layers[li].bias.size(), 0.0);
        const bool need_din = want_input_grad || li > 0;

        if (l.kind == LayerKind::conv) {
            const int Cin = st.in_channels, Hin = st.in_h, Win = st.in_w;
            const int Cout = l.fan_out_channels, Ho = st.out_h, Wo = st.out_w;
            const int Kh = l.kernel_h, Kw = l.kernel_w;

            // Undo pooling: spread each pooled grad evenly over its window,
            // then gate by ReLU.
            std::vector<double> dz(N * Cout * Ho * Wo, 0.0);
            if (l.pool_after > 1) {
                const int k = l.pool_after, Hp = st.pooled_h, Wp = st.pooled_w;
                const double inv = 1.0 / (k * k);
                for (std::size_t n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const double* gp = gout.data() + (n * Cout + c) * Hp * Wp;
                        double* dzc = dz.data() + (n * Cout + c) * Ho * Wo;
                        for (int py = 0; py < Hp; ++py)
                            for (int px = 0; px < Wp; ++px) {
                                const double g = gp[py * Wp + px] * inv;
                                for (int dy = 0; dy < k; ++dy)
                                    for (int dx = 0; dx < k; ++dx) dzc[(py * k + dy) * Wo + (px * k + dx)] = g;
                            }
                    }
            } else {
                dz = std::move(gout);
            }
            for (std::size_t i = 0; i < dz.size(); ++i)
                if (z[i] <= 0.0) dz[i] = 0.0;

            std::vector<double> din;
            if (need_din) din.assign(N * Cin * Hin * Win, 0.0);
            for (std::size_t n = 0; n < N; ++n) {
                const double* inn = in.data() + n * Cin * Hin * Win;
                const double* dzn = dz.data() + n * Cout * Ho * Wo;
                for (int co = 0; co < Cout; ++co) {
                    for (int y = 0; y < Ho; ++y) {
                        for (int x = 0; x < Wo; ++x) {
                            const double g = dzn[(co * Ho + y) * Wo + x];
                            if (g == 0.0) continue;
                            if (!out.bias_grads[li].empty()) out.bias_grads[li][co] += g;
                            for (int ci = 0; ci < Cin; ++ci) {
                                for (int dy = 0; dy < Kh; ++dy) {
                                    const double* row = inn + (ci * Hin + y + dy) * Win + x;
                                    double* wgr = wg.data.data() + ((co * Cin + ci) * Kh + dy) * Kw;
                                    for (int dx = 0; dx < Kw; ++dx) wgr[dx] += g * row[dx];
                                    if (need_din) {
                                        const double* wr = w.data() + ((co * Cin + ci) * Kh + dy) * Kw;
                                        double* dr = din.data() + n * Cin * Hin * Win + (ci * Hin + y + dy) * Win + x;
                                        for (int dx = 0; dx < Kw; ++dx) dr[dx] += g * wr[dx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            gout = std::move(din);
        } else {
            const int D = l.fan_in_channels, O = l.fan_out_channels;
            std::vector<double> dz = std::move(gout);
            if (!last)
                for (std::size_t i = 0; i < dz.size(); ++i)
                    if (z[i] <= 0.0) dz[i] = 0.0;

            std::vector<double> din;
            if (need_din) din.assign(N * D, 0.0);
            for (std::size_t n = 0; n < N; ++n) {
                const double* inn = in.data() + n * D;
                const double* dzn = dz.data() + n * O;
                for (int o = 0; o < O; ++o) {
                    const double g = dzn[o];
                    if (g == 0.0) continue;
                    if (!out.bias_grads[li].empty()) out.bias_grads[li][o] += g;
                    double* wgr = wg.data.data() + o * D;
                    for (int i = 0; i < D; ++i) wgr[i] += g * inn[i];
                    if (need_din) {
                        const double* wo = w.data() + o * D;
                        double* dn = din.data() + n * D;
                        for (int i = 0; i < D; ++i) dn[i] += g * wo[i];
                    }
                }
            }
            gout = std::move(din);
        }

        // Chain rule through the mask: the loss sees w*m, so dL/dw carries a
        // factor of m. Zeroing here applies that factor exactly.
        for (std::size_t i = 0; i < wg.data.size(); ++i)
            if (!mask.layers[li].bits[i]) wg.data[i] = 0.0;
    }
    if (want_input_grad) out.input_grad = std::move(gout);
}

} // namespace detail

struct LossResult {
    double loss = 0.0;
    Tensor logits;
};

inline LossResult forward_loss(const NetworkSpec& net, const ParamState& params, const Mask& mask,
                               const Batch& batch) {
    detail::check_batch(net, batch);
    check_mask_matches(mask, net);
    const auto trace = spatial_trace(net);
    detail::ActCache cache;
    detail::run_forward(net, params, mask, batch, trace, cache);
    LossResult res;
    res.loss = detail::ce_loss(cache.logits, batch.labels);
    res.logits = std::move(cache.logits);
    return res;
}

// Fills params.grad / params.bias_grad with exact reverse-mode gradients of
// the masked network; returns the batch loss.
inline double backward(const NetworkSpec& net, ParamState& params, const Mask& mask, const Batch& batch) {
    detail::check_batch(net, batch);
    check_mask_matches(mask, net);
    const auto trace = spatial_trace(net);
    detail::ActCache cache;
    detail::run_forward(net, params, mask, batch, trace, cache);
    detail::BackpropBuffers buf;
    detail::run_backward(net, params, mask, batch, trace, cache, false, buf);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        params.layers[li].grad = std::move(buf.weight_grads[li]);
        params.layers[li].bias_grad = std::move(buf.bias_grads[li]);
    }
    return detail::ce_loss(cache.logits, batch.labels);
}

inline Tensor input_gradient(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& batch) {
    detail::check_batch(net, batch);
    check_mask_matches(mask, net);
    const auto trace = spatial_trace(net);
    detail::ActCache cache;
    detail::run_forward(net, params, mask, batch, trace, cache);
    detail::BackpropBuffers buf;
    detail::run_backward(net, params, mask, batch, trace, cache, true, buf);
    Tensor g;
    g.shape = batch.inputs.shape;
    g.data = std::move(buf.input_grad);
    return g;
}

inline double lr_at(const TrainConfig& cfg, int epoch) {
    double lr = cfg.learning_rate;
    for (int m : cfg.decay_milestone_epochs)
        if (epoch >= m) lr /= cfg.lr_decay_factor;
    return lr;
}

// Momentum SGD with weight decay, masked positions pinned to exact zero:
//   m <- mu*m + (g + wd*w); w <- w - lr*m
inline void sgd_step(ParamState& params, const Mask& mask, const TrainConfig& cfg, int epoch) {
    const double lr = lr_at(cfg, epoch);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        LayerParams& lp = params.layers[li];
        const MaskLayer& ml = mask.layers[li];
        for (std::size_t i = 0; i < lp.weights.data.size(); ++i) {
            if (!ml.bits[i]) {
                lp.weights.data[i] = 0.0;
                lp.momentum.data[i] = 0.0;
                continue;
            }
            const double g = lp.grad.data[i] + cfg.weight_decay * lp.weights.data[i];
            lp.momentum.data[i] = cfg.momentum * lp.momentum.data[i] + g;
            lp.weights.data[i] -= lr * lp.momentum.data[i];
        }
        for (std::size_t i = 0; i < lp.bias.size(); ++i) {
            const double g = lp.bias_grad[i] + cfg.weight_decay * lp.bias[i];
            lp.bias_momentum[i] = cfg.momentum * lp.bias_momentum[i] + g;
            lp.bias[i] -= lr * lp.bias_momentum[i];
        }
    }
}

// Flat views over all layers' weight tensors (biases excluded), used by the
// HVP and the saliency scores.
inline std::vector<double> flatten_weights(const ParamState& params) {
    std::vector<double> flat;
    for (const auto& lp : params.layers) flat.insert(flat.end(), lp.weights.data.begin(), lp.weights.data.end());
    return flat;
}

inline std::vector<double> flatten_weight_grads(const ParamState& params) {
    std::vector<double> flat;
    for (const auto& lp : params.layers) flat.insert(flat.end(), lp.grad.data.begin(), lp.grad.data.end());
    return flat;
}

inline void load_flat_weights(ParamState& params, const std::vector<double>& flat) {
    std::size_t off = 0;
    for (auto& lp : params.layers) {
        std::copy(flat.begin() + off, flat.begin() + off + lp.weights.data.size(), lp.weights.data.begin());
        off += lp.weights.data.size();
    }
    if (off != flat.size()) throw ValidationError("flat weight vector has wrong length");
}

namespace detail {

inline double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

} // namespace detail

// Hessian-vector product by central differences of the gradient:
//   Hv ~ [g(w + dv) - g(w - dv)] / (2d),  d = 1e-4 * (1 + |w|) / |v|
// Leaves weights and gradients as it found them.
inline std::vector<double> hvp(const NetworkSpec& net, ParamState& params, const Mask& mask, const Batch& batch,
                               const std::vector<double>& v) {
    const std::vector<double> w0 = flatten_weights(params);
    if (v.size() != w0.size()) throw ValidationError("hvp direction has wrong length");
    const double vnorm = detail::l2_norm(v);
    if (vnorm == 0.0) return std::vector<double>(v.size(), 0.0);
    const double delta = 1e-4 * (1.0 + detail::l2_norm(w0)) / vnorm;

    std::vector<Tensor> saved_grads;
    std::vector<std::vector<double>> saved_bias_grads;
    for (const auto& lp : params.layers) {
        saved_grads.push_back(lp.grad);
        saved_bias_grads.push_back(lp.bias_grad);
    }

    std::vector<double> shifted(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) shifted[i] = w0[i] + delta * v[i];
    load_flat_weights(params, shifted);
    backward(net, params, mask, batch);
    std::vector<double> gplus = flatten_weight_grads(params);

    for (std::size_t i = 0; i < w0.size(); ++i) shifted[i] = w0[i] - delta * v[i];
    load_flat_weights(params, shifted);
    backward(net, params, mask, batch);
    std::vector<double> gminus = flatten_weight_grads(params);

    load_flat_weights(params, w0);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        params.layers[li].grad = std::move(saved_grads[li]);
        params.layers[li].bias_grad = std::move(saved_bias_grads[li]);
    }

    std::vector<double> hv(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) hv[i] = (gplus[i] - gminus[i]) / (2.0 * delta);
    return hv;
}

namespace detail {

// Shared scaffolding for snip/grasp: score every prunable weight of the
// freshly initialized dense net, drop round(S * total) of them from the
// chosen tail, and report each layer's surviving fraction (floored at one
// weight per layer).
inline std::vector<double> ratios_from_scores(const NetworkSpec& net, const std::vector<double>& scores,
                                              double S, bool prune_highest) {
    std::vector<std::size_t> layer_of;       // prunable-layer ordinal per flat weight
    std::vector<long long> layer_params;     // per prunable layer
    std::size_t flat_off = 0;
    std::vector<std::size_t> flat_index;     // flat offsets of prunable weights
    for (const auto& l : net.layers) {
        const std::size_t p = static_cast<std::size_t>(l.param_count());
        if (l.prunable) {
            const std::size_t ordinal = layer_params.size();
            layer_params.push_back(l.param_count());
            for (std::size_t i = 0; i < p; ++i) {
                layer_of.push_back(ordinal);
                flat_index.push_back(flat_off + i);
            }
        }
        flat_off += p;
    }
    const std::size_t total = flat_index.size();
    const long long n_prune =
        std::clamp(round_half_up(S * static_cast<double>(total)), 0LL, static_cast<long long>(total));

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = scores[flat_index[a]], sb = scores[flat_index[b]];
        if (sa != sb) return prune_highest ? sa > sb : sa < sb;
        return a < b;
    });

    std::vector<long long> surviving = layer_params;
    for (long long i = 0; i < n_prune; ++i) --surviving[layer_of[order[static_cast<std::size_t>(i)]]];
    std::vector<double> densities(layer_params.size());
    for (std::size_t i = 0; i < densities.size(); ++i)
        densities[i] = static_cast<double>(std::max(surviving[i], 1LL)) / static_cast<double>(layer_params[i]);
    return densities;
}

} // namespace detail

// Connection sensitivity |g . w| on the dense init; the lowest-scoring S
// fraction is pruned globally and the per-layer survivor fractions returned.
inline std::vector<double> snip_ratios(const NetworkSpec& net, std::uint64_t seed, const Batch& batch, double S) {
    if (!(S >= 0.0 && S < 1.0)) throw ValidationError("sparsity must lie in [0,1), got " + std::to_string(S));
    detail::check_batch(net, batch);
    ParamState params = init_params(net, seed);
    const Mask dense = all_ones_mask(net);
    backward(net, params, dense, batch);
    const std::vector<double> w = flatten_weights(params);
    const std::vector<double> g = flatten_weight_grads(params);
    std::vector<double> score(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) score[i] = std::fabs(g[i] * w[i]);
    return detail::ratios_from_scores(net, score, S, /*prune_highest=*/false);
}

// Gradient-flow score -w . Hg on the dense init; the highest-scoring S
// fraction is pruned (the weights whose removal least decreases gradient
// flow). prune_lowest flips the tail.
inline std::vector<double> grasp_ratios(const NetworkSpec& net, std::uint64_t seed, const Batch& batch, double S,
                                        bool prune_lowest = false) {
    if (!(S >= 0.0 && S < 1.0)) throw ValidationError("sparsity must lie in [0,1), got " + std::to_string(S));
    detail::check_batch(net, batch);
    ParamState params = init_params(net, seed);
    const Mask dense = all_ones_mask(net);
    backward(net, params, dense, batch);
    const std::vector<double> g = flatten_weight_grads(params);
    const std::vector<double> hg = hvp(net, params, dense, batch, g);
    const std::vector<double> w = flatten_weights(params);
    std::vector<double> score(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) score[i] = -w[i] * hg[i];
    return detail::ratios_from_scores(net, score, S, /*prune_highest=*/!prune_lowest);
}

} // namespace sparsekit
