#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace sparsekit {

enum class LayerKind { conv, fc };

inline const char* to_string(LayerKind k) { return k == LayerKind::conv ? "conv" : "fc"; }

// One weight-bearing layer. Convolutions are stride-1 "valid" (no padding);
// an optional average pool (window = stride = pool_after) follows the
// activation. Feature maps are flattened channel-major when they reach the
// first fc layer, so fc fan_in counts flattened features.
struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::fc;
    int fan_in_channels = 0;
    int fan_out_channels = 0;
    int kernel_w = 1;
    int kernel_h = 1;
    int out_positions = 1; // spatial locations the kernel is applied at; 1 for fc
    int pool_after = 1;    // average-pool window/stride after activation; 1 = none
    bool prunable = true;
    bool has_bias = true;

    long long param_count() const {
        return static_cast<long long>(fan_in_channels) * fan_out_channels * kernel_w * kernel_h;
    }

    std::vector<std::size_t> weight_shape() const {
        if (kind == LayerKind::conv)
            return {static_cast<std::size_t>(fan_out_channels), static_cast<std::size_t>(fan_in_channels),
                    static_cast<std::size_t>(kernel_h), static_cast<std::size_t>(kernel_w)};
        return {static_cast<std::size_t>(fan_out_channels), static_cast<std::size_t>(fan_in_channels)};
    }

    bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    int input_channels = 0;
    int input_height = 1;
    int input_width = 1;
    int class_count = 0;

    bool operator==(const NetworkSpec&) const = default;
};

// Feature-map geometry entering and leaving each layer.
struct SpatialStage {
    int in_channels, in_h, in_w;
    int out_h, out_w;       // after the conv kernel (1x1 for fc)
    int pooled_h, pooled_w; // after pool_after
    int flat_in;            // flattened feature count entering the layer
};

namespace detail {

inline std::string layer_label(const LayerSpec& l, std::size_t idx) {
    return l.name.empty() ? ("layer " + std::to_string(idx + 1)) : ("layer '" + l.name + "'");
}

} // namespace detail

namespace detail {

// Walks the network front to back, checking every dimension invariant.
// Throws ValidationError naming the offending layer. check_positions=false
// skips the out_positions cross-check (geometry never depends on it), which
// lets the parser backfill omitted values.
inline std::vector<SpatialStage> spatial_trace_impl(const NetworkSpec& net, bool check_positions) {
    if (net.input_channels <= 0 || net.input_height <= 0 || net.input_width <= 0)
        throw ValidationError("input shape must be positive, got " + std::to_string(net.input_channels) + "x" +
                              std::to_string(net.input_height) + "x" + std::to_string(net.input_width));
    if (net.class_count <= 0)
        throw ValidationError("class count must be positive");
    if (net.layers.empty())
        throw ValidationError("network has no layers");
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        for (std::size_t j = i + 1; j < net.layers.size(); ++j)
            if (net.layers[i].name == net.layers[j].name && !net.layers[i].name.empty())
                throw ValidationError("duplicate layer name '" + net.layers[i].name + "'");

    std::vector<SpatialStage> trace;
    trace.reserve(net.layers.size());
    int c = net.input_channels, h = net.input_height, w = net.input_width;
    bool seen_fc = false;

    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.layers[i];
        const std::string label = detail::layer_label(l, i);
        if (l.fan_in_channels <= 0 || l.fan_out_channels <= 0 || l.kernel_w <= 0 || l.kernel_h <= 0)
            throw ValidationError(label + ": sizes must be positive");

        SpatialStage st{};
        st.in_channels = c;
        st.in_h = h;
        st.in_w = w;
        st.flat_in = c * h * w;

        if (l.kind == LayerKind::conv) {
            if (seen_fc) throw ValidationError(label + ": conv layer after fc layer");
            if (l.fan_in_channels != c)
                throw ValidationError(label + ": dimension mismatch, fan_in " + std::to_string(l.fan_in_channels) +
                                      " but incoming feature map has " + std::to_string(c) + " channels");
            st.out_h = h - l.kernel_h + 1;
            st.out_w = w - l.kernel_w + 1;
            if (st.out_h <= 0 || st.out_w <= 0)
                throw ValidationError(label + ": kernel " + std::to_string(l.kernel_w) + "x" + std::to_string(l.kernel_h) +
                                      " larger than feature map " + std::to_string(w) + "x" + std::to_string(h));
            if (l.pool_after < 1) throw ValidationError(label + ": pool factor must be >= 1");
            if (l.pool_after > 1 && (st.out_h % l.pool_after != 0 || st.out_w % l.pool_after != 0))
                throw ValidationError(label + ": pool " + std::to_string(l.pool_after) + " does not divide feature map " +
                                      std::to_string(st.out_w) + "x" + std::to_string(st.out_h));
            st.pooled_h = st.out_h / l.pool_after;
            st.pooled_w = st.out_w / l.pool_after;
            c = l.fan_out_channels;
            h = st.pooled_h;
            w = st.pooled_w;
        } else {
            if (l.kernel_w != 1 || l.kernel_h != 1)
                throw ValidationError(label + ": fc layers must have 1x1 kernels");
            if (l.pool_after != 1)
                throw ValidationError(label + ": pool is only valid after conv layers");
            if (l.fan_in_channels != st.flat_in)
                throw ValidationError(label + ": dimension mismatch, fan_in " + std::to_string(l.fan_in_channels) +
                                      " but flattened input has " + std::to_string(st.flat_in) + " features");
            st.out_h = st.out_w = st.pooled_h = st.pooled_w = 1;
            seen_fc = true;
            c = l.fan_out_channels;
            h = 1;
            w = 1;
        }

        const int expected_pos = (l.kind == LayerKind::conv) ? st.out_h * st.out_w : 1;
        if (check_positions && l.out_positions != expected_pos)
            throw ValidationError(label + ": out_positions " + std::to_string(l.out_positions) + " but geometry gives " +
                                  std::to_string(expected_pos));
        trace.push_back(st);
    }

    const LayerSpec& last = net.layers.back();
    if (last.kind != LayerKind::fc)
        throw ValidationError("last layer must be fc, got " + std::string(to_string(last.kind)));
    if (last.fan_out_channels != net.class_count)
        throw ValidationError(layer_label(last, net.layers.size() - 1) + ": fan_out " +
                              std::to_string(last.fan_out_channels) + " must equal class count " +
                              std::to_string(net.class_count));
    return trace;
}

} // namespace detail

inline std::vector<SpatialStage> spatial_trace(const NetworkSpec& net) {
    return detail::spatial_trace_impl(net, true);
}

inline void validate_network(const NetworkSpec& net) { (void)spatial_trace(net); }

// Prunable weights only; biases are tracked separately and never pruned.
inline long long param_count(const NetworkSpec& net) {
    long long total = 0;
    for (const auto& l : net.layers)
        if (l.prunable) total += l.param_count();
    return total;
}

// Forward multiply-accumulates x2 over prunable layers.
inline long long dense_flops(const NetworkSpec& net) {
    long long total = 0;
    for (const auto& l : net.layers)
        if (l.prunable) total += 2LL * l.param_count() * l.out_positions;
    return total;
}

inline std::vector<std::size_t> prunable_indices(const NetworkSpec& net) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].prunable) idx.push_back(i);
    return idx;
}

// ---------------------------------------------------------------------------
// Architecture document
//
//   # comment
//   input 1x8x8          (or "input 64" for a 64x1x1 vector input)
//   classes 10
//   conv1: conv 1->8 k3x3 pos36
//   pool 2
//   fc1: fc 72->10 pos1 dense nobias
//
// Layer lines: [name:] <kind> <fan_in>-><fan_out> [k<w>x<h>] [pos<n>]
// [dense] [nobias]. "k3" is square shorthand. "pos" is validated against the
// computed geometry when present and filled in when absent. "pool <k>"
// attaches an average pool to the preceding conv layer. Unknown tokens are
// rejected.
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_identifier(const std::string& s) {
    if (s.empty() || (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_')) return false;
    for (char ch : s)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_') return false;
    return true;
}

inline long long parse_int(const std::string& tok, const std::string& where) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(tok, &pos);
    } catch (const std::exception&) {
        throw ValidationError(where + ": expected integer, got '" + tok + "'");
    }
    if (pos != tok.size()) throw ValidationError(where + ": expected integer, got '" + tok + "'");
    return v;
}

inline double parse_real(const std::string& tok, const std::string& where) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(tok, &pos);
    } catch (const std::exception&) {
        throw ValidationError(where + ": expected number, got '" + tok + "'");
    }
    if (pos != tok.size()) throw ValidationError(where + ": expected number, got '" + tok + "'");
    return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

inline std::string strip_comment(const std::string& line) {
    auto hash = line.find('#');
    return hash == std::string::npos ? line : line.substr(0, hash);
}

} // namespace detail

inline NetworkSpec parse_network(const std::string& text) {
    NetworkSpec net;
    bool saw_input = false, saw_classes = false;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    int auto_conv = 0, auto_fc = 0;

    while (std::getline(in, raw)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno);
        auto toks = detail::split_ws(detail::strip_comment(raw));
        if (toks.empty()) continue;

        if (toks[0] == "input") {
            if (toks.size() != 2) throw ValidationError(where + ": input expects CxHxW or a single channel count");
            const std::string& d = toks[1];
            auto x1 = d.find('x');
            if (x1 == std::string::npos) {
                net.input_channels = static_cast<int>(detail::parse_int(d, where));
                net.input_height = net.input_width = 1;
            } else {
                auto x2 = d.find('x', x1 + 1);
                if (x2 == std::string::npos) throw ValidationError(where + ": input expects CxHxW");
                net.input_channels = static_cast<int>(detail::parse_int(d.substr(0, x1), where));
                net.input_height = static_cast<int>(detail::parse_int(d.substr(x1 + 1, x2 - x1 - 1), where));
                net.input_width = static_cast<int>(detail::parse_int(d.substr(x2 + 1), where));
            }
            saw_input = true;
            continue;
        }
        if (toks[0] == "classes") {
            if (toks.size() != 2) throw ValidationError(where + ": classes expects one integer");
            net.class_count = static_cast<int>(detail::parse_int(toks[1], where));
            saw_classes = true;
            continue;
        }
        if (toks[0] == "pool") {
            if (toks.size() != 2) throw ValidationError(where + ": pool expects one integer");
            if (net.layers.empty() || net.layers.back().kind != LayerKind::conv)
                throw ValidationError(where + ": pool must follow a conv layer");
            if (net.layers.back().pool_after != 1)
                throw ValidationError(where + ": layer already has a pool");
            const long long k = detail::parse_int(toks[1], where);
            if (k < 2) throw ValidationError(where + ": pool factor must be >= 2");
            net.layers.back().pool_after = static_cast<int>(k);
            continue;
        }

        // Layer line, with optional "name:" prefix.
        LayerSpec layer;
        std::size_t t = 0;
        if (!toks[0].empty() && toks[0].back() == ':') {
            layer.name = toks[0].substr(0, toks[0].size() - 1);
            if (!detail::is_identifier(layer.name))
                throw ValidationError(where + ": bad layer name '" + layer.name + "'");
            ++t;
        }
        if (t >= toks.size()) throw ValidationError(where + ": missing layer kind");
        if (toks[t] == "conv")
            layer.kind = LayerKind::conv;
        else if (toks[t] == "fc")
            layer.kind = LayerKind::fc;
        else
            throw ValidationError(where + ": unknown token '" + toks[t] + "'");
        ++t;

        if (t >= toks.size()) throw ValidationError(where + ": missing <fan_in>-><fan_out>");
        {
            const std::string& io = toks[t];
            auto arrow = io.find("->");
            if (arrow == std::string::npos) throw ValidationError(where + ": expected <fan_in>-><fan_out>, got '" + io + "'");
            layer.fan_in_channels = static_cast<int>(detail::parse_int(io.substr(0, arrow), where));
            layer.fan_out_channels = static_cast<int>(detail::parse_int(io.substr(arrow + 2), where));
        }
        ++t;

        bool saw_pos = false;
        int declared_pos = 0;
        for (; t < toks.size(); ++t) {
            const std::string& tok = toks[t];
            if (tok == "dense") {
                layer.prunable = false;
            } else if (tok == "nobias") {
                layer.has_bias = false;
            } else if (tok.size() > 1 && tok[0] == 'k') {
                auto x = tok.find('x');
                if (x == std::string::npos) {
                    layer.kernel_w = layer.kernel_h = static_cast<int>(detail::parse_int(tok.substr(1), where));
                } else {
                    layer.kernel_w = static_cast<int>(detail::parse_int(tok.substr(1, x - 1), where));
                    layer.kernel_h = static_cast<int>(detail::parse_int(tok.substr(x + 1), where));
                }
            } else if (tok.size() > 3 && tok.rfind("pos", 0) == 0) {
                declared_pos = static_cast<int>(detail::parse_int(tok.substr(3), where));
                saw_pos = true;
            } else {
                throw ValidationError(where + ": unknown token '" + tok + "'");
            }
        }
        if (layer.kind == LayerKind::fc && (layer.kernel_w != 1 || layer.kernel_h != 1))
            throw ValidationError(where + ": fc layers must have 1x1 kernels");
        if (layer.name.empty())
            layer.name = layer.kind == LayerKind::conv ? ("conv" + std::to_string(++auto_conv))
                                                       : ("fc" + std::to_string(++auto_fc));
        layer.out_positions = saw_pos ? declared_pos : -1; // -1 = fill from geometry below
        net.layers.push_back(layer);
    }

    if (!saw_input) throw ValidationError("missing 'input' header");
    if (!saw_classes) throw ValidationError("missing 'classes' header");

    // Fill undeclared out_positions from geometry, then validate everything.
    const auto trace = detail::spatial_trace_impl(net, false);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (net.layers[i].out_positions != -1) continue;
        net.layers[i].out_positions =
            net.layers[i].kind == LayerKind::conv ? trace[i].out_h * trace[i].out_w : 1;
    }
    validate_network(net);
    return net;
}

inline std::string serialize_network(const NetworkSpec& net) {
    std::ostringstream out;
    out << "input " << net.input_channels << "x" << net.input_height << "x" << net.input_width << "\n";
    out << "classes " << net.class_count << "\n";
    for (const auto& l : net.layers) {
        out << l.name << ": " << to_string(l.kind) << " " << l.fan_in_channels << "->" << l.fan_out_channels;
        if (l.kind == LayerKind::conv) out << " k" << l.kernel_w << "x" << l.kernel_h;
        out << " pos" << l.out_positions;
        if (!l.prunable) out << " dense";
        if (!l.has_bias) out << " nobias";
        out << "\n";
        if (l.pool_after > 1) out << "pool " << l.pool_after << "\n";
    }
    return out.str();
}

} // namespace sparsekit
