#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "engine.hpp"
#include "errors.hpp"
#include "mask.hpp"

namespace sparsekit {

// Resumable training snapshot. The data-order stream is re-derived per epoch
// from rng_states[0], so an epoch-boundary snapshot needs no mid-stream
// generator state.
struct Checkpoint {
    ParamState params;
    Mask mask;
    int epoch = 0;
    std::vector<std::uint64_t> rng_states;

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

inline double read_f64(ByteReader& r) {
    const std::uint64_t bits = r.u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline void put_tensor(std::string& out, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_u64(out, d);
    for (double v : t.data) put_f64(out, v);
}

inline Tensor read_tensor(ByteReader& r) {
    Tensor t;
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t i = 0; i < ndim; ++i) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    t.data.resize(Tensor::numel_of(t.shape));
    for (double& v : t.data) v = read_f64(r);
    return t;
}

inline void put_vec(std::string& out, const std::vector<double>& v) {
    put_u32(out, static_cast<std::uint32_t>(v.size()));
    for (double x : v) put_f64(out, x);
}

inline std::vector<double> read_vec(ByteReader& r) {
    std::vector<double> v(r.u32());
    for (double& x : v) x = read_f64(r);
    return v;
}

} // namespace detail

// "SKCP" u32 version | params | length-prefixed mask blob | epoch | rng seeds
inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string out;
    out += "SKCP";
    detail::put_u32(out, 1);
    detail::put_u64(out, ck.params.init_seed);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.params.layers.size()));
    for (const auto& lp : ck.params.layers) {
        detail::put_tensor(out, lp.weights);
        detail::put_vec(out, lp.bias);
        detail::put_tensor(out, lp.grad);
        detail::put_vec(out, lp.bias_grad);
        detail::put_tensor(out, lp.momentum);
        detail::put_vec(out, lp.bias_momentum);
    }
    const std::string mask_blob = serialize_mask(ck.mask);
    detail::put_u64(out, mask_blob.size());
    out += mask_blob;
    detail::put_u32(out, static_cast<std::uint32_t>(ck.epoch));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.rng_states.size()));
    for (std::uint64_t s : ck.rng_states) detail::put_u64(out, s);
    return out;
}

inline Checkpoint parse_checkpoint(const std::string& blob) {
    detail::ByteReader r(blob);
    if (r.bytes(4) != "SKCP") throw ValidationError("not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != 1) throw ValidationError("unsupported checkpoint format version " + std::to_string(version));
    Checkpoint ck;
    ck.params.init_seed = r.u64();
    const std::uint32_t n_layers = r.u32();
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerParams lp;
        lp.weights = detail::read_tensor(r);
        lp.bias = detail::read_vec(r);
        lp.grad = detail::read_tensor(r);
        lp.bias_grad = detail::read_vec(r);
        lp.momentum = detail::read_tensor(r);
        lp.bias_momentum = detail::read_vec(r);
        ck.params.layers.push_back(std::move(lp));
    }
    ck.mask = parse_mask(r.bytes(static_cast<std::size_t>(r.u64())));
    ck.epoch = static_cast<int>(r.u32());
    ck.rng_states.resize(r.u32());
    for (std::uint64_t& s : ck.rng_states) s = r.u64();
    r.expect_end();
    return ck;
}

} // namespace sparsekit
