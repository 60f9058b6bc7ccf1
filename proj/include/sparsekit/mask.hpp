#pragma once

#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "alloc.hpp"
#include "arch.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace sparsekit {

enum class MaskMode : std::uint8_t { exact = 0, bernoulli = 1 };

inline const char* to_string(MaskMode m) { return m == MaskMode::exact ? "exact" : "bernoulli"; }

inline MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "exact") return MaskMode::exact;
    if (s == "bernoulli") return MaskMode::bernoulli;
    throw ValidationError("unknown mask mode '" + s + "'");
}

// One byte per weight (0 or 1), flat in the layer's weight-tensor layout.
struct MaskLayer {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bits;

    long long popcount() const {
        long long n = 0;
        for (std::uint8_t b : bits) n += b;
        return n;
    }
    bool operator==(const MaskLayer&) const = default;
};

// One entry per network layer, in network order; non-prunable layers carry
// all-ones masks so the engine can apply masks unconditionally.
struct Mask {
    std::uint64_t seed = 0;
    MaskMode mode = MaskMode::exact;
    std::vector<MaskLayer> layers;

    bool operator==(const Mask&) const = default;
};

// Each layer draws from its own substream of (seed, layer index), so layer
// masks are independent and insertion of new layers does not shift others.
inline Mask sample_mask(const SparsityPlan& plan, const NetworkSpec& net, std::uint64_t seed, MaskMode mode) {
    check_plan_matches(plan, net);
    Mask mask;
    mask.seed = seed;
    mask.mode = mode;

    std::size_t plan_idx = 0;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const LayerSpec& l = net.layers[li];
        MaskLayer ml;
        ml.name = l.name;
        ml.shape = l.weight_shape();
        const std::size_t p = static_cast<std::size_t>(l.param_count());

        if (!l.prunable) {
            ml.bits.assign(p, 1);
            mask.layers.push_back(std::move(ml));
            continue;
        }

        const double d = plan.densities[plan_idx];
        const long long k = plan.retained_counts[plan_idx];
        ++plan_idx;
        SplitMix64 rng = substream(seed, li);
        ml.bits.assign(p, 0);

        if (mode == MaskMode::exact) {
            // Partial Fisher-Yates: the first k slots of a seeded shuffle are
            // a uniform k-subset.
            std::vector<std::uint32_t> idx(p);
            std::iota(idx.begin(), idx.end(), 0u);
            for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.next_below(p - i));
                std::swap(idx[i], idx[j]);
                ml.bits[idx[i]] = 1;
            }
        } else {
            for (std::size_t i = 0; i < p; ++i) ml.bits[i] = rng.next_double() < d ? 1 : 0;
        }
        mask.layers.push_back(std::move(ml));
    }
    return mask;
}

inline void check_mask_matches(const Mask& mask, const NetworkSpec& net) {
    if (mask.layers.size() != net.layers.size())
        throw ValidationError("mask has " + std::to_string(mask.layers.size()) + " layers but the network has " +
                              std::to_string(net.layers.size()));
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (mask.layers[i].name != net.layers[i].name || mask.layers[i].shape != net.layers[i].weight_shape())
            throw ValidationError("mask layer '" + mask.layers[i].name + "' does not match network layer '" +
                                  net.layers[i].name + "'");
    }
}

inline long long sparse_param_count(const Mask& mask, const NetworkSpec& net) {
    check_mask_matches(mask, net);
    long long total = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].prunable) total += mask.layers[i].popcount();
    return total;
}

inline long long sparse_flops(const Mask& mask, const NetworkSpec& net) {
    check_mask_matches(mask, net);
    long long total = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].prunable) total += 2LL * mask.layers[i].popcount() * net.layers[i].out_positions;
    return total;
}

// ---------------------------------------------------------------------------
// Binary mask format (little-endian, bit-exact round trip):
//   "SKMK" u32 version | u64 seed | u8 mode | u32 layer count
//   per layer: u32 name len, name | u32 ndim, u64 dims... | u64 popcount |
//              packed bitset (LSB first)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    explicit ByteReader(const std::string& b) : buf(b) {}

    std::uint8_t u8() {
        if (pos + 1 > buf.size()) throw ValidationError("truncated binary input");
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    std::string bytes(std::size_t n) {
        if (pos + n > buf.size()) throw ValidationError("truncated binary input");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void expect_end() const {
        if (pos != buf.size()) throw ValidationError("trailing bytes after binary payload");
    }
};

} // namespace detail

inline std::string serialize_mask(const Mask& mask) {
    std::string out;
    out += "SKMK";
    detail::put_u32(out, 1);
    detail::put_u64(out, mask.seed);
    out.push_back(static_cast<char>(mask.mode));
    detail::put_u32(out, static_cast<std::uint32_t>(mask.layers.size()));
    for (const auto& l : mask.layers) {
        detail::put_u32(out, static_cast<std::uint32_t>(l.name.size()));
        out += l.name;
        detail::put_u32(out, static_cast<std::uint32_t>(l.shape.size()));
        for (std::size_t d : l.shape) detail::put_u64(out, d);
        detail::put_u64(out, static_cast<std::uint64_t>(l.popcount()));
        std::string packed((l.bits.size() + 7) / 8, '\0');
        for (std::size_t i = 0; i < l.bits.size(); ++i)
            if (l.bits[i]) packed[i / 8] = static_cast<char>(packed[i / 8] | (1 << (i % 8)));
        out += packed;
    }
    return out;
}

inline Mask parse_mask(const std::string& blob) {
    detail::ByteReader r(blob);
    if (r.bytes(4) != "SKMK") throw ValidationError("not a mask file (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != 1) throw ValidationError("unsupported mask format version " + std::to_string(version));
    Mask mask;
    mask.seed = r.u64();
    const std::uint8_t mode = r.u8();
    if (mode > 1) throw ValidationError("bad mask mode byte");
    mask.mode = static_cast<MaskMode>(mode);
    const std::uint32_t n_layers = r.u32();
    for (std::uint32_t li = 0; li < n_layers; ++li) {
        MaskLayer l;
        l.name = r.bytes(r.u32());
        const std::uint32_t ndim = r.u32();
        std::size_t numel = ndim ? 1 : 0;
        for (std::uint32_t i = 0; i < ndim; ++i) {
            l.shape.push_back(static_cast<std::size_t>(r.u64()));
            numel *= l.shape.back();
        }
        const std::uint64_t declared_pop = r.u64();
        const std::string packed = r.bytes((numel + 7) / 8);
        l.bits.assign(numel, 0);
        for (std::size_t i = 0; i < numel; ++i)
            l.bits[i] = (static_cast<std::uint8_t>(packed[i / 8]) >> (i % 8)) & 1;
        if (static_cast<std::uint64_t>(l.popcount()) != declared_pop)
            throw ValidationError("mask layer '" + l.name + "' popcount does not match its header");
        mask.layers.push_back(std::move(l));
    }
    r.expect_end();
    return mask;
}

inline std::string mask_summary(const Mask& mask) {
    std::ostringstream out;
    out << "seed " << mask.seed << "\n";
    out << "mode " << to_string(mask.mode) << "\n";
    for (const auto& l : mask.layers) {
        out << "layer " << l.name << " shape ";
        for (std::size_t i = 0; i < l.shape.size(); ++i) out << (i ? "x" : "") << l.shape[i];
        const long long pop = l.popcount();
        const double total = static_cast<double>(l.bits.size());
        char buf[48];
        std::snprintf(buf, sizeof buf, "%.6f", total > 0 ? pop / total : 0.0);
        out << " retained " << pop << "/" << l.bits.size() << " density " << buf << "\n";
    }
    return out.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace sparsekit
