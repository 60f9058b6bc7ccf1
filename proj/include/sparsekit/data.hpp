#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "errors.hpp"
#include "mask.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace sparsekit {

// Train/test splits plus an unlabeled out-of-distribution input set. For
// synthetic sources the OoD set is half input-statistics-matched Gaussian
// noise, half samples from disjoint (never-trained) classes; file sources
// get the noise half only.
struct Dataset {
    Batch train;
    Batch test;
    Tensor ood_inputs;
    int class_count = 0;
    int channels = 0, height = 0, width = 0;
};

namespace detail {

// Substream indexes of the dataset seed. Class templates use
// template_base + class and disjoint_base + class.
enum DataStream : std::uint64_t {
    stream_train = 0,
    stream_test = 1,
    stream_ood_disjoint = 2,
    stream_ood_noise = 3,
    stream_split = 4,
    template_base = 100,
    disjoint_base = 200,
};

struct SpecArgs {
    std::string kind;
    std::map<std::string, std::string> kv;

    const std::string& get(const std::string& key) const {
        auto it = kv.find(key);
        if (it == kv.end()) throw ValidationError("dataset spec missing '" + key + "'");
        return it->second;
    }
    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = kv.find(key);
        return it == kv.end() ? fallback : it->second;
    }
    bool has(const std::string& key) const { return kv.count(key) != 0; }
    long long get_int(const std::string& key) const { return parse_int(get(key), "dataset spec " + key); }
    double get_real(const std::string& key) const { return parse_real(get(key), "dataset spec " + key); }
};

inline SpecArgs parse_spec_args(const std::string& spec) {
    SpecArgs args;
    auto toks = split_ws(spec);
    if (toks.empty()) throw ValidationError("empty dataset spec");
    args.kind = toks[0];
    for (std::size_t i = 1; i < toks.size(); ++i) {
        const auto eq = toks[i].find('=');
        if (eq == std::string::npos || eq == 0)
            throw ValidationError("dataset spec expects key=value pairs, got '" + toks[i] + "'");
        if (!args.kv.emplace(toks[i].substr(0, eq), toks[i].substr(eq + 1)).second)
            throw ValidationError("dataset spec repeats key '" + toks[i].substr(0, eq) + "'");
    }
    return args;
}

// Gaussian-noise inputs matching the scalar mean/std of a reference set.
inline Tensor noise_like(const Tensor& reference, std::size_t n, std::size_t flat, SplitMix64& rng) {
    double mean = 0.0;
    for (double v : reference.data) mean += v;
    mean /= static_cast<double>(reference.data.size());
    double var = 0.0;
    for (double v : reference.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(reference.data.size());
    const double stddev = std::sqrt(var);

    Tensor t;
    t.shape = {n, flat};
    t.data.resize(n * flat);
    for (double& v : t.data) v = std::clamp(mean + stddev * rng.next_normal(), 0.0, 1.0);
    return t;
}

} // namespace detail

// Labeled Gaussian mixture: class means uniform in [0.3, 0.7]^dim, isotropic
// noise, clamped to [0,1]. Labels cycle round-robin so counts stay balanced.
//   gaussians classes=4 dim=16 train=1600 test=400 sigma=0.08 seed=7
inline Dataset make_gaussian_mixture(int classes, int dim, std::size_t n_train, std::size_t n_test, double sigma,
                                     std::uint64_t seed) {
    if (classes < 2) throw ValidationError("gaussian mixture needs >= 2 classes");
    if (dim < 1 || n_train == 0 || n_test == 0) throw ValidationError("gaussian mixture sizes must be positive");
    if (!(sigma > 0.0)) throw ValidationError("gaussian mixture sigma must be positive");

    const std::size_t D = static_cast<std::size_t>(dim);
    auto make_means = [&](std::uint64_t base) {
        std::vector<std::vector<double>> means(static_cast<std::size_t>(classes));
        for (int k = 0; k < classes; ++k) {
            SplitMix64 rng = substream(seed, base + static_cast<std::uint64_t>(k));
            means[static_cast<std::size_t>(k)].resize(D);
            for (double& m : means[static_cast<std::size_t>(k)]) m = 0.3 + 0.4 * rng.next_double();
        }
        return means;
    };
    const auto means = make_means(detail::template_base);

    auto draw = [&](std::size_t n, std::uint64_t stream, const std::vector<std::vector<double>>& mu) {
        Batch b;
        b.inputs.shape = {n, D};
        b.inputs.data.resize(n * D);
        b.labels.resize(n);
        SplitMix64 rng = substream(seed, stream);
        for (std::size_t i = 0; i < n; ++i) {
            const int k = static_cast<int>(i % static_cast<std::size_t>(classes));
            b.labels[i] = k;
            for (std::size_t d = 0; d < D; ++d)
                b.inputs.data[i * D + d] =
                    std::clamp(mu[static_cast<std::size_t>(k)][d] + sigma * rng.next_normal(), 0.0, 1.0);
        }
        return b;
    };

    Dataset ds;
    ds.class_count = classes;
    ds.channels = dim;
    ds.height = ds.width = 1;
    ds.train = draw(n_train, detail::stream_train, means);
    ds.test = draw(n_test, detail::stream_test, means);

    const auto disjoint = make_means(detail::disjoint_base);
    Batch far = draw(n_test, detail::stream_ood_disjoint, disjoint);
    SplitMix64 noise_rng = substream(seed, detail::stream_ood_noise);
    Tensor noise = detail::noise_like(ds.test.inputs, n_test, D, noise_rng);
    ds.ood_inputs.shape = {2 * n_test, D};
    ds.ood_inputs.data = std::move(far.inputs.data);
    ds.ood_inputs.data.insert(ds.ood_inputs.data.end(), noise.data.begin(), noise.data.end());
    return ds;
}

// Small image task: each class is a fixed size x size template with pixel
// values 0.25 or 0.75, observed under iid Gaussian pixel noise, clamped to
// [0,1].
//   grid classes=4 size=8 train=1600 test=400 noise=0.25 seed=7
inline Dataset make_grid_images(int classes, int size, std::size_t n_train, std::size_t n_test, double noise,
                                std::uint64_t seed) {
    if (classes < 2) throw ValidationError("grid task needs >= 2 classes");
    if (size < 2 || n_train == 0 || n_test == 0) throw ValidationError("grid task sizes must be positive");
    if (!(noise > 0.0)) throw ValidationError("grid task noise must be positive");

    const std::size_t P = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);
    auto make_templates = [&](std::uint64_t base) {
        std::vector<std::vector<double>> tpl(static_cast<std::size_t>(classes));
        for (int k = 0; k < classes; ++k) {
            SplitMix64 rng = substream(seed, base + static_cast<std::uint64_t>(k));
            tpl[static_cast<std::size_t>(k)].resize(P);
            for (double& v : tpl[static_cast<std::size_t>(k)]) v = rng.next_double() < 0.5 ? 0.25 : 0.75;
        }
        return tpl;
    };
    const auto tpl = make_templates(detail::template_base);

    auto draw = [&](std::size_t n, std::uint64_t stream, const std::vector<std::vector<double>>& t) {
        Batch b;
        b.inputs.shape = {n, 1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)};
        b.inputs.data.resize(n * P);
        b.labels.resize(n);
        SplitMix64 rng = substream(seed, stream);
        for (std::size_t i = 0; i < n; ++i) {
            const int k = static_cast<int>(i % static_cast<std::size_t>(classes));
            b.labels[i] = k;
            for (std::size_t p = 0; p < P; ++p)
                b.inputs.data[i * P + p] =
                    std::clamp(t[static_cast<std::size_t>(k)][p] + noise * rng.next_normal(), 0.0, 1.0);
        }
        return b;
    };

    Dataset ds;
    ds.class_count = classes;
    ds.channels = 1;
    ds.height = ds.width = size;
    ds.train = draw(n_train, detail::stream_train, tpl);
    ds.test = draw(n_test, detail::stream_test, tpl);

    const auto disjoint = make_templates(detail::disjoint_base);
    Batch far = draw(n_test, detail::stream_ood_disjoint, disjoint);
    SplitMix64 noise_rng = substream(seed, detail::stream_ood_noise);
    Tensor gauss = detail::noise_like(ds.test.inputs, n_test, P, noise_rng);
    ds.ood_inputs.shape = {2 * n_test, 1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)};
    ds.ood_inputs.data = std::move(far.inputs.data);
    ds.ood_inputs.data.insert(ds.ood_inputs.data.end(), gauss.data.begin(), gauss.data.end());
    return ds;
}

namespace detail {

struct IdxArray {
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> bytes;
};

inline IdxArray read_idx(const std::string& path) {
    const std::string blob = read_file_bytes(path);
    if (blob.size() < 4) throw ValidationError("'" + path + "' is too short to be an IDX file");
    const auto u8 = [&](std::size_t i) { return static_cast<std::uint8_t>(blob[i]); };
    if (u8(0) != 0 || u8(1) != 0) throw ValidationError("'" + path + "' has a bad IDX magic");
    if (u8(2) != 0x08) throw ValidationError("'" + path + "' is not an unsigned-byte IDX file");
    const std::size_t ndim = u8(3);
    if (ndim < 1 || ndim > 3) throw ValidationError("'" + path + "' has unsupported IDX rank");
    if (blob.size() < 4 + 4 * ndim) throw ValidationError("'" + path + "' IDX header is truncated");

    IdxArray arr;
    std::size_t numel = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v = (v << 8) | u8(4 + 4 * d + static_cast<std::size_t>(b));
        arr.dims.push_back(v);
        numel *= v;
    }
    if (blob.size() != 4 + 4 * ndim + numel)
        throw ValidationError("'" + path + "' IDX payload size does not match its header");
    arr.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(4 + 4 * ndim), blob.end());
    return arr;
}

inline Batch idx_to_batch(const IdxArray& images, const IdxArray& labels, int classes, const std::string& where) {
    if (images.dims.size() != 3) throw ValidationError(where + ": image IDX must be rank 3 (count x rows x cols)");
    if (labels.dims.size() != 1) throw ValidationError(where + ": label IDX must be rank 1");
    if (images.dims[0] != labels.dims[0])
        throw ValidationError(where + ": image and label counts differ");
    const std::size_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
    if (n == 0) throw ValidationError(where + ": empty IDX dataset");
    Batch b;
    b.inputs.shape = {n, 1, h, w};
    b.inputs.data.resize(n * h * w);
    for (std::size_t i = 0; i < b.inputs.data.size(); ++i)
        b.inputs.data[i] = static_cast<double>(images.bytes[i]) / 255.0;
    b.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.labels[i] = labels.bytes[i];
        if (b.labels[i] >= classes)
            throw ValidationError(where + ": label " + std::to_string(b.labels[i]) + " >= classes " +
                                  std::to_string(classes) + " at sample " + std::to_string(i));
    }
    return b;
}

inline Batch take_rows(const Batch& src, const std::vector<std::size_t>& rows) {
    const std::size_t flat = src.inputs.numel() / src.labels.size();
    Batch out;
    out.inputs.shape = src.inputs.shape;
    out.inputs.shape[0] = rows.size();
    out.inputs.data.resize(rows.size() * flat);
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(src.inputs.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * flat), flat,
                    out.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * flat));
        out.labels[i] = src.labels[rows[i]];
    }
    return out;
}

} // namespace detail

// IDX (MNIST-layout) files. Either explicit test files or a seeded
// test_fraction split of the training pair.
//   idx classes=10 images=train-img labels=train-lab test_images=t-img test_labels=t-lab seed=7
inline Dataset load_idx_dataset(const detail::SpecArgs& args) {
    const int classes = static_cast<int>(args.get_int("classes"));
    if (classes < 2) throw ValidationError("idx dataset needs >= 2 classes");
    const std::uint64_t seed = static_cast<std::uint64_t>(args.get_int("seed"));

    Dataset ds;
    ds.class_count = classes;
    const auto images = detail::read_idx(args.get("images"));
    const auto labels = detail::read_idx(args.get("labels"));
    Batch full = detail::idx_to_batch(images, labels, classes, args.get("images"));

    if (args.has("test_images") != args.has("test_labels"))
        throw ValidationError("idx dataset needs both test_images and test_labels, or neither");
    if (args.has("test_images")) {
        ds.train = std::move(full);
        const auto ti = detail::read_idx(args.get("test_images"));
        const auto tl = detail::read_idx(args.get("test_labels"));
        ds.test = detail::idx_to_batch(ti, tl, classes, args.get("test_images"));
        if (ds.test.inputs.shape[2] != ds.train.inputs.shape[2] || ds.test.inputs.shape[3] != ds.train.inputs.shape[3])
            throw ValidationError("train and test IDX image sizes differ");
    } else {
        const double frac = args.has("test_fraction") ? args.get_real("test_fraction") : 0.2;
        if (!(frac > 0.0 && frac < 1.0)) throw ValidationError("test_fraction must lie in (0,1)");
        std::vector<std::size_t> rows(full.labels.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        SplitMix64 rng = substream(seed, detail::stream_split);
        shuffle(rows, rng);
        const std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(frac * rows.size() + 0.5));
        if (n_test >= rows.size()) throw ValidationError("test_fraction leaves no training data");
        ds.test = detail::take_rows(full, {rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test)});
        ds.train = detail::take_rows(full, {rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end()});
    }

    ds.channels = 1;
    ds.height = static_cast<int>(ds.train.inputs.shape[2]);
    ds.width = static_cast<int>(ds.train.inputs.shape[3]);

    const std::size_t n_test = ds.test.labels.size();
    const std::size_t flat = static_cast<std::size_t>(ds.height) * ds.width;
    SplitMix64 noise_rng = substream(seed, detail::stream_ood_noise);
    ds.ood_inputs = detail::noise_like(ds.test.inputs, n_test, flat, noise_rng);
    ds.ood_inputs.shape = {n_test, 1, static_cast<std::size_t>(ds.height), static_cast<std::size_t>(ds.width)};
    return ds;
}

// Dataset source line: `<kind> key=value ...` with kind one of gaussians,
// grid, idx.
inline Dataset load_dataset(const std::string& spec) {
    const auto args = detail::parse_spec_args(spec);
    if (args.kind == "gaussians") {
        return make_gaussian_mixture(static_cast<int>(args.get_int("classes")), static_cast<int>(args.get_int("dim")),
                                     static_cast<std::size_t>(args.get_int("train")),
                                     static_cast<std::size_t>(args.get_int("test")),
                                     args.has("sigma") ? args.get_real("sigma") : 0.08,
                                     static_cast<std::uint64_t>(args.get_int("seed")));
    }
    if (args.kind == "grid") {
        return make_grid_images(static_cast<int>(args.get_int("classes")), static_cast<int>(args.get_int("size")),
                                static_cast<std::size_t>(args.get_int("train")),
                                static_cast<std::size_t>(args.get_int("test")),
                                args.has("noise") ? args.get_real("noise") : 0.25,
                                static_cast<std::uint64_t>(args.get_int("seed")));
    }
    if (args.kind == "idx") return load_idx_dataset(args);
    throw ValidationError("unknown dataset kind '" + args.kind + "'");
}

// The network document must agree with the data's geometry and classes.
inline void check_dataset_matches(const Dataset& ds, const NetworkSpec& net) {
    if (ds.class_count != net.class_count)
        throw ValidationError("dataset has " + std::to_string(ds.class_count) + " classes but the network expects " +
                              std::to_string(net.class_count));
    const long long want = static_cast<long long>(net.input_channels) * net.input_height * net.input_width;
    const long long have = static_cast<long long>(ds.channels) * ds.height * ds.width;
    if (want != have)
        throw ValidationError("dataset inputs have " + std::to_string(have) + " values but the network expects " +
                              std::to_string(want));
}

} // namespace sparsekit
