#pragma once

#include <cstddef>
#include <vector>

namespace sparsekit {

// Dense row-major tensor of doubles. Shapes are plain vectors; layers index
// into the flat buffer with explicit offset arithmetic.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    std::size_t numel() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    void fill(double v) { data.assign(data.size(), v); }

    bool operator==(const Tensor&) const = default;
};

} // namespace sparsekit
