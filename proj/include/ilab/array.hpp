#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ilab {

// Dense row-major array of 64-bit reals. Rank-1 arrays behave as a single
// row wherever a 2-D view is needed; a scalar is shape {1}.
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    DenseArray() = default;
    DenseArray(std::vector<std::size_t> s, std::vector<double> d);

    static DenseArray zeros(std::vector<std::size_t> s);
    static DenseArray full(std::vector<std::size_t> s, double v);
    static DenseArray scalar(double v);
    static DenseArray row(std::vector<double> v);

    std::size_t numel() const;
    std::size_t rows() const; // rank-1 -> 1
    std::size_t cols() const; // rank-1 -> shape[0]
    bool is_scalar() const { return numel() == 1; }

    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::string shape_str(const std::vector<std::size_t>& s);

// FNV-1a over the raw bytes of the values; used by freeze-contract checks.
std::uint64_t bitwise_hash(const DenseArray& a, std::uint64_t seed = 0xcbf29ce484222325ull);

} // namespace ilab
