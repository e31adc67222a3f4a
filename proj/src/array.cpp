#include "ilab/array.hpp"

#include <cmath>
#include <cstring>

#include "ilab/faults.hpp"

namespace ilab {

static std::size_t product(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

DenseArray::DenseArray(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape.empty() || shape.size() > 2)
        throw ContractViolation("DenseArray rank must be 1 or 2, got shape " + shape_str(shape));
    for (std::size_t e : shape)
        if (e == 0) throw ContractViolation("DenseArray extent must be positive, got shape " + shape_str(shape));
    if (product(shape) != data.size())
        throw ContractViolation("DenseArray shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
}

DenseArray DenseArray::zeros(std::vector<std::size_t> s) {
    std::size_t n = product(s);
    return DenseArray(std::move(s), std::vector<double>(n, 0.0));
}

DenseArray DenseArray::full(std::vector<std::size_t> s, double v) {
    std::size_t n = product(s);
    return DenseArray(std::move(s), std::vector<double>(n, v));
}

DenseArray DenseArray::scalar(double v) { return DenseArray({1}, {v}); }

DenseArray DenseArray::row(std::vector<double> v) {
    std::size_t n = v.size();
    return DenseArray({1, n}, std::move(v));
}

std::size_t DenseArray::numel() const { return data.size(); }

std::size_t DenseArray::rows() const { return shape.size() == 1 ? 1 : shape[0]; }

std::size_t DenseArray::cols() const { return shape.size() == 1 ? shape[0] : shape[1]; }

double& DenseArray::at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }

double DenseArray::at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

bool DenseArray::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::uint64_t bitwise_hash(const DenseArray& a, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (double v : a.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

} // namespace ilab
