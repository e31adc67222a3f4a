#include <atomic>
#include <cstring>
#include <vector>

#include "doctest.h"

#include "ilab/kernels.hpp"
#include "ilab/rng.hpp"

using namespace ilab;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& r) {
    std::vector<double> v(n);
    for (double& x : v) x = r.normal();
    return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("serial and openmp kernels agree bitwise on awkward shapes") {
    Rng r(123);
    const std::size_t shapes[][3] = {{1, 1, 1}, {3, 7, 5}, {17, 4, 33}, {64, 11, 3}, {128, 32, 64}};
    for (const auto& s : shapes) {
        const std::size_t m = s[0], k = s[1], n = s[2];
        const auto a = random_vec(m * k, r), b = random_vec(k * n, r);
        std::vector<double> c1(m * n), c2(m * n);
        kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n);
        kernels::par::matmul(a.data(), b.data(), c2.data(), m, k, n);
        CHECK(bitwise_equal(c1, c2));

        const auto bt = random_vec(n * k, r);
        kernels::serial::matmul_nt(a.data(), bt.data(), c1.data(), m, k, n);
        kernels::par::matmul_nt(a.data(), bt.data(), c2.data(), m, k, n);
        CHECK(bitwise_equal(c1, c2));

        const auto at = random_vec(k * m, r);
        kernels::serial::matmul_tn(at.data(), b.data(), c1.data(), m, k, n);
        kernels::par::matmul_tn(at.data(), b.data(), c2.data(), m, k, n);
        CHECK(bitwise_equal(c1, c2));
    }

    for (std::size_t rows : {1u, 5u, 129u, 1000u}) {
        const std::size_t cols = 13;
        const auto x = random_vec(rows * cols, r);
        std::vector<double> y1(rows * cols), y2(rows * cols);
        kernels::serial::log_softmax_rows(x.data(), y1.data(), rows, cols);
        kernels::par::log_softmax_rows(x.data(), y2.data(), rows, cols);
        CHECK(bitwise_equal(y1, y2));
        kernels::serial::layer_norm_rows(x.data(), y1.data(), rows, cols, 1e-5);
        kernels::par::layer_norm_rows(x.data(), y2.data(), rows, cols, 1e-5);
        CHECK(bitwise_equal(y1, y2));
    }
}

TEST_CASE("dispatched kernels match the serial reference") {
    Rng r(7);
    const std::size_t m = 96, k = 48, n = 80; // above the parallel cutover
    const auto a = random_vec(m * k, r), b = random_vec(k * n, r);
    std::vector<double> c1(m * n), c2(m * n);
    kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, n);
    kernels::matmul(a.data(), b.data(), c2.data(), m, k, n);
    CHECK(bitwise_equal(c1, c2));
}

TEST_CASE("parallel_for touches every index exactly once") {
    std::vector<std::atomic<int>> hits(1013);
    kernels::parallel_for(hits.size(), [&](std::size_t i) { hits[i].fetch_add(1); });
    for (const auto& h : hits) CHECK(h.load() == 1);
}

TEST_CASE("worker cap is at least one") { CHECK(kernels::max_threads() >= 1); }
