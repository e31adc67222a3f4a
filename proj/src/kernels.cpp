#include "ilab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ilab::kernels {

int max_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("ILAB_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
#ifdef _OPENMP
        return std::max(1, omp_get_max_threads());
#else
        return 1;
#endif
    }();
    return n;
}

namespace serial {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

static void log_softmax_row(const double* x, double* y, std::size_t c) {
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
}

void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r; ++i) log_softmax_row(x + i * c, y + i * c, c);
}

static void layer_norm_row(const double* x, double* y, std::size_t c, double eps) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        const double d = x[j] - mu;
        var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) y[j] = (x[j] - mu) * inv;
}

void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps) {
    for (std::size_t i = 0; i < r; ++i) layer_norm_row(x + i * c, y + i * c, c, eps);
}

} // namespace serial

namespace par {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
        serial::matmul(a + i * k, b, c + i * n, 1, k, n);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
        serial::matmul_nt(a + i * k, b, c + i * n, 1, k, n);
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(r); ++i)
        serial::log_softmax_rows(x + i * c, y + i * c, 1, c);
}

void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(max_threads())
#endif
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(r); ++i)
        serial::layer_norm_rows(x + i * c, y + i * c, 1, c, eps);
}

} // namespace par

// Work thresholds: below these the fork costs more than the loop.
static constexpr std::size_t kMatmulFlopCut = 1u << 16;
static constexpr std::size_t kRowWorkCut = 1u << 14;

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    if (max_threads() > 1 && m > 1 && m * k * n >= kMatmulFlopCut)
        par::matmul(a, b, c, m, k, n);
    else
        serial::matmul(a, b, c, m, k, n);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (max_threads() > 1 && m > 1 && m * k * n >= kMatmulFlopCut)
        par::matmul_nt(a, b, c, m, k, n);
    else
        serial::matmul_nt(a, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (max_threads() > 1 && m > 1 && m * k * n >= kMatmulFlopCut)
        par::matmul_tn(a, b, c, m, k, n);
    else
        serial::matmul_tn(a, b, c, m, k, n);
}

void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c) {
    if (max_threads() > 1 && r > 1 && r * c >= kRowWorkCut)
        par::log_softmax_rows(x, y, r, c);
    else
        serial::log_softmax_rows(x, y, r, c);
}

void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps) {
    if (max_threads() > 1 && r > 1 && r * c >= kRowWorkCut)
        par::layer_norm_rows(x, y, r, c, eps);
    else
        serial::layer_norm_rows(x, y, r, c, eps);
}

void parallel_for(std::size_t n, const void* ctx, void (*f)(const void*, std::size_t)) {
#ifdef _OPENMP
    if (max_threads() > 1 && n > 1) {
#pragma omp parallel for schedule(dynamic, 1) num_threads(max_threads())
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
            f(ctx, static_cast<std::size_t>(i));
        return;
    }
#endif
    for (std::size_t i = 0; i < n; ++i) f(ctx, i);
}

} // namespace ilab::kernels
