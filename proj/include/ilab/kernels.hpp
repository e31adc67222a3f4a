#pragma once

#include <cstddef>

namespace ilab::kernels {

// Worker cap: ILAB_THREADS if set (clamped to >= 1), else the OpenMP
// default, else 1. Read once per process.
int max_threads();

// Dispatched entry points used by the graph and the model forward passes.
// They pick the OpenMP variant when the work amortizes the fork and the
// serial reference otherwise; both variants are bitwise-identical (each
// output element is produced by the same serial inner loop).
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
// c[m,n] = a[k,m]^T * b[k,n]
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c);
void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps);

namespace serial {
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c);
void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps);
} // namespace serial

namespace par {
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void log_softmax_rows(const double* x, double* y, std::size_t r, std::size_t c);
void layer_norm_rows(const double* x, double* y, std::size_t r, std::size_t c, double eps);
} // namespace par

// Runs f(i) for i in [0, n) across workers. Iterations must write disjoint
// slots; under that discipline the result is bitwise-independent of the
// thread count.
void parallel_for(std::size_t n, const void* ctx, void (*f)(const void*, std::size_t));

template <class F>
void parallel_for(std::size_t n, F&& f) {
    const F& fn = f;
    parallel_for(n, static_cast<const void*>(&fn),
                 [](const void* ctx, std::size_t i) { (*static_cast<const F*>(ctx))(i); });
}

} // namespace ilab::kernels
