// Times the serial reference kernels against their OpenMP variants and
// checks they agree bitwise. Sizes sweep from below to above the dispatch
// thresholds so the crossover is visible.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "ilab/kernels.hpp"
#include "ilab/rng.hpp"
#include "ilab/vib.hpp"

using namespace ilab;

static double wtime() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

template <class F>
static double time_best_of(int reps, F&& f) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const double t0 = wtime();
        f();
        best = std::min(best, wtime() - t0);
    }
    return best;
}

static bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

int main() {
    std::printf("workers: %d (cap with ILAB_THREADS)\n\n", kernels::max_threads());
    std::printf("%-22s %10s %12s %12s %9s %7s\n", "kernel", "size", "serial[ms]", "openmp[ms]",
                "speedup", "equal");

    Rng rng(42);
    for (std::size_t n : {64u, 128u, 256u, 512u}) {
        std::vector<double> a(n * n), b(n * n), c1(n * n), c2(n * n);
        for (double& v : a) v = rng.normal();
        for (double& v : b) v = rng.normal();
        const double ts = time_best_of(3, [&] {
            kernels::serial::matmul(a.data(), b.data(), c1.data(), n, n, n);
        });
        const double tp = time_best_of(3, [&] {
            kernels::par::matmul(a.data(), b.data(), c2.data(), n, n, n);
        });
        std::printf("%-22s %7zux%-3zu %12.3f %12.3f %8.2fx %7s\n", "matmul", n, n, ts * 1e3,
                    tp * 1e3, ts / tp, bitwise_equal(c1, c2) ? "yes" : "NO");
    }

    for (std::size_t rows : {1u << 12, 1u << 15}) {
        const std::size_t cols = 64;
        std::vector<double> x(rows * cols), y1(rows * cols), y2(rows * cols);
        for (double& v : x) v = rng.normal();
        const double ts = time_best_of(3, [&] {
            kernels::serial::log_softmax_rows(x.data(), y1.data(), rows, cols);
        });
        const double tp = time_best_of(3, [&] {
            kernels::par::log_softmax_rows(x.data(), y2.data(), rows, cols);
        });
        std::printf("%-22s %7zux%-3zu %12.3f %12.3f %8.2fx %7s\n", "log_softmax_rows", rows, cols,
                    ts * 1e3, tp * 1e3, ts / tp, bitwise_equal(y1, y2) ? "yes" : "NO");

        const double ts2 = time_best_of(3, [&] {
            kernels::serial::layer_norm_rows(x.data(), y1.data(), rows, cols, 1e-5);
        });
        const double tp2 = time_best_of(3, [&] {
            kernels::par::layer_norm_rows(x.data(), y2.data(), rows, cols, 1e-5);
        });
        std::printf("%-22s %7zux%-3zu %12.3f %12.3f %8.2fx %7s\n", "layer_norm_rows", rows, cols,
                    ts2 * 1e3, tp2 * 1e3, ts2 / tp2, bitwise_equal(y1, y2) ? "yes" : "NO");
    }

    // The Monte-Carlo KL oracle parallelizes over fixed chunks; the estimate
    // is bitwise-identical at any worker count, so only wall time moves.
    // With mu_prev = 0 the OU prior is N(0, sigma_p^2 I) for any alpha.
    const std::vector<double> mu_q{1.0, -0.5, 0.25}, sigma_q{0.5, 1.5, 0.8}, mu_p{0.0, 0.0, 0.0};
    const double t0 = wtime();
    const McKlEstimate est = kl_monte_carlo(mu_q, sigma_q, mu_p, 1.0, 1'000'000, Rng(7));
    std::printf("\nkl_monte_carlo: n=1e6, %d workers, %.3f ms, estimate %.6f (closed form %.6f)\n",
                kernels::max_threads(), (wtime() - t0) * 1e3, est.estimate,
                kl_ou_step(mu_q, sigma_q, mu_p, OuPriorConfig{0.5, 1.0, 0.5, 0.1}));
    return 0;
}
