#include "ilab/vib.hpp"

#include <cmath>
#include <string>

#include "ilab/kernels.hpp"

namespace ilab {

void OuPriorConfig::validate() const {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ContractViolation("OU alpha must lie in (0,1), got " + std::to_string(alpha));
    if (!(sigma_p > 0.0))
        throw ContractViolation("OU sigma_p must be positive, got " + std::to_string(sigma_p));
    if (beta_max < 0.0)
        throw ContractViolation("beta_max must be nonnegative");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
        throw ContractViolation("warmup_fraction must lie in [0,1)");
}

void IntentPosterior::validate() const {
    if (mu.size() != sigma.size())
        throw ContractViolation("posterior mu/sigma lengths differ: " + std::to_string(mu.size()) +
                                " vs " + std::to_string(sigma.size()));
    if (mu.empty()) throw ContractViolation("posterior must have at least one step");
    const std::size_t d = mu[0].size();
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (mu[i].size() != d || sigma[i].size() != d)
            throw ContractViolation("posterior step " + std::to_string(i) + " has inconsistent dim");
        for (double s : sigma[i])
            if (!(s > 0.0)) throw ContractViolation("posterior sigma must be positive");
    }
}

IntentSample sample_intent(const IntentPosterior& post, Rng rng, SampleMode mode) {
    post.validate();
    IntentSample out;
    out.z.resize(post.steps());
    for (std::size_t i = 0; i < post.steps(); ++i) {
        out.z[i] = post.mu[i];
        if (mode == SampleMode::kTrainSample)
            for (std::size_t k = 0; k < out.z[i].size(); ++k)
                out.z[i][k] += post.sigma[i][k] * rng.normal();
    }
    return out;
}

double kl_ou_step(const std::vector<double>& mu_i, const std::vector<double>& sigma_i,
                  const std::vector<double>& mu_prev, const OuPriorConfig& cfg) {
    cfg.validate();
    if (mu_i.size() != sigma_i.size() || mu_i.size() != mu_prev.size())
        throw ContractViolation("kl_ou_step dims differ");
    const double sp2 = cfg.sigma_p * cfg.sigma_p;
    double kl = 0.0;
    for (std::size_t k = 0; k < mu_i.size(); ++k) {
        const double s = sigma_i[k];
        if (!(s > 0.0)) throw ContractViolation("kl_ou_step needs positive sigma");
        const double s2 = s * s;
        const double d = mu_i[k] - cfg.alpha * mu_prev[k];
        kl += 0.5 * (std::log(sp2 / s2) + (s2 + d * d) / sp2 - 1.0);
    }
    return kl;
}

ValueRef kl_ou_step_node(Graph& g, ValueRef mu_i, ValueRef sigma_i, ValueRef mu_prev,
                         const OuPriorConfig& cfg) {
    cfg.validate();
    const DenseArray& sv = g.value(sigma_i);
    for (double s : sv.data)
        if (!(s > 0.0)) throw ContractViolation("kl_ou_step needs positive sigma");
    const double sp2 = cfg.sigma_p * cfg.sigma_p;
    ValueRef prev = g.stop_gradient(mu_prev);
    ValueRef diff = g.sub(mu_i, g.scale(prev, cfg.alpha));
    ValueRef s2 = g.square(sigma_i);
    ValueRef quad = g.scale(g.add(s2, g.square(diff)), 1.0 / sp2);
    ValueRef terms = g.add_const(g.add(g.scale(g.log(s2), -1.0), quad), std::log(sp2) - 1.0);
    return g.scale(g.sum(terms), 0.5);
}

double kl_ou_sequence(const IntentPosterior& post, const OuPriorConfig& cfg) {
    post.validate();
    const std::size_t d = post.mu[0].size();
    std::vector<double> zero(d, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < post.steps(); ++i)
        total += kl_ou_step(post.mu[i], post.sigma[i], i == 0 ? zero : post.mu[i - 1], cfg);
    return total;
}

ValueRef kl_ou_sequence_node(Graph& g, ValueRef mu, ValueRef sigma, const OuPriorConfig& cfg,
                             const DenseArray* frozen_prev) {
    cfg.validate();
    const DenseArray& mv = g.value(mu);
    if (!mv.same_shape(g.value(sigma)))
        throw ContractViolation("posterior mu/sigma shapes differ: " + shape_str(mv.shape) +
                                " vs " + shape_str(g.value(sigma).shape));
    ValueRef prev;
    if (frozen_prev) {
        if (!frozen_prev->same_shape(mv))
            throw ContractViolation("frozen prior rows have shape " +
                                    shape_str(frozen_prev->shape) + ", expected " +
                                    shape_str(mv.shape));
        prev = g.constant(*frozen_prev);
    } else {
        const std::size_t n = mv.rows();
        // Rows shifted down one step; row 0 is masked to the mu_0 = 0 boundary.
        std::vector<int> shifted(n);
        shifted[0] = 0;
        for (std::size_t i = 1; i < n; ++i) shifted[i] = static_cast<int>(i - 1);
        DenseArray mask = DenseArray::full(mv.shape, 1.0);
        for (std::size_t j = 0; j < mv.cols(); ++j) mask.at(0, j) = 0.0;
        prev = g.mul(g.gather_rows(mu, shifted), g.constant(std::move(mask)));
    }
    return kl_ou_step_node(g, mu, sigma, prev, cfg);
}

DenseArray shifted_prev_rows(const IntentPosterior& post) {
    post.validate();
    const std::size_t n = post.steps(), d = post.mu[0].size();
    DenseArray out = DenseArray::zeros({n, d});
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) out.at(i, k) = post.mu[i - 1][k];
    return out;
}

McKlEstimate kl_monte_carlo(const std::vector<double>& mu_q, const std::vector<double>& sigma_q,
                            const std::vector<double>& mu_p, double sigma_p, std::int64_t n_samples,
                            Rng rng) {
    if (n_samples < 10000)
        throw ContractViolation("kl_monte_carlo needs at least 1e4 samples");
    if (mu_q.size() != sigma_q.size() || mu_q.size() != mu_p.size())
        throw ContractViolation("kl_monte_carlo dims differ");
    if (!(sigma_p > 0.0)) throw ContractViolation("kl_monte_carlo needs positive sigma_p");
    for (double s : sigma_q)
        if (!(s > 0.0)) throw ContractViolation("kl_monte_carlo needs positive sigma_q");

    const std::size_t d = mu_q.size();
    constexpr std::int64_t kChunk = 1 << 13;
    const std::size_t n_chunks = static_cast<std::size_t>((n_samples + kChunk - 1) / kChunk);
    std::vector<double> part_sum(n_chunks, 0.0), part_sq(n_chunks, 0.0);

    // Fixed-size chunks with per-chunk streams keep the reduction order (and
    // therefore the result bits) independent of the worker count.
    kernels::parallel_for(n_chunks, [&](std::size_t ci) {
        Rng local = rng.stream(static_cast<std::uint64_t>(ci));
        const std::int64_t lo = static_cast<std::int64_t>(ci) * kChunk;
        const std::int64_t hi = std::min(n_samples, lo + kChunk);
        double acc = 0.0, acc2 = 0.0;
        for (std::int64_t s = lo; s < hi; ++s) {
            double lq = 0.0, lp = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double z = mu_q[k] + sigma_q[k] * local.normal();
                const double dq = (z - mu_q[k]) / sigma_q[k];
                const double dp = (z - mu_p[k]) / sigma_p;
                lq += -std::log(sigma_q[k]) - 0.5 * dq * dq;
                lp += -std::log(sigma_p) - 0.5 * dp * dp;
            }
            const double r = lq - lp; // the 2*pi normalizers cancel
            acc += r;
            acc2 += r * r;
        }
        part_sum[ci] = acc;
        part_sq[ci] = acc2;
    });

    double total = 0.0, total_sq = 0.0;
    for (std::size_t ci = 0; ci < n_chunks; ++ci) {
        total += part_sum[ci];
        total_sq += part_sq[ci];
    }
    const double n = static_cast<double>(n_samples);
    McKlEstimate out;
    out.estimate = total / n;
    const double var = std::max(0.0, total_sq / n - out.estimate * out.estimate);
    out.stderr_ = std::sqrt(var / n);
    return out;
}

double beta_schedule(std::int64_t step, std::int64_t total_steps, const OuPriorConfig& cfg) {
    cfg.validate();
    if (total_steps <= 0) throw ContractViolation("beta_schedule needs total_steps > 0");
    if (step < 0 || step > total_steps)
        throw ContractViolation("beta_schedule step out of [0, total_steps]");
    const double tw = cfg.warmup_fraction * static_cast<double>(total_steps);
    if (static_cast<double>(step) < tw) return 0.0;
    const double span = static_cast<double>(total_steps) - tw;
    const double x = span > 0.0 ? (static_cast<double>(step) - tw) / span : 1.0;
    constexpr double pi = 3.14159265358979323846;
    return cfg.beta_max * 0.5 * (1.0 - std::cos(pi * x));
}

} // namespace ilab
