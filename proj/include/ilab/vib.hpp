#pragma once

#include <cstdint>
#include <vector>

#include "ilab/graph.hpp"
#include "ilab/rng.hpp"

namespace ilab {

// First-order autoregressive Gaussian prior p(z_i | z_{i-1}) =
// N(alpha * z_{i-1}, sigma_p^2 I) plus the beta anneal that weights its KL.
struct OuPriorConfig {
    double alpha = 0.95;
    double sigma_p = 0.5;
    double beta_max = 0.5;
    double warmup_fraction = 0.10;

    void validate() const;
};

// Per-step diagonal-Gaussian posterior parameters; mu_0 = 0 is the boundary
// condition for the first KL step.
struct IntentPosterior {
    std::vector<std::vector<double>> mu;
    std::vector<std::vector<double>> sigma;

    std::size_t steps() const { return mu.size(); }
    void validate() const;
};

struct IntentSample {
    std::vector<std::vector<double>> z;
};

enum class SampleMode { kTrainSample, kInferMean };

// z_i = mu_i + sigma_i (.) eps in train-sample mode, z_i = mu_i in
// infer-mean mode.
IntentSample sample_intent(const IntentPosterior& post, Rng rng, SampleMode mode);

// Closed form KL( N(mu_i, diag sigma_i^2) || N(alpha*mu_prev, sigma_p^2 I) ).
// mu_prev is treated as a constant; the graph variant applies stop-gradient
// internally so no caller can forget it.
double kl_ou_step(const std::vector<double>& mu_i, const std::vector<double>& sigma_i,
                  const std::vector<double>& mu_prev, const OuPriorConfig& cfg);

ValueRef kl_ou_step_node(Graph& g, ValueRef mu_i, ValueRef sigma_i, ValueRef mu_prev,
                         const OuPriorConfig& cfg);

// Sum of step KLs over an [N,d] posterior with mu_prev = stop_gradient of
// the previous row and mu_0 = 0.
double kl_ou_sequence(const IntentPosterior& post, const OuPriorConfig& cfg);

// frozen_prev, when given, replaces the detached shifted rows with a constant
// [N,d] snapshot (row 0 must be zero). At matching values the two graphs are
// numerically identical and share one gradient field; finite-difference
// oracles check against the frozen form, since differences on the live form
// would see through the detachment.
ValueRef kl_ou_sequence_node(Graph& g, ValueRef mu, ValueRef sigma, const OuPriorConfig& cfg,
                             const DenseArray* frozen_prev = nullptr);

// The shifted-and-masked prior-mean rows [0; mu_0; ...; mu_{n-2}].
DenseArray shifted_prev_rows(const IntentPosterior& post);

// Independent oracle for the closed form: draws z ~ q and averages
// log q(z) - log p(z) with both densities written out directly.
struct McKlEstimate {
    double estimate = 0.0;
    double stderr_ = 0.0;
};

McKlEstimate kl_monte_carlo(const std::vector<double>& mu_q, const std::vector<double>& sigma_q,
                            const std::vector<double>& mu_p, double sigma_p, std::int64_t n_samples,
                            Rng rng);

// 0 through the warm-up, then a half-period raised cosine up to beta_max.
double beta_schedule(std::int64_t step, std::int64_t total_steps, const OuPriorConfig& cfg);

} // namespace ilab
