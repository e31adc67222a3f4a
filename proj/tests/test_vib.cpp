#include <cmath>
#include <vector>

#include "doctest.h"

#include "ilab/graph.hpp"
#include "ilab/rng.hpp"
#include "ilab/vib.hpp"

using namespace ilab;

namespace {

OuPriorConfig paper_prior() { return OuPriorConfig{0.95, 0.5, 0.5, 0.10}; }

} // namespace

TEST_CASE("ou prior config rejects invalid parameters") {
    CHECK_THROWS_AS((OuPriorConfig{1.0, 0.5, 0.5, 0.1}.validate()), ContractViolation);
    CHECK_THROWS_AS((OuPriorConfig{0.95, 0.0, 0.5, 0.1}.validate()), ContractViolation);
    CHECK_THROWS_AS((OuPriorConfig{0.95, 0.5, 0.5, 1.0}.validate()), ContractViolation);
    CHECK_NOTHROW(paper_prior().validate());
}

TEST_CASE("matched Gaussians have zero divergence") {
    OuPriorConfig cfg{0.7, 1.3, 0.5, 0.1};
    const std::vector<double> mu_prev{0.4, -1.0, 2.0};
    std::vector<double> mu_i(3), sigma_i(3, cfg.sigma_p);
    for (int k = 0; k < 3; ++k) mu_i[k] = cfg.alpha * mu_prev[k];
    CHECK(kl_ou_step(mu_i, sigma_i, mu_prev, cfg) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("worked closed-form cases") {
    // 0.5*[log(1/1) + (1 + (0 - 0.5*2)^2)/1 - 1] = 0.5
    CHECK(kl_ou_step({0.0}, {1.0}, {2.0}, OuPriorConfig{0.5, 1.0, 0.5, 0.1}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    // 0.5*[log(0.25/0.25) + (0.25 + 1)/0.25 - 1] = 2.0
    CHECK(kl_ou_step({1.0}, {0.5}, {0.0}, paper_prior()) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("kl is nonnegative over random parameterizations") {
    Rng r(404);
    for (int t = 0; t < 10000; ++t) {
        OuPriorConfig cfg{0.05 + 0.9 * r.uniform(), 0.1 + 9.9 * r.uniform(), 0.5, 0.1};
        const std::size_t d = 1 + static_cast<std::size_t>(r.uniform_int(4));
        std::vector<double> mu_i(d), sigma_i(d), mu_prev(d);
        for (std::size_t k = 0; k < d; ++k) {
            mu_i[k] = 4.0 * r.normal();
            mu_prev[k] = 4.0 * r.normal();
            sigma_i[k] = 0.1 + 9.9 * r.uniform();
        }
        CHECK(kl_ou_step(mu_i, sigma_i, mu_prev, cfg) >= 0.0);
    }
}

TEST_CASE("monte-carlo oracle reproduces the worked cases within 2 percent") {
    const McKlEstimate a = kl_monte_carlo({0.0}, {1.0}, {0.5 * 2.0}, 1.0, 1000000, Rng(11));
    CHECK(std::abs(a.estimate - 0.5) / 0.5 < 0.02);
    const McKlEstimate b = kl_monte_carlo({1.0}, {0.5}, {0.0}, 0.5, 1000000, Rng(12));
    CHECK(std::abs(b.estimate - 2.0) / 2.0 < 0.02);
}

TEST_CASE("monte-carlo estimate of identical distributions is zero within noise") {
    const std::vector<double> mu{0.3, -0.7}, sigma{0.8, 0.8};
    const McKlEstimate e = kl_monte_carlo(mu, sigma, mu, 0.8, 100000, Rng(5));
    CHECK(std::abs(e.estimate) < 5.0 * std::max(e.stderr_, 1e-12));
}

TEST_CASE("monte-carlo error shrinks like one over sqrt(n)") {
    const std::vector<double> mu_q{1.0}, sigma_q{1.5}, mu_prev{-0.5};
    const OuPriorConfig cfg{0.5, 1.0, 0.5, 0.1};
    const double truth = kl_ou_step(mu_q, sigma_q, mu_prev, cfg);
    const std::vector<double> prior_mean{cfg.alpha * mu_prev[0]};
    auto rms_err = [&](std::int64_t n, std::uint64_t base) {
        double acc = 0.0;
        const int reps = 12;
        for (int i = 0; i < reps; ++i) {
            const McKlEstimate e =
                kl_monte_carlo(mu_q, sigma_q, prior_mean, cfg.sigma_p, n, Rng(base + i));
            acc += (e.estimate - truth) * (e.estimate - truth);
        }
        return std::sqrt(acc / reps);
    };
    const double e4 = rms_err(10000, 100);
    const double e6 = rms_err(1000000, 200);
    // expect ~10x shrink across two decades; allow a factor-3 band
    CHECK(e6 < e4 / 3.0);
}

TEST_CASE("monte-carlo contract checks") {
    CHECK_THROWS_AS((void)kl_monte_carlo({0.0}, {1.0}, {0.0}, 1.0, 100, Rng(1)),
                    ContractViolation);
    CHECK_THROWS_AS((void)kl_monte_carlo({0.0}, {-1.0}, {0.0}, 1.0, 10000, Rng(1)),
                    ContractViolation);
}

TEST_CASE("closed form tracks the oracle over random cases") {
    Rng r(777);
    for (int c = 0; c < 6; ++c) {
        const std::size_t d = 1 + static_cast<std::size_t>(r.uniform_int(3));
        OuPriorConfig cfg{0.05 + 0.9 * r.uniform(), 0.1 + 2.0 * r.uniform(), 0.5, 0.1};
        std::vector<double> mu_i(d), sigma_i(d), mu_prev(d), prior_mean(d);
        for (std::size_t k = 0; k < d; ++k) {
            mu_i[k] = 2.0 * r.normal();
            mu_prev[k] = 2.0 * r.normal();
            sigma_i[k] = 0.3 + 2.0 * r.uniform();
            prior_mean[k] = cfg.alpha * mu_prev[k];
        }
        const double closed = kl_ou_step(mu_i, sigma_i, mu_prev, cfg);
        const McKlEstimate mc =
            kl_monte_carlo(mu_i, sigma_i, prior_mean, cfg.sigma_p, 200000, Rng(9000 + c));
        CHECK(std::abs(mc.estimate - closed) < std::max(0.03 * closed, 6.0 * mc.stderr_));
    }
}

TEST_CASE("sequence kl reduces to the single-step form at the boundary") {
    IntentPosterior post;
    post.mu = {{0.7, -0.2}};
    post.sigma = {{0.6, 1.1}};
    const OuPriorConfig cfg = paper_prior();
    CHECK(kl_ou_sequence(post, cfg) ==
          doctest::Approx(kl_ou_step(post.mu[0], post.sigma[0], {0.0, 0.0}, cfg)).epsilon(1e-14));
}

TEST_CASE("appending a prior-matched step adds exactly zero") {
    Rng r(31);
    const OuPriorConfig cfg = paper_prior();
    IntentPosterior post;
    for (int i = 0; i < 4; ++i) {
        post.mu.push_back({r.normal(), r.normal()});
        post.sigma.push_back({0.2 + r.uniform(), 0.2 + r.uniform()});
    }
    const double before = kl_ou_sequence(post, cfg);
    std::vector<double> matched(2);
    for (int k = 0; k < 2; ++k) matched[k] = cfg.alpha * post.mu.back()[k];
    post.mu.push_back(matched);
    post.sigma.push_back({cfg.sigma_p, cfg.sigma_p});
    CHECK(kl_ou_sequence(post, cfg) == doctest::Approx(before).epsilon(1e-13));
}

TEST_CASE("with sigma pinned to the prior the kl is the temporal penalty") {
    Rng r(55);
    const OuPriorConfig cfg = paper_prior();
    IntentPosterior post;
    const std::size_t n = 5, d = 3;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> mu(d), sg(d, cfg.sigma_p);
        for (auto& v : mu) v = r.normal();
        post.mu.push_back(mu);
        post.sigma.push_back(sg);
    }
    double penalty = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            const double prev = i == 0 ? 0.0 : post.mu[i - 1][k];
            const double diff = post.mu[i][k] - cfg.alpha * prev;
            penalty += diff * diff;
        }
    penalty /= 2.0 * cfg.sigma_p * cfg.sigma_p;
    CHECK(kl_ou_sequence(post, cfg) == doctest::Approx(penalty).epsilon(1e-12));
}

TEST_CASE("graph sequence kl equals the sum of plain steps and detaches the past") {
    Rng r(66);
    const OuPriorConfig cfg = paper_prior();
    const std::size_t n = 4, d = 3;
    DenseArray mu = DenseArray::zeros({n, d});
    DenseArray logv = DenseArray::zeros({n, d});
    for (double& v : mu.data) v = r.normal();
    for (double& v : logv.data) v = 0.5 * r.normal();

    ParamStore params;
    params.add("mu", mu);
    params.add("logv", logv);
    auto build = [&cfg](Graph& g, const ParamStore& p) {
        ValueRef m = g.param("mu", p.get("mu"), true);
        ValueRef s = g.exp(g.scale(g.param("logv", p.get("logv"), true), 0.5));
        return kl_ou_sequence_node(g, m, s, cfg);
    };

    Graph g;
    ValueRef loss = build(g, params);
    IntentPosterior post;
    for (std::size_t i = 0; i < n; ++i) {
        post.mu.emplace_back(mu.data.begin() + i * d, mu.data.begin() + (i + 1) * d);
        std::vector<double> sg(d);
        for (std::size_t k = 0; k < d; ++k) sg[k] = std::exp(0.5 * logv.at(i, k));
        post.sigma.push_back(sg);
    }
    CHECK(g.scalar_value(loss) == doctest::Approx(kl_ou_sequence(post, cfg)).epsilon(1e-12));

    // Gradients agree with finite differences even though each mu row also
    // appears, detached, as the next step's prior mean: reverse mode must see
    // only the non-detached path.
    CHECK(finite_diff_check(build, params, {"logv"}, 1e-5) < 1e-6);
    GradMap grads = g.backward(loss);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) {
            // analytic d/dmu through the current step only
            const double prev = i == 0 ? 0.0 : mu.at(i - 1, k);
            const double sp2 = cfg.sigma_p * cfg.sigma_p;
            const double expected = (mu.at(i, k) - cfg.alpha * prev) / sp2;
            CHECK(grads.at("mu").at(i, k) == doctest::Approx(expected).epsilon(1e-10));
        }
}

TEST_CASE("detached prior mean carries exactly zero gradient while the value still matters") {
    const OuPriorConfig cfg = paper_prior();
    ParamStore params;
    params.add("mu1", DenseArray::row({0.8, -0.3}));
    params.add("mu2", DenseArray::row({0.1, 0.5}));
    params.add("sigma2", DenseArray::row({0.7, 0.9}));
    auto build = [&cfg](Graph& g, const ParamStore& p) {
        ValueRef mu1 = g.param("mu1", p.get("mu1"), true);
        ValueRef mu2 = g.param("mu2", p.get("mu2"), true);
        ValueRef s2 = g.param("sigma2", p.get("sigma2"), true);
        return kl_ou_step_node(g, mu2, s2, mu1, cfg);
    };
    Graph g;
    ValueRef loss = build(g, params);
    GradMap grads = g.backward(loss);
    for (double v : grads.at("mu1").data) CHECK(v == 0.0);
    for (double v : grads.at("mu2").data) CHECK(v != 0.0);

    // finite differences through the detached branch are decidedly nonzero
    ParamStore probe = params;
    probe.mutable_get("mu1").data[0] += 1e-5;
    Graph gp;
    const double fp = gp.scalar_value(build(gp, probe));
    probe.mutable_get("mu1").data[0] -= 2e-5;
    Graph gm;
    const double fm = gm.scalar_value(build(gm, probe));
    CHECK(std::abs((fp - fm) / 2e-5) > 1e-3);
}

TEST_CASE("sampling follows the posterior") {
    IntentPosterior post;
    post.mu = {{1.0, -2.0}};
    post.sigma = {{1e-12, 1e-12}};
    IntentSample z = sample_intent(post, Rng(3), SampleMode::kTrainSample);
    CHECK(z.z[0][0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(z.z[0][1] == doctest::Approx(-2.0).epsilon(1e-9));

    post.sigma = {{0.5, 2.0}};
    IntentSample a = sample_intent(post, Rng(4), SampleMode::kTrainSample);
    IntentSample b = sample_intent(post, Rng(4), SampleMode::kTrainSample);
    CHECK(a.z[0][0] == b.z[0][0]); // same stream, same bits
    IntentSample mean = sample_intent(post, Rng(4), SampleMode::kInferMean);
    CHECK(mean.z[0][0] == 1.0);
    CHECK(mean.z[0][1] == -2.0);
}

TEST_CASE("sample mean concentrates at mu") {
    IntentPosterior post;
    post.mu = {{0.7, -1.3}};
    post.sigma = {{0.9, 1.7}};
    const int n = 100000;
    Rng r(21);
    double acc0 = 0.0, acc1 = 0.0;
    for (int i = 0; i < n; ++i) {
        IntentSample z = sample_intent(post, r.stream(static_cast<std::uint64_t>(i)),
                                       SampleMode::kTrainSample);
        acc0 += z.z[0][0];
        acc1 += z.z[0][1];
    }
    acc0 /= n;
    acc1 /= n;
    CHECK(std::abs(acc0 - 0.7) < 3.0 * 0.9 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(acc1 + 1.3) < 3.0 * 1.7 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("beta schedule anchors, midpoint, and monotonicity") {
    const OuPriorConfig cfg = paper_prior();
    const std::int64_t total = 1000;
    CHECK(beta_schedule(0, total, cfg) == 0.0);
    CHECK(beta_schedule(99, total, cfg) == 0.0);   // still inside the warm-up
    CHECK(beta_schedule(100, total, cfg) == 0.0);  // continuous at the boundary
    CHECK(beta_schedule(550, total, cfg) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(beta_schedule(total, total, cfg) == doctest::Approx(0.5).epsilon(1e-12));
    double prev = -1.0;
    for (std::int64_t s = 0; s <= total; ++s) {
        const double b = beta_schedule(s, total, cfg);
        CHECK(b >= prev);
        prev = b;
    }
    CHECK_THROWS_AS((void)beta_schedule(0, 0, cfg), ContractViolation);
    CHECK_THROWS_AS((void)beta_schedule(11, 10, cfg), ContractViolation);
}

TEST_CASE("nonpositive sigma is rejected") {
    CHECK_THROWS_AS((void)kl_ou_step({0.0}, {0.0}, {0.0}, paper_prior()), ContractViolation);
    IntentPosterior post;
    post.mu = {{0.0}};
    post.sigma = {{-1.0}};
    CHECK_THROWS_AS(post.validate(), ContractViolation);
}
