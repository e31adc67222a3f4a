#include "ilab/uapo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"

#include "ilab/callcount.hpp"

namespace ilab {

void UapoConfig::validate() const {
    if (!(lambda > 0.0)) throw ContractViolation("uapo lambda must be positive");
    if (steps < 1 || batch_size < 1 || !(lr > 0.0))
        throw ContractViolation("uapo needs steps >= 1, batch_size >= 1, lr > 0");
}

double policy_utility(const ToyModel& policy, const Utterance& u, const std::vector<int>& tokens,
                      double lambda) {
    if (tokens.empty()) throw ContractViolation("policy utility needs a nonempty sequence");
    const std::vector<double> lp = policy.rescore(u, tokens);
    double s = 0.0;
    for (double v : lp) s += v;
    return lambda / static_cast<double>(tokens.size()) * s;
}

ValueRef policy_utility_node(Graph& g, const ToyModel::Bound& b, const ToyModel& policy,
                             const Utterance& u, const std::vector<int>& tokens, double lambda) {
    if (tokens.empty()) throw ContractViolation("policy utility needs a nonempty sequence");
    ValueRef lp = policy.build_sequence_logprob(g, b, u, tokens);
    return g.scale(g.sum(lp), lambda / static_cast<double>(tokens.size()));
}

namespace {

double logsumexp(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// lse over scalar utility nodes with the running max subtracted as a
// constant; the gradient is the exact softmax either way.
ValueRef logsumexp_node(Graph& g, const std::vector<ValueRef>& us) {
    double m = g.scalar_value(us[0]);
    for (ValueRef u : us) m = std::max(m, g.scalar_value(u));
    ValueRef total{};
    for (std::size_t i = 0; i < us.size(); ++i) {
        ValueRef e = g.exp(g.add_const(us[i], -m));
        total = i == 0 ? e : g.add(total, e);
    }
    return g.add_const(g.log(total), m);
}

} // namespace

double loss_win(const std::vector<double>& winner_utilities, double anchor_utility) {
    if (winner_utilities.empty()) throw ContractViolation("loss_win needs at least one winner");
    std::vector<double> pool = winner_utilities;
    pool.push_back(anchor_utility);
    const double lse = logsumexp(pool);
    double out = 0.0;
    for (double u : winner_utilities) out += lse - u;
    return out;
}

double loss_lose(const std::vector<double>& loser_utilities, double anchor_utility) {
    if (loser_utilities.empty()) throw ContractViolation("loss_lose needs at least one loser");
    std::vector<double> pool = loser_utilities;
    pool.push_back(anchor_utility);
    return logsumexp(pool) - anchor_utility;
}

ValueRef loss_win_node(Graph& g, const std::vector<ValueRef>& winner_utilities,
                       ValueRef anchor_utility) {
    if (winner_utilities.empty()) throw ContractViolation("loss_win needs at least one winner");
    std::vector<ValueRef> pool = winner_utilities;
    pool.push_back(anchor_utility);
    ValueRef lse = logsumexp_node(g, pool);
    ValueRef sum_w{};
    for (std::size_t i = 0; i < winner_utilities.size(); ++i)
        sum_w = i == 0 ? winner_utilities[i] : g.add(sum_w, winner_utilities[i]);
    return g.sub(g.scale(lse, static_cast<double>(winner_utilities.size())), sum_w);
}

ValueRef loss_lose_node(Graph& g, const std::vector<ValueRef>& loser_utilities,
                        ValueRef anchor_utility) {
    if (loser_utilities.empty()) throw ContractViolation("loss_lose needs at least one loser");
    std::vector<ValueRef> pool = loser_utilities;
    pool.push_back(anchor_utility);
    return g.sub(logsumexp_node(g, pool), anchor_utility);
}

void UapoTrace::save_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    for (const Entry& e : entries) {
        nlohmann::ordered_json j;
        j["step"] = e.step;
        j["L_w"] = e.l_w;
        j["L_l"] = e.l_l;
        j["L_UAPO"] = e.l_uapo;
        j["mean_winner_u"] = e.mean_winner_u;
        j["mean_loser_u"] = e.mean_loser_u;
        j["anchor_u"] = e.anchor_u;
        out << j.dump() << "\n";
    }
}

UapoTrace::Entry uapo_step(ToyModel& policy, const std::vector<const PreferenceTuple*>& batch,
                           const std::vector<Utterance>& corpus, const UapoConfig& cfg,
                           SgdMomentum& opt, int step) {
    callcount::bump(callcount::kUapoStep);
    cfg.validate();
    if (batch.empty()) throw ContractViolation("uapo_step needs a nonempty batch");

    std::map<int, const Utterance*> by_id;
    for (const Utterance& u : corpus) by_id[u.id] = &u;

    Graph g;
    ToyModel::Bound bound = policy.bind(g, policy.stage1_trainable());

    UapoTrace::Entry entry{};
    entry.step = step;
    int n_winner = 0, n_loser = 0;
    ValueRef total{};
    for (std::size_t ti = 0; ti < batch.size(); ++ti) {
        const PreferenceTuple& t = *batch[ti];
        t.validate();
        auto it = by_id.find(t.input_id);
        if (it == by_id.end())
            throw ContractViolation("replay tuple references unknown input id " +
                                    std::to_string(t.input_id));
        const Utterance& u = *it->second;

        ValueRef anchor_u =
            policy_utility_node(g, bound, policy, u, t.anchor.speech_tokens, cfg.lambda);
        if (cfg.detach_anchor) anchor_u = g.stop_gradient(anchor_u);
        std::vector<ValueRef> winners, losers;
        for (const Rollout& w : t.winners)
            winners.push_back(policy_utility_node(g, bound, policy, u, w.speech_tokens, cfg.lambda));
        for (const Rollout& l : t.losers)
            losers.push_back(policy_utility_node(g, bound, policy, u, l.speech_tokens, cfg.lambda));

        ValueRef lw = loss_win_node(g, winners, anchor_u);
        ValueRef ll = loss_lose_node(g, losers, anchor_u);
        ValueRef tuple_loss = g.add(lw, ll);
        total = ti == 0 ? tuple_loss : g.add(total, tuple_loss);

        entry.l_w += g.scalar_value(lw);
        entry.l_l += g.scalar_value(ll);
        entry.anchor_u += g.scalar_value(anchor_u);
        for (ValueRef w : winners) entry.mean_winner_u += g.scalar_value(w);
        for (ValueRef l : losers) entry.mean_loser_u += g.scalar_value(l);
        n_winner += static_cast<int>(winners.size());
        n_loser += static_cast<int>(losers.size());
    }
    ValueRef loss = g.scale(total, 1.0 / static_cast<double>(batch.size()));
    const double loss_v = g.scalar_value(loss);
    if (!std::isfinite(loss_v)) throw NumericFault("non-finite UAPO loss");
    GradMap grads = g.backward(loss);
    opt.step(policy.params(), grads);

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    entry.l_w *= inv_b;
    entry.l_l *= inv_b;
    entry.l_uapo = loss_v;
    entry.anchor_u *= inv_b;
    entry.mean_winner_u /= std::max(1, n_winner);
    entry.mean_loser_u /= std::max(1, n_loser);
    return entry;
}

UapoTrace train_uapo(ToyModel& policy, const ReplayBuffer& buffer,
                     const std::vector<Utterance>& corpus, const UapoConfig& cfg, Rng stream) {
    cfg.validate();
    if (buffer.tuples.empty()) throw ContractViolation("uapo training needs a nonempty buffer");
    SgdMomentum opt(cfg.lr);
    Rng batch_rng = stream.stream("batch");
    UapoTrace trace;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const PreferenceTuple*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int k = 0; k < cfg.batch_size; ++k)
            batch.push_back(
                &buffer.tuples[static_cast<std::size_t>(
                    batch_rng.uniform_int(static_cast<int>(buffer.tuples.size())))]);
        trace.entries.push_back(uapo_step(policy, batch, corpus, cfg, opt, step));
    }
    return trace;
}

} // namespace ilab
