#include "ilab/selfreward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>

#include "json.hpp"

#include "ilab/callcount.hpp"
#include "ilab/kernels.hpp"

namespace ilab {

double wer(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (ref.empty()) throw ContractViolation("wer needs a nonempty reference");
    const std::size_t n = hyp.size(), m = ref.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(m);
}

// ------------------------------------------------------------- oracle critic

OracleCritic::OracleCritic(const ToyModel& reference_scorer, double nat_median, double nat_q25)
    : reference_(&reference_scorer), nat_median_(nat_median), nat_q25_(nat_q25) {}

OracleCritic OracleCritic::from_corpus(const ToyModel& reference_scorer,
                                       const std::vector<Utterance>& dataset) {
    if (dataset.empty()) throw ContractViolation("critic calibration needs a nonempty dataset");
    std::vector<double> means(dataset.size());
    kernels::parallel_for(dataset.size(), [&](std::size_t i) {
        const std::vector<double> lp = reference_scorer.rescore(dataset[i], dataset[i].target_speech);
        double s = 0.0;
        for (double v : lp) s += v;
        means[i] = s / static_cast<double>(lp.size());
    });
    std::sort(means.begin(), means.end());
    const double median = means[means.size() / 2];
    const double q25 = means[means.size() / 4];
    return OracleCritic(reference_scorer, median, q25);
}

Rubrics OracleCritic::make_rubrics(const Utterance& u, const std::vector<int>&) const {
    Rubrics r;
    r.expected_style = u.style;
    r.nat_median = nat_median_;
    r.nat_q25 = nat_q25_;
    return r;
}

static double three_point(double value, double high_bar, double mid_bar) {
    return value >= high_bar ? 1.0 : value >= mid_bar ? 0.5 : 0.0;
}

std::array<double, 3> OracleCritic::score(const Utterance& u, const Rollout& rollout,
                                          const Rubrics& rubrics) const {
    const int s = reference_->task().n_styles;
    const double agree = style_agreement(rollout.speech_tokens, rubrics.expected_style, s);
    const double s_emo = three_point(agree, kHighBar, kMidBar);

    double consistent = 1.0; // a single step is vacuously consistent
    if (rollout.speech_tokens.size() > 1) {
        int hits = 0;
        for (std::size_t i = 1; i < rollout.speech_tokens.size(); ++i)
            if (decode_style_token(rollout.speech_tokens[i], s) ==
                decode_style_token(rollout.speech_tokens[i - 1], s))
                ++hits;
        consistent = static_cast<double>(hits) /
                     static_cast<double>(rollout.speech_tokens.size() - 1);
    }
    const double s_pro = three_point(consistent, kHighBar, kMidBar);

    // Naturalness is always assessed by rescoring under the frozen reference,
    // never from collection-time metadata.
    const std::vector<double> lp = reference_->rescore(u, rollout.speech_tokens);
    double mean_lp = 0.0;
    for (double v : lp) mean_lp += v;
    mean_lp /= static_cast<double>(lp.size());
    const double s_nat = mean_lp > rubrics.nat_median ? 1.0
                         : mean_lp > rubrics.nat_q25  ? 0.5
                                                      : 0.0;
    return {s_emo, s_pro, s_nat};
}

RubricScore score_rollout(const Critic& critic, const Rubrics& rubrics, const Utterance& u,
                          Rollout& rollout, double tau) {
    const auto sub = critic.score(u, rollout, rubrics);
    RubricScore sc;
    sc.s_emo = sub[0];
    sc.s_pro = sub[1];
    sc.s_nat = sub[2];
    sc.wer = wer(rollout.decoded_content, u.content);
    sc.reward = sc.wer > tau ? 0.0 : sc.s_emo + sc.s_pro + sc.s_nat;
    rollout.score = sc;
    return sc;
}

// ------------------------------------------------------------------- anchor

Rollout AnchorPolicy::generate(const Utterance& u, const std::vector<int>& text_response) const {
    if (!policy) throw ContractViolation("anchor policy has no generator");
    ToyModel::Decoded d = policy->decode_anchor(u, text_response);
    Rollout r;
    r.speech_tokens = std::move(d.tokens);
    r.logp = std::move(d.logp);
    r.decoded_content = decode_content(r.speech_tokens, policy->task().n_styles);
    return r;
}

// ------------------------------------------------------------- replay buffer

void PreferenceTuple::validate() const {
    if (winners.empty() || losers.empty())
        throw ContractViolation("preference tuple needs nonempty winner and loser sets");
    const double rw = winners.front().score.reward;
    const double rl = losers.front().score.reward;
    const double ra = anchor.score.reward;
    for (const Rollout& w : winners)
        if (w.score.reward != rw)
            throw ContractViolation("winners must share the maximal reward");
    for (const Rollout& l : losers)
        if (l.score.reward != rl)
            throw ContractViolation("losers must share the minimal reward");
    if (!(rw > ra && ra > rl))
        throw ContractViolation("tuple must satisfy min r(winners) > r(anchor) > max r(losers)");
}

void ReplayBuffer::append(PreferenceTuple t) {
    t.validate();
    tuples.push_back(std::move(t));
}

namespace {

nlohmann::ordered_json rollout_to_json(const Rollout& r) {
    return {{"tokens", r.speech_tokens}, {"logp", r.logp}};
}

Rollout rollout_from_json(const nlohmann::json& j, double reward) {
    Rollout r;
    r.speech_tokens = j.at("tokens").get<std::vector<int>>();
    r.logp = j.at("logp").get<std::vector<double>>();
    if (r.logp.size() != r.speech_tokens.size())
        throw ContractViolation("rollout logp length does not match token length");
    r.score.reward = reward;
    return r;
}

} // namespace

void ReplayBuffer::save_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    for (const PreferenceTuple& t : tuples) {
        nlohmann::ordered_json j;
        j["input_id"] = t.input_id;
        nlohmann::ordered_json winners = nlohmann::ordered_json::array();
        for (const Rollout& w : t.winners) winners.push_back(rollout_to_json(w));
        nlohmann::ordered_json losers = nlohmann::ordered_json::array();
        for (const Rollout& l : t.losers) losers.push_back(rollout_to_json(l));
        j["winners"] = std::move(winners);
        j["losers"] = std::move(losers);
        j["anchor"] = rollout_to_json(t.anchor);
        j["rewards"] = {{"winners", t.winners.front().score.reward},
                        {"losers", t.losers.front().score.reward},
                        {"anchor", t.anchor.score.reward}};
        j["seed"] = t.seed;
        j["checkpoint_id"] = t.checkpoint_id;
        out << j.dump() << "\n";
    }
}

ReplayBuffer ReplayBuffer::load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open replay buffer '" + path + "'");
    ReplayBuffer buf;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PreferenceTuple t;
        t.input_id = j.at("input_id").get<int>();
        const double rw = j.at("rewards").at("winners").get<double>();
        const double rl = j.at("rewards").at("losers").get<double>();
        const double ra = j.at("rewards").at("anchor").get<double>();
        for (const auto& w : j.at("winners")) t.winners.push_back(rollout_from_json(w, rw));
        for (const auto& l : j.at("losers")) t.losers.push_back(rollout_from_json(l, rl));
        t.anchor = rollout_from_json(j.at("anchor"), ra);
        t.seed = j.at("seed").get<std::uint64_t>();
        t.checkpoint_id = j.at("checkpoint_id").get<std::string>();
        buf.append(std::move(t));
    }
    return buf;
}

// ----------------------------------------------------------------- collect

CollectStats collect(const std::vector<Utterance>& dataset, const ToyModel& policy,
                     const AnchorPolicy& anchor, const Critic& critic, const CollectConfig& cfg,
                     Rng rollout_stream, std::uint64_t seed, const std::string& checkpoint_id,
                     ReplayBuffer& out) {
    callcount::bump(callcount::kCollect);
    if (cfg.k < 2) throw ContractViolation("collect needs K >= 2");
    if (!(cfg.tau >= 0.0)) throw ContractViolation("collect needs tau >= 0");
    if (!(cfg.rollout_temperature > 0.0))
        throw ContractViolation("collect needs a positive rollout temperature");

    const int s = policy.task().n_styles;
    std::vector<std::optional<PreferenceTuple>> kept(dataset.size());

    kernels::parallel_for(dataset.size(), [&](std::size_t i) {
        const Utterance& u = dataset[i];
        Rng input_rng = rollout_stream.stream(static_cast<std::uint64_t>(u.id));
        const std::vector<int> text = policy.text_response(u);
        const Rubrics rubrics = critic.make_rubrics(u, text);

        std::vector<Rollout> rollouts(static_cast<std::size_t>(cfg.k));
        for (int k = 0; k < cfg.k; ++k) {
            ToyModel::Decoded d = policy.decode_sample(u, cfg.rollout_temperature,
                                                       input_rng.stream(static_cast<std::uint64_t>(k)));
            Rollout& r = rollouts[static_cast<std::size_t>(k)];
            r.speech_tokens = std::move(d.tokens);
            r.logp = std::move(d.logp);
            r.decoded_content = decode_content(r.speech_tokens, s);
            score_rollout(critic, rubrics, u, r, cfg.tau);
        }
        Rollout anchor_rollout = anchor.generate(u, text);
        score_rollout(critic, rubrics, u, anchor_rollout, cfg.tau);
        const double r_anchor = anchor_rollout.score.reward;

        double best = -1.0, worst = 4.0;
        for (const Rollout& r : rollouts) {
            if (r.score.reward > r_anchor) best = std::max(best, r.score.reward);
            if (r.score.reward < r_anchor) worst = std::min(worst, r.score.reward);
        }
        if (best < 0.0 || worst > 3.5) return; // one of the strict sides is empty

        PreferenceTuple t;
        t.input_id = u.id;
        for (const Rollout& r : rollouts) {
            if (r.score.reward == best) t.winners.push_back(r);
            else if (r.score.reward == worst) t.losers.push_back(r);
        }
        t.anchor = std::move(anchor_rollout);
        t.seed = seed;
        t.checkpoint_id = checkpoint_id;
        kept[i] = std::move(t);
    });

    CollectStats stats;
    stats.n_inputs = static_cast<int>(dataset.size());
    for (auto& maybe : kept) {
        if (maybe.has_value()) {
            out.append(std::move(*maybe));
            ++stats.n_kept;
        } else {
            ++stats.n_skipped;
        }
    }
    return stats;
}

} // namespace ilab
