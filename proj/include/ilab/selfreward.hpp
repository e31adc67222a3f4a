#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ilab/model.hpp"
#include "ilab/task.hpp"

namespace ilab {

// Three-point rubric sub-scores plus the WER intelligibility gate: reward is
// zero whenever wer > tau, otherwise the sum of the sub-scores.
struct RubricScore {
    double s_emo = 0.0;
    double s_pro = 0.0;
    double s_nat = 0.0;
    double wer = 0.0;
    double reward = 0.0;
};

struct Rollout {
    std::vector<int> speech_tokens;
    std::vector<int> decoded_content;
    std::vector<double> logp;
    RubricScore score;
};

// Token-level Levenshtein distance (unit costs) divided by |ref|.
double wer(const std::vector<int>& hyp, const std::vector<int>& ref);

// Rubric descriptors one concrete critic produced for one input.
struct Rubrics {
    int expected_style = 0;
    // Mean-logp landmarks of true target sequences under the frozen
    // reference scorer: score 1 above the median, 0.5 above the 25th
    // percentile.
    double nat_median = 0.0;
    double nat_q25 = 0.0;
};

class Critic {
public:
    virtual ~Critic() = default;
    virtual Rubrics make_rubrics(const Utterance& u, const std::vector<int>& text_response) const = 0;
    virtual std::array<double, 3> score(const Utterance& u, const Rollout& rollout,
                                        const Rubrics& rubrics) const = 0;
};

// Deterministic stand-in for the model-as-critic: emotion from
// style-channel agreement, prosody from adjacent style consistency,
// naturalness from the reference-scored sequence likelihood.
class OracleCritic : public Critic {
public:
    OracleCritic(const ToyModel& reference_scorer, double nat_median, double nat_q25);

    // Computes the naturalness landmarks from the reference scorer's mean
    // log-probability of the dataset's target sequences.
    static OracleCritic from_corpus(const ToyModel& reference_scorer,
                                    const std::vector<Utterance>& dataset);

    Rubrics make_rubrics(const Utterance& u, const std::vector<int>& text_response) const override;
    std::array<double, 3> score(const Utterance& u, const Rollout& rollout,
                                const Rubrics& rubrics) const override;

    static constexpr double kHighBar = 0.9;
    static constexpr double kMidBar = 0.5;

private:
    const ToyModel* reference_ = nullptr;
    double nat_median_ = 0.0;
    double nat_q25_ = 0.0;
};

RubricScore score_rollout(const Critic& critic, const Rubrics& rubrics, const Utterance& u,
                          Rollout& rollout, double tau);

// Context-unaware generator: content-only fusion, no grounding, greedy
// decode driven by the text response alone.
struct AnchorPolicy {
    const ToyModel* policy = nullptr;

    Rollout generate(const Utterance& u, const std::vector<int>& text_response) const;
};

struct PreferenceTuple {
    int input_id = 0;
    std::vector<Rollout> winners;
    std::vector<Rollout> losers;
    Rollout anchor;
    std::uint64_t seed = 0;
    std::string checkpoint_id;

    void validate() const;
};

struct ReplayBuffer {
    std::vector<PreferenceTuple> tuples;

    void append(PreferenceTuple t); // validates the tuple invariants
    void save_jsonl(const std::string& path) const;
    static ReplayBuffer load_jsonl(const std::string& path);
};

struct CollectConfig {
    int k = 32;
    double tau = 0.2;
    double rollout_temperature = 1.0;
};

struct CollectStats {
    int n_inputs = 0;
    int n_kept = 0;
    int n_skipped = 0;
};

// Algorithm: decode the text response, sample K rollouts, generate the
// anchor, score all K+1 with the critic and the WER gate, then keep the
// max-reward strict winners and min-reward strict losers relative to the
// anchor. Inputs where either side is empty are skipped (counted, not an
// error). Parallel across inputs; deterministic merge by input order.
CollectStats collect(const std::vector<Utterance>& dataset, const ToyModel& policy,
                     const AnchorPolicy& anchor, const Critic& critic, const CollectConfig& cfg,
                     Rng rollout_stream, std::uint64_t seed, const std::string& checkpoint_id,
                     ReplayBuffer& out);

} // namespace ilab
