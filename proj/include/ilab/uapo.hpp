#pragma once

#include <string>
#include <vector>

#include "ilab/graph.hpp"
#include "ilab/model.hpp"
#include "ilab/selfreward.hpp"

namespace ilab {

struct UapoConfig {
    double lambda = 1.0;
    int steps = 500;
    double lr = 0.02;
    int batch_size = 8;
    // The anchor is a fixed sequence; its utility under the current policy
    // is trained by default. Detaching it is exposed for ablation.
    bool detach_anchor = false;

    void validate() const;
};

// Length-normalized log-probability utility, rescored under the current
// policy (never the stale collection-time values).
double policy_utility(const ToyModel& policy, const Utterance& u, const std::vector<int>& tokens,
                      double lambda);
ValueRef policy_utility_node(Graph& g, const ToyModel::Bound& b, const ToyModel& policy,
                             const Utterance& u, const std::vector<int>& tokens, double lambda);

// Softmax-ranking losses against the anchor, computed with max-subtraction.
double loss_win(const std::vector<double>& winner_utilities, double anchor_utility);
double loss_lose(const std::vector<double>& loser_utilities, double anchor_utility);

ValueRef loss_win_node(Graph& g, const std::vector<ValueRef>& winner_utilities,
                       ValueRef anchor_utility);
ValueRef loss_lose_node(Graph& g, const std::vector<ValueRef>& loser_utilities,
                        ValueRef anchor_utility);

struct UapoTrace {
    struct Entry {
        int step;
        double l_w, l_l, l_uapo;
        double mean_winner_u, mean_loser_u, anchor_u;
    };
    std::vector<Entry> entries;

    void save_jsonl(const std::string& path) const;
};

// One gradient step on the batch mean of L_w + L_l over preference tuples.
UapoTrace::Entry uapo_step(ToyModel& policy, const std::vector<const PreferenceTuple*>& batch,
                           const std::vector<Utterance>& corpus, const UapoConfig& cfg,
                           SgdMomentum& opt, int step);

UapoTrace train_uapo(ToyModel& policy, const ReplayBuffer& buffer,
                     const std::vector<Utterance>& corpus, const UapoConfig& cfg, Rng stream);

} // namespace ilab
