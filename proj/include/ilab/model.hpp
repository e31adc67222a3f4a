#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ilab/fusion.hpp"
#include "ilab/graph.hpp"
#include "ilab/task.hpp"
#include "ilab/vib.hpp"

namespace ilab {

// Source of the generation context fed to the speech head.
enum class GroundingMode { kNone, kSemantic, kAcoustic };

const char* to_string(GroundingMode m);
GroundingMode grounding_from_string(const std::string& s);

enum class Stage { kInit, kStage1, kStage2, kUapo };
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct StageSchedule {
    int steps = 1500;
    double lr = 0.08;
    int batch_size = 16;
};

enum class DecodeMode { kGreedy, kSample };

// The toy stand-in for the paper's stack: a frozen random backbone mixes
// dominant lexical content with an entangled style signal and per-position
// noise; a trainable speech pathway (fusion + intent encoder + generation
// encoder + autoregressive head) learns to reconstruct the two-channel
// target tokens; a frozen text head reads content off the hidden states.
class ToyModel {
public:
    // Backbone mix: content path carries 3x the style path's gain, plus
    // per-position noise, so lexical content dominates the hidden states
    // while style stays present but entangled.
    static constexpr double kContentGain = 3.0;
    static constexpr double kStyleGain = 1.0;
    static constexpr double kHiddenNoise = 4.0;
    static constexpr double kEncoderInit = 1.0;
    static constexpr double kLogVarBiasInit = -2.0;
    static constexpr double kGenEmbedInit = 0.5;

    static ToyModel init(const TaskConfig& task, FusionStrategy strategy, GroundingMode grounding,
                         const OuPriorConfig& ou, Rng init_stream);

    const TaskConfig& task() const { return task_; }
    FusionStrategy strategy() const { return strategy_; }
    GroundingMode grounding() const { return grounding_; }
    const OuPriorConfig& ou() const { return ou_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // Parameters updated per stage. Stage 1 trains the speech head, the
    // generation encoder, the fusion maps and the intent encoder; Stage 2
    // additionally unfreezes the last backbone layer (at a smaller step).
    std::set<std::string> stage1_trainable() const;
    std::set<std::string> stage2_trainable() const;
    std::vector<std::string> backbone_last_names() const;
    // Everything outside `trainable`, for freeze-contract checks.
    std::uint64_t frozen_hash(const std::set<std::string>& trainable) const;

    // ---- graph builders ---------------------------------------------------

    // Parameter leaves bound once per graph and shared by every per-utterance
    // loss built on it.
    struct Bound {
        std::map<std::string, ValueRef> refs;
        ValueRef at(const std::string& name) const;
    };
    Bound bind(Graph& g, const std::set<std::string>& trainable) const;

    struct SpeechLossRefs {
        ValueRef recon, vib, speech;
    };
    // sample_rng == nullptr uses the posterior mean (infer-mean).
    // frozen_kl_prev substitutes a constant snapshot for the detached prior
    // means inside the KL; finite-difference oracles need it because central
    // differences see through a stop-gradient.
    SpeechLossRefs build_speech_loss(Graph& g, const Bound& b, const Utterance& u, double beta,
                                     Rng* sample_rng,
                                     const DenseArray* frozen_kl_prev = nullptr) const;
    ValueRef build_text_loss(Graph& g, const Bound& b, const Utterance& u) const;

    // Per-token log-probabilities of `tokens` under teacher forcing with
    // infer-mean intents; rank-1 [N] node.
    ValueRef build_sequence_logprob(Graph& g, const Bound& b, const Utterance& u,
                                    const std::vector<int>& tokens) const;

    // ---- plain-value forward (same kernels and op order as the graphs) ----

    DenseArray embed_rows(const std::vector<int>& content) const;
    DenseArray hidden_states(const Utterance& u) const;
    DenseArray context_hidden_states(const Utterance& u) const;
    IntentPosterior posterior(const DenseArray& h) const;
    DenseArray grounding_vector(const Utterance& u) const;

    struct Decoded {
        std::vector<int> tokens;
        std::vector<double> logp; // log pi(token) at unit temperature
    };

    Decoded decode(const Utterance& u, FusionStrategy strategy, GroundingMode grounding,
                   DecodeMode mode, double temperature, Rng* rng,
                   const std::vector<int>* content_override) const;
    Decoded decode_greedy(const Utterance& u) const;
    Decoded decode_sample(const Utterance& u, double temperature, Rng rng) const;
    // Context-unaware generation: content-only fusion, no grounding, greedy.
    Decoded decode_anchor(const Utterance& u, const std::vector<int>& text_response) const;

    std::vector<int> text_response(const Utterance& u) const;
    std::vector<double> rescore(const Utterance& u, const std::vector<int>& tokens) const;

private:
    TaskConfig task_;
    FusionStrategy strategy_ = FusionStrategy::kVibAdaln;
    GroundingMode grounding_ = GroundingMode::kAcoustic;
    OuPriorConfig ou_;
    ParamStore params_;

    std::size_t grounding_dim() const;
    std::size_t adaln_cond_dim() const;
    DenseArray fused_rows(const Utterance& u, FusionStrategy strategy,
                          const std::vector<int>& content) const;
};

// ---- training ---------------------------------------------------------

struct TrainTrace {
    struct Entry {
        int step;
        double loss, recon, vib, text, beta;
    };
    std::vector<Entry> entries;

    double moving_average(std::size_t end, std::size_t window) const;
};

TrainTrace train_stage1(ToyModel& model, const std::vector<Utterance>& train,
                        const StageSchedule& sched, Rng stream);
TrainTrace train_stage2(ToyModel& model, const std::vector<Utterance>& train,
                        const StageSchedule& sched, Rng stream);

// ---- probes -------------------------------------------------------------

enum class ProbeRepr { kEmbed, kHidden, kIntent };
const char* to_string(ProbeRepr r);

// Multinomial linear probe on per-utterance mean representations,
// 80/20 split by utterance id; returns held-out accuracy.
double probe_styles(const ToyModel& model, const std::vector<Utterance>& corpus, ProbeRepr repr);

// Bare probe used by the planted/chance sanity tests.
double linear_probe_accuracy(const std::vector<std::vector<double>>& train_x,
                             const std::vector<int>& train_y,
                             const std::vector<std::vector<double>>& test_x,
                             const std::vector<int>& test_y, int n_classes);

// ---- checkpoints ----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const ToyModel& model, Stage stage, std::uint64_t seed,
                     const std::string& config_echo_json, const std::string& path);

struct Checkpoint {
    ToyModel model;
    Stage stage = Stage::kInit;
    std::uint64_t seed = 0;
    std::string config_echo;
};

Checkpoint load_checkpoint(const std::string& path);

} // namespace ilab
