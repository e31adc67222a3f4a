#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ilab/config.hpp"
#include "ilab/model.hpp"
#include "ilab/selfreward.hpp"
#include "ilab/task.hpp"
#include "ilab/uapo.hpp"

namespace ilab {

struct MetricsRow {
    std::uint64_t seed = 0;
    std::string stage;
    std::string strategy;
    std::string grounding;
    std::string config_hash;
    double ter = 0.0;              // content token-error-rate of greedy decodes
    double style_agreement = 0.0;  // fraction of style-correct tokens
    double acc_e = 0.0, acc_h = 0.0, acc_z = 0.0; // linear-probe accuracies
    double smooth_mu = 0.0;  // mean ||mu_i - mu_{i-1}||^2
    double smooth_h = 0.0;   // same for row-normalized hidden states
    double ou_drift = 0.0;   // mean ||mu_i - alpha*mu_{i-1}||^2, mu_0 = 0
    double mean_reward = 0.0;
};

void write_report_jsonl(const std::vector<MetricsRow>& rows, const std::string& path);
void write_report_csv(const std::vector<MetricsRow>& rows, const std::string& path);
std::vector<MetricsRow> load_report_jsonl(const std::string& path);

// Greedy-decodes the held-out split, scores it with the critic (or one
// calibrated on the model itself when none is given) and probes all three
// representations on the full corpus.
MetricsRow evaluate(const ToyModel& model, const std::vector<Utterance>& corpus, double tau,
                    std::uint64_t seed, Stage stage, const std::string& config_hash,
                    const Critic* critic = nullptr,
                    const std::string& rollout_sink_path = std::string());

// Recomputes the decode metrics from a persisted rollout file; must agree
// with the live evaluate() values.
struct DecodeMetrics {
    double ter = 0.0;
    double style_agreement = 0.0;
};
DecodeMetrics metrics_from_rollouts(const std::vector<Utterance>& corpus, int n_styles,
                                    const std::string& rollouts_path);

// --------------------------------------------------------------- pipeline

enum class PipelineStep { kCorpus = 0, kStage1, kStage2, kCollect, kUapo, kEval };

struct ArtifactPaths {
    std::string out_dir;

    std::string config() const { return out_dir + "/config.json"; }
    std::string corpus() const { return out_dir + "/corpus.jsonl"; }
    std::string checkpoint(Stage s) const {
        return out_dir + "/ckpt_" + std::string(to_string(s)) + ".json";
    }
    std::string train_trace(Stage s) const {
        return out_dir + "/trace_" + std::string(to_string(s)) + ".jsonl";
    }
    std::string buffer() const { return out_dir + "/buffer.jsonl"; }
    std::string collect_stats() const { return out_dir + "/collect_stats.json"; }
    std::string uapo_trace() const { return out_dir + "/uapo_trace.jsonl"; }
    std::string report_jsonl() const { return out_dir + "/report.jsonl"; }
    std::string report_csv() const { return out_dir + "/report.csv"; }
    std::string rollouts(Stage s) const {
        return out_dir + "/rollouts_" + std::string(to_string(s)) + ".jsonl";
    }
};

void ensure_dir(const std::string& path);
void save_train_trace(const TrainTrace& trace, const std::string& path);

struct PipelineResult {
    MetricsRow stage2_row;
    MetricsRow uapo_row;
    CollectStats collect_stats;
};

// Stage 1 -> Stage 2 -> collect -> UAPO -> eval, checkpointing between
// stages. Steps before `start` load their artifacts from the output
// directory, so a run is resumable from any stage checkpoint.
PipelineResult run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                            const std::string& out_dir, PipelineStep start = PipelineStep::kCorpus,
                            PipelineStep stop = PipelineStep::kEval);

// The fusion-strategy x grounding grid over all configured seeds; one
// report row per (strategy, grounding, seed) cell. Cells run in parallel.
std::vector<MetricsRow> ablate(const ExperimentConfig& cfg, const std::string& out_dir);

} // namespace ilab
