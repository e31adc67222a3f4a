#include "ilab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "json.hpp"

#include "ilab/callcount.hpp"
#include "ilab/kernels.hpp"

namespace ilab {

void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw ContractViolation("cannot create directory '" + path + "': " + ec.message());
}

// ------------------------------------------------------------------ reports

namespace {

nlohmann::ordered_json row_to_json(const MetricsRow& r) {
    nlohmann::ordered_json j;
    j["seed"] = r.seed;
    j["stage"] = r.stage;
    j["strategy"] = r.strategy;
    j["grounding"] = r.grounding;
    j["config_hash"] = r.config_hash;
    j["ter"] = r.ter;
    j["style_agreement"] = r.style_agreement;
    j["acc_e"] = r.acc_e;
    j["acc_h"] = r.acc_h;
    j["acc_z"] = r.acc_z;
    j["smooth_mu"] = r.smooth_mu;
    j["smooth_h"] = r.smooth_h;
    j["ou_drift"] = r.ou_drift;
    j["mean_reward"] = r.mean_reward;
    return j;
}

std::string num_str(double v) { return nlohmann::json(v).dump(); }

std::string param_hash_hex(const ToyModel& model) {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << model.params().hash_all();
    return os.str();
}

} // namespace

void write_report_jsonl(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    for (const MetricsRow& r : rows) out << row_to_json(r).dump() << "\n";
}

void write_report_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    out << "seed,stage,strategy,grounding,config_hash,ter,style_agreement,acc_e,acc_h,acc_z,"
           "smooth_mu,smooth_h,ou_drift,mean_reward\n";
    for (const MetricsRow& r : rows) {
        out << r.seed << "," << r.stage << "," << r.strategy << "," << r.grounding << ","
            << r.config_hash << "," << num_str(r.ter) << "," << num_str(r.style_agreement) << ","
            << num_str(r.acc_e) << "," << num_str(r.acc_h) << "," << num_str(r.acc_z) << ","
            << num_str(r.smooth_mu) << "," << num_str(r.smooth_h) << "," << num_str(r.ou_drift)
            << "," << num_str(r.mean_reward) << "\n";
    }
}

std::vector<MetricsRow> load_report_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open report '" + path + "'");
    std::vector<MetricsRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        MetricsRow r;
        r.seed = j.at("seed").get<std::uint64_t>();
        r.stage = j.at("stage").get<std::string>();
        r.strategy = j.at("strategy").get<std::string>();
        r.grounding = j.at("grounding").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.ter = j.at("ter").get<double>();
        r.style_agreement = j.at("style_agreement").get<double>();
        r.acc_e = j.at("acc_e").get<double>();
        r.acc_h = j.at("acc_h").get<double>();
        r.acc_z = j.at("acc_z").get<double>();
        r.smooth_mu = j.at("smooth_mu").get<double>();
        r.smooth_h = j.at("smooth_h").get<double>();
        r.ou_drift = j.at("ou_drift").get<double>();
        r.mean_reward = j.at("mean_reward").get<double>();
        rows.push_back(std::move(r));
    }
    return rows;
}

// ----------------------------------------------------------------- evaluate

MetricsRow evaluate(const ToyModel& model, const std::vector<Utterance>& corpus, double tau,
                    std::uint64_t seed, Stage stage, const std::string& config_hash,
                    const Critic* critic, const std::string& rollout_sink_path) {
    callcount::bump(callcount::kEvaluate);
    const std::vector<Utterance> eval = eval_split(corpus);
    if (eval.empty()) throw ContractViolation("evaluate needs a nonempty held-out split");

    std::optional<OracleCritic> own_critic;
    if (!critic) {
        own_critic.emplace(OracleCritic::from_corpus(model, eval));
        critic = &*own_critic;
    }

    struct PerUtt {
        ToyModel::Decoded decoded;
        double ter = 0.0, agree = 0.0, reward = 0.0;
        double d_mu = 0.0, d_h = 0.0, drift = 0.0;
        int pairs = 0, steps = 0;
    };
    std::vector<PerUtt> per(eval.size());
    const int n_styles = model.task().n_styles;
    const double alpha = model.ou().alpha;

    kernels::parallel_for(eval.size(), [&](std::size_t i) {
        const Utterance& u = eval[i];
        PerUtt& p = per[i];
        p.decoded = model.decode_greedy(u);
        const std::vector<int> content = decode_content(p.decoded.tokens, n_styles);
        p.ter = wer(content, u.content);
        p.agree = style_agreement(p.decoded.tokens, u.style, n_styles);

        Rollout r;
        r.speech_tokens = p.decoded.tokens;
        r.logp = p.decoded.logp;
        r.decoded_content = content;
        const Rubrics rub = critic->make_rubrics(u, model.text_response(u));
        p.reward = score_rollout(*critic, rub, u, r, tau).reward;

        const DenseArray h = model.hidden_states(u);
        DenseArray hn = DenseArray::zeros(h.shape);
        kernels::layer_norm_rows(h.data.data(), hn.data.data(), h.rows(), h.cols(),
                                 Graph::kNormEps);
        const IntentPosterior post = model.posterior(h);
        const std::size_t n = post.steps(), d = post.mu[0].size();
        for (std::size_t t = 1; t < n; ++t) {
            double dm = 0.0, dh = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double dd = post.mu[t][k] - post.mu[t - 1][k];
                dm += dd * dd;
            }
            for (std::size_t k = 0; k < h.cols(); ++k) {
                const double dd = hn.at(t, k) - hn.at(t - 1, k);
                dh += dd * dd;
            }
            p.d_mu += dm;
            p.d_h += dh;
            ++p.pairs;
        }
        for (std::size_t t = 0; t < n; ++t) {
            double dr = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double prev = t == 0 ? 0.0 : post.mu[t - 1][k];
                const double dd = post.mu[t][k] - alpha * prev;
                dr += dd * dd;
            }
            p.drift += dr;
            ++p.steps;
        }
    });

    MetricsRow row;
    row.seed = seed;
    row.stage = to_string(stage);
    row.strategy = to_string(model.strategy());
    row.grounding = to_string(model.grounding());
    row.config_hash = config_hash;
    double pairs = 0.0, steps = 0.0;
    for (const PerUtt& p : per) {
        row.ter += p.ter;
        row.style_agreement += p.agree;
        row.mean_reward += p.reward;
        row.smooth_mu += p.d_mu;
        row.smooth_h += p.d_h;
        row.ou_drift += p.drift;
        pairs += p.pairs;
        steps += p.steps;
    }
    const double inv_n = 1.0 / static_cast<double>(eval.size());
    row.ter *= inv_n;
    row.style_agreement *= inv_n;
    row.mean_reward *= inv_n;
    row.smooth_mu = pairs > 0 ? row.smooth_mu / pairs : 0.0;
    row.smooth_h = pairs > 0 ? row.smooth_h / pairs : 0.0;
    row.ou_drift = steps > 0 ? row.ou_drift / steps : 0.0;

    row.acc_e = probe_styles(model, corpus, ProbeRepr::kEmbed);
    row.acc_h = probe_styles(model, corpus, ProbeRepr::kHidden);
    row.acc_z = probe_styles(model, corpus, ProbeRepr::kIntent);

    if (!rollout_sink_path.empty()) {
        std::ofstream out(rollout_sink_path);
        if (!out) throw ContractViolation("cannot open '" + rollout_sink_path + "' for writing");
        for (std::size_t i = 0; i < eval.size(); ++i) {
            nlohmann::ordered_json j;
            j["id"] = eval[i].id;
            j["tokens"] = per[i].decoded.tokens;
            j["logp"] = per[i].decoded.logp;
            out << j.dump() << "\n";
        }
    }
    return row;
}

DecodeMetrics metrics_from_rollouts(const std::vector<Utterance>& corpus, int n_styles,
                                    const std::string& rollouts_path) {
    std::map<int, const Utterance*> by_id;
    for (const Utterance& u : corpus) by_id[u.id] = &u;
    std::ifstream in(rollouts_path);
    if (!in) throw ContractViolation("cannot open rollouts '" + rollouts_path + "'");
    DecodeMetrics m;
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        const auto it = by_id.find(j.at("id").get<int>());
        if (it == by_id.end()) throw ContractViolation("rollout references unknown utterance id");
        const Utterance& u = *it->second;
        const auto tokens = j.at("tokens").get<std::vector<int>>();
        m.ter += wer(decode_content(tokens, n_styles), u.content);
        m.style_agreement += style_agreement(tokens, u.style, n_styles);
        ++n;
    }
    if (n == 0) throw ContractViolation("rollout file '" + rollouts_path + "' is empty");
    m.ter /= static_cast<double>(n);
    m.style_agreement /= static_cast<double>(n);
    return m;
}

// ----------------------------------------------------------------- pipeline

void save_train_trace(const TrainTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    for (const auto& e : trace.entries) {
        nlohmann::ordered_json j;
        j["step"] = e.step;
        j["loss"] = e.loss;
        j["recon"] = e.recon;
        j["vib"] = e.vib;
        j["text"] = e.text;
        j["beta"] = e.beta;
        out << j.dump() << "\n";
    }
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                            const std::string& out_dir, PipelineStep start, PipelineStep stop) {
    cfg.validate();
    if (start > stop) throw ContractViolation("pipeline start is past its stop");
    ensure_dir(out_dir);
    ArtifactPaths paths{out_dir};
    const Rng root(seed);
    const std::string chash = cfg.hash_hex();
    const std::string echo = cfg.to_json().dump();
    cfg.save(paths.config());

    auto runs = [&](PipelineStep s) { return start <= s && s <= stop; };

    std::vector<Utterance> corpus;
    if (runs(PipelineStep::kCorpus)) {
        corpus = generate_corpus(cfg.task, cfg.corpus_size, root.stream("corpus"));
        save_corpus_jsonl(corpus, paths.corpus());
    } else {
        corpus = load_corpus_jsonl(paths.corpus());
    }
    const std::vector<Utterance> train = train_split(corpus);
    const std::vector<Utterance> eval = eval_split(corpus);

    std::optional<ToyModel> model; // tracks the latest supervised checkpoint
    if (runs(PipelineStep::kStage1)) {
        model = ToyModel::init(cfg.task, cfg.strategy, cfg.grounding, cfg.ou, root.stream("init"));
        TrainTrace trace = train_stage1(*model, train, cfg.stage1, root.stream("stage1"));
        save_train_trace(trace, paths.train_trace(Stage::kStage1));
        save_checkpoint(*model, Stage::kStage1, seed, echo, paths.checkpoint(Stage::kStage1));
    }
    if (runs(PipelineStep::kStage2)) {
        if (!model) model = load_checkpoint(paths.checkpoint(Stage::kStage1)).model;
        TrainTrace trace = train_stage2(*model, train, cfg.stage2, root.stream("stage2"));
        save_train_trace(trace, paths.train_trace(Stage::kStage2));
        save_checkpoint(*model, Stage::kStage2, seed, echo, paths.checkpoint(Stage::kStage2));
    }

    PipelineResult result;
    if (runs(PipelineStep::kCollect)) {
        if (!model) model = load_checkpoint(paths.checkpoint(Stage::kStage2)).model;
        const OracleCritic critic = OracleCritic::from_corpus(*model, train);
        const AnchorPolicy anchor{&*model};
        ReplayBuffer buffer;
        result.collect_stats =
            collect(train, *model, anchor, critic, cfg.self_reward, root.stream("rollout"), seed,
                    "stage2:" + param_hash_hex(*model), buffer);
        buffer.save_jsonl(paths.buffer());
        nlohmann::ordered_json sj;
        sj["n_inputs"] = result.collect_stats.n_inputs;
        sj["n_kept"] = result.collect_stats.n_kept;
        sj["n_skipped"] = result.collect_stats.n_skipped;
        std::ofstream sout(paths.collect_stats());
        sout << sj.dump(2) << "\n";
    }

    std::optional<ToyModel> uapo_model;
    if (runs(PipelineStep::kUapo)) {
        if (!model) model = load_checkpoint(paths.checkpoint(Stage::kStage2)).model;
        ReplayBuffer buffer = ReplayBuffer::load_jsonl(paths.buffer());
        uapo_model = *model;
        UapoTrace trace = train_uapo(*uapo_model, buffer, corpus, cfg.uapo, root.stream("uapo"));
        trace.save_jsonl(paths.uapo_trace());
        save_checkpoint(*uapo_model, Stage::kUapo, seed, echo, paths.checkpoint(Stage::kUapo));
    }

    if (runs(PipelineStep::kEval)) {
        if (!model) model = load_checkpoint(paths.checkpoint(Stage::kStage2)).model;
        if (!uapo_model) uapo_model = load_checkpoint(paths.checkpoint(Stage::kUapo)).model;
        // One critic, calibrated on the stage-2 checkpoint, scores both rows
        // so the before/after rewards are comparable.
        const OracleCritic critic = OracleCritic::from_corpus(*model, eval);
        result.stage2_row = evaluate(*model, corpus, cfg.self_reward.tau, seed, Stage::kStage2,
                                     chash, &critic, paths.rollouts(Stage::kStage2));
        result.uapo_row = evaluate(*uapo_model, corpus, cfg.self_reward.tau, seed, Stage::kUapo,
                                   chash, &critic, paths.rollouts(Stage::kUapo));
        const std::vector<MetricsRow> rows{result.stage2_row, result.uapo_row};
        write_report_jsonl(rows, paths.report_jsonl());
        write_report_csv(rows, paths.report_csv());
    }
    return result;
}

// ------------------------------------------------------------------- ablate

std::vector<MetricsRow> ablate(const ExperimentConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    ensure_dir(out_dir);
    const FusionStrategy strategies[] = {FusionStrategy::kContentOnly, FusionStrategy::kAdditive,
                                         FusionStrategy::kVanillaAdaln, FusionStrategy::kVibAdaln};
    const GroundingMode groundings[] = {GroundingMode::kNone, GroundingMode::kSemantic,
                                        GroundingMode::kAcoustic};

    struct Cell {
        std::uint64_t seed;
        FusionStrategy strategy;
        GroundingMode grounding;
        std::size_t corpus_idx;
    };
    std::vector<Cell> cells;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si)
        for (FusionStrategy st : strategies)
            for (GroundingMode gr : groundings) cells.push_back({cfg.seeds[si], st, gr, si});

    // One corpus per seed, shared by the twelve cells so the comparison is
    // on identical data.
    std::vector<std::vector<Utterance>> corpora(cfg.seeds.size());
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si)
        corpora[si] = generate_corpus(cfg.task, cfg.corpus_size, Rng(cfg.seeds[si]).stream("corpus"));

    std::vector<MetricsRow> rows(cells.size());
    kernels::parallel_for(cells.size(), [&](std::size_t ci) {
        const Cell& cell = cells[ci];
        ExperimentConfig cell_cfg = cfg;
        cell_cfg.strategy = cell.strategy;
        cell_cfg.grounding = cell.grounding;
        const Rng root(cell.seed);
        ToyModel model = ToyModel::init(cell_cfg.task, cell.strategy, cell.grounding, cell_cfg.ou,
                                        root.stream("init"));
        const std::vector<Utterance> train = train_split(corpora[cell.corpus_idx]);
        train_stage1(model, train, cell_cfg.stage1, root.stream("stage1"));
        train_stage2(model, train, cell_cfg.stage2, root.stream("stage2"));
        rows[ci] = evaluate(model, corpora[cell.corpus_idx], cell_cfg.self_reward.tau, cell.seed,
                            Stage::kStage2, cell_cfg.hash_hex());
    });

    write_report_jsonl(rows, out_dir + "/ablation.jsonl");
    write_report_csv(rows, out_dir + "/ablation.csv");
    return rows;
}

} // namespace ilab
