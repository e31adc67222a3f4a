// Command-line front end: corpus generation, the three training stages,
// rollout collection, preference optimization, evaluation, probing, and the
// fusion x grounding ablation grid. One config file drives everything;
// --seed and --out override the config.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "ilab/config.hpp"
#include "ilab/harness.hpp"
#include "ilab/model.hpp"
#include "ilab/selfreward.hpp"
#include "ilab/uapo.hpp"

namespace {

using namespace ilab;

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::string stage_name = "stage2";
    std::string resume_path;
    std::uint64_t seed_override = 0;
    bool has_seed = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_stage, bool with_resume) {
    cmd->add_option("--config", args.config_path, "experiment config file (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", args.seed_override, "override the config's first seed")
        ->each([&args](const std::string&) { args.has_seed = true; });
    cmd->add_option("--out", args.out_override, "override the config's output directory");
    if (with_stage)
        cmd->add_option("--stage", args.stage_name, "checkpoint stage (init|stage1|stage2|uapo)");
    if (with_resume)
        cmd->add_option("--resume", args.resume_path, "checkpoint file to continue from");
}

struct Env {
    ExperimentConfig cfg;
    std::uint64_t seed;
    ArtifactPaths paths;
    Rng root;
    std::string echo;
};

Env load_env(const CommonArgs& args) {
    ExperimentConfig cfg = ExperimentConfig::load(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    const std::uint64_t seed = args.has_seed ? args.seed_override : cfg.seeds.front();
    ensure_dir(cfg.out_dir);
    return Env{cfg, seed, ArtifactPaths{cfg.out_dir}, Rng(seed), cfg.to_json().dump()};
}

ToyModel model_for_stage(const Env& env, const CommonArgs& args) {
    const Stage stage = stage_from_string(args.stage_name);
    if (stage == Stage::kInit)
        return ToyModel::init(env.cfg.task, env.cfg.strategy, env.cfg.grounding, env.cfg.ou,
                              env.root.stream("init"));
    const std::string path =
        args.resume_path.empty() ? env.paths.checkpoint(stage) : args.resume_path;
    return load_checkpoint(path).model;
}

int run_gen_corpus(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = generate_corpus(env.cfg.task, env.cfg.corpus_size, env.root.stream("corpus"));
    save_corpus_jsonl(corpus, env.paths.corpus());
    env.cfg.save(env.paths.config());
    std::cout << "wrote " << corpus.size() << " utterances to " << env.paths.corpus() << "\n";
    return 0;
}

int run_train_stage1(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    ToyModel model = ToyModel::init(env.cfg.task, env.cfg.strategy, env.cfg.grounding, env.cfg.ou,
                                    env.root.stream("init"));
    TrainTrace trace = train_stage1(model, train_split(corpus), env.cfg.stage1,
                                    env.root.stream("stage1"));
    save_train_trace(trace, env.paths.train_trace(Stage::kStage1));
    save_checkpoint(model, Stage::kStage1, env.seed, env.echo, env.paths.checkpoint(Stage::kStage1));
    std::cout << "stage1 done; final loss "
              << trace.moving_average(trace.entries.size(), 100) << "\n";
    return 0;
}

int run_train_stage2(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    const std::string from =
        args.resume_path.empty() ? env.paths.checkpoint(Stage::kStage1) : args.resume_path;
    ToyModel model = load_checkpoint(from).model;
    TrainTrace trace = train_stage2(model, train_split(corpus), env.cfg.stage2,
                                    env.root.stream("stage2"));
    save_train_trace(trace, env.paths.train_trace(Stage::kStage2));
    save_checkpoint(model, Stage::kStage2, env.seed, env.echo, env.paths.checkpoint(Stage::kStage2));
    std::cout << "stage2 done; final loss "
              << trace.moving_average(trace.entries.size(), 100) << "\n";
    return 0;
}

int run_collect(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    const std::string from =
        args.resume_path.empty() ? env.paths.checkpoint(Stage::kStage2) : args.resume_path;
    ToyModel model = load_checkpoint(from).model;
    const auto train = train_split(corpus);
    const OracleCritic critic = OracleCritic::from_corpus(model, train);
    const AnchorPolicy anchor{&model};
    ReplayBuffer buffer;
    const CollectStats stats = collect(train, model, anchor, critic, env.cfg.self_reward,
                                       env.root.stream("rollout"), env.seed, "cli:" + from, buffer);
    buffer.save_jsonl(env.paths.buffer());
    nlohmann::ordered_json sj{{"n_inputs", stats.n_inputs},
                              {"n_kept", stats.n_kept},
                              {"n_skipped", stats.n_skipped}};
    std::ofstream sout(env.paths.collect_stats());
    sout << sj.dump(2) << "\n";
    std::cout << "kept " << stats.n_kept << "/" << stats.n_inputs << " preference tuples\n";
    return 0;
}

int run_uapo_train(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    const std::string from =
        args.resume_path.empty() ? env.paths.checkpoint(Stage::kStage2) : args.resume_path;
    ToyModel model = load_checkpoint(from).model;
    ReplayBuffer buffer = ReplayBuffer::load_jsonl(env.paths.buffer());
    UapoTrace trace = train_uapo(model, buffer, corpus, env.cfg.uapo, env.root.stream("uapo"));
    trace.save_jsonl(env.paths.uapo_trace());
    save_checkpoint(model, Stage::kUapo, env.seed, env.echo, env.paths.checkpoint(Stage::kUapo));
    std::cout << "uapo done over " << buffer.tuples.size() << " tuples\n";
    return 0;
}

int run_eval(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    const Stage stage = stage_from_string(args.stage_name);
    ToyModel model = model_for_stage(env, args);
    const MetricsRow row =
        evaluate(model, corpus, env.cfg.self_reward.tau, env.seed, stage, env.cfg.hash_hex(),
                 nullptr, env.paths.rollouts(stage));
    const std::string base = env.cfg.out_dir + "/eval_" + args.stage_name;
    write_report_jsonl({row}, base + ".jsonl");
    write_report_csv({row}, base + ".csv");
    std::cout << "stage " << args.stage_name << ": ter " << row.ter << ", style agreement "
              << row.style_agreement << ", mean reward " << row.mean_reward << "\n";
    return 0;
}

int run_probe(const CommonArgs& args) {
    Env env = load_env(args);
    const auto corpus = load_corpus_jsonl(env.paths.corpus());
    ToyModel model = model_for_stage(env, args);
    nlohmann::ordered_json j;
    j["seed"] = env.seed;
    j["stage"] = args.stage_name;
    j["strategy"] = to_string(model.strategy());
    j["grounding"] = to_string(model.grounding());
    j["config_hash"] = env.cfg.hash_hex();
    j["acc_e"] = probe_styles(model, corpus, ProbeRepr::kEmbed);
    j["acc_h"] = probe_styles(model, corpus, ProbeRepr::kHidden);
    j["acc_z"] = probe_styles(model, corpus, ProbeRepr::kIntent);
    const std::string path = env.cfg.out_dir + "/probe_" + args.stage_name + ".jsonl";
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    out << j.dump() << "\n";
    std::cout << "probe accuracies: e " << j["acc_e"] << ", h " << j["acc_h"] << ", z "
              << j["acc_z"] << "\n";
    return 0;
}

int run_ablate(const CommonArgs& args) {
    Env env = load_env(args);
    ExperimentConfig cfg = env.cfg;
    if (args.has_seed) cfg.seeds = {env.seed};
    const auto rows = ablate(cfg, cfg.out_dir);
    std::cout << "wrote " << rows.size() << " ablation rows to " << cfg.out_dir
              << "/ablation.jsonl\n";
    return 0;
}

const char* fault_kind(const std::exception& e) {
    if (dynamic_cast<const ContractViolation*>(&e)) return "ContractViolation";
    if (dynamic_cast<const NumericFault*>(&e)) return "NumericFault";
    if (dynamic_cast<const TrainingFault*>(&e)) return "TrainingFault";
    return "Error";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale intent-bottleneck sequence lab"};
    app.require_subcommand(1);

    CommonArgs args;
    CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    add_common(gen, args, false, false);
    CLI::App* s1 = app.add_subcommand("train-stage1", "train the speech pathway (cold start)");
    add_common(s1, args, false, false);
    CLI::App* s2 = app.add_subcommand("train-stage2", "fine-tune with the text loss");
    add_common(s2, args, false, true);
    CLI::App* col = app.add_subcommand("collect", "sample rollouts and build the replay buffer");
    add_common(col, args, false, true);
    CLI::App* up = app.add_subcommand("uapo-train", "preference optimization on the buffer");
    add_common(up, args, false, true);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    add_common(ev, args, true, true);
    CLI::App* ab = app.add_subcommand("ablate", "fusion x grounding grid over all seeds");
    add_common(ab, args, false, false);
    CLI::App* pr = app.add_subcommand("probe", "linear-probe style accuracy of e/h/z");
    add_common(pr, args, true, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return run_gen_corpus(args);
        if (s1->parsed()) return run_train_stage1(args);
        if (s2->parsed()) return run_train_stage2(args);
        if (col->parsed()) return run_collect(args);
        if (up->parsed()) return run_uapo_train(args);
        if (ev->parsed()) return run_eval(args);
        if (ab->parsed()) return run_ablate(args);
        if (pr->parsed()) return run_probe(args);
    } catch (const std::exception& e) {
        nlohmann::json j{{"error", {{"kind", fault_kind(e)}, {"message", e.what()}}}};
        std::cerr << j.dump() << std::endl;
        return 1;
    }
    return 0;
}
