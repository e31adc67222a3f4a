#include <cmath>
#include <cstdio>
#include <set>

#include "doctest.h"

#include "ilab/model.hpp"
#include "ilab/task.hpp"

using namespace ilab;

namespace {

TaskConfig tiny_task() {
    TaskConfig t;
    t.n_styles = 2;
    t.content_vocab = 5;
    t.context_vocab = 4;
    t.context_len = 3;
    t.seq_len_min = 2;
    t.seq_len_max = 4;
    t.d_h = 6;
    t.d_z = 3;
    t.d_e = 4;
    return t;
}

ToyModel tiny_model(FusionStrategy s, GroundingMode g, std::uint64_t seed = 17) {
    return ToyModel::init(tiny_task(), s, g, OuPriorConfig{}, Rng(seed).stream("init"));
}

Utterance first_utt(const TaskConfig& t, std::uint64_t seed = 5) {
    return generate_corpus(t, 1, Rng(seed).stream("corpus"))[0];
}

// Builds the named model loss against an arbitrary parameter store so the
// finite-difference oracle can perturb entries. The KL's detached prior
// means are frozen at their base-point values: central differences would
// otherwise see through the stop-gradient, which reverse mode rightly
// ignores.
struct LossBuilder {
    const ToyModel* model;
    const Utterance* utt;
    std::set<std::string> trainable;
    enum Kind { kRecon, kVib, kSpeech, kText, kStage2 } kind;
    double beta = 0.3;
    DenseArray frozen_prev;

    LossBuilder(const ToyModel& m, const Utterance& u, std::set<std::string> wrt, Kind k,
                double b = 0.3)
        : model(&m), utt(&u), trainable(std::move(wrt)), kind(k), beta(b) {
        if (m.strategy() == FusionStrategy::kVibAdaln)
            frozen_prev = shifted_prev_rows(m.posterior(m.hidden_states(u)));
    }

    ValueRef operator()(Graph& g, const ParamStore& p) const {
        ToyModel tmp = *model;
        tmp.params() = p;
        ToyModel::Bound b = tmp.bind(g, trainable);
        Rng zrng(99);
        const DenseArray* frozen = frozen_prev.data.empty() ? nullptr : &frozen_prev;
        if (kind == kText) return tmp.build_text_loss(g, b, *utt);
        auto refs = tmp.build_speech_loss(g, b, *utt, beta, &zrng, frozen);
        switch (kind) {
        case kRecon: return refs.recon;
        case kVib: return refs.vib;
        case kSpeech: return refs.speech;
        case kStage2: return g.add(refs.speech, tmp.build_text_loss(g, b, *utt));
        default: return refs.speech;
        }
    }
};

} // namespace

TEST_CASE("a zero-initialized intent encoder outputs the unit posterior") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic);
    for (const char* name : {"intent.mu.w", "intent.mu.b", "intent.logvar.w", "intent.logvar.b"})
        for (double& v : m.params().mutable_get(name).data) v = 0.0;
    const Utterance u = first_utt(m.task());
    const IntentPosterior post = m.posterior(m.hidden_states(u));
    CHECK(post.steps() == u.content.size());
    for (std::size_t i = 0; i < post.steps(); ++i)
        for (std::size_t k = 0; k < post.mu[i].size(); ++k) {
            CHECK(post.mu[i][k] == 0.0);
            CHECK(post.sigma[i][k] == 1.0);
        }
}

TEST_CASE("the posterior is strictly per position") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic);
    const Utterance u = first_utt(m.task());
    DenseArray h = m.hidden_states(u);
    const IntentPosterior base = m.posterior(h);
    const std::size_t j = 1;
    for (std::size_t k = 0; k < h.cols(); ++k) h.at(j, k) += 0.37;
    const IntentPosterior bumped = m.posterior(h);
    for (std::size_t i = 0; i < base.steps(); ++i) {
        const bool changed = base.mu[i] != bumped.mu[i] || base.sigma[i] != bumped.sigma[i];
        CHECK(changed == (i == j));
    }
}

TEST_CASE("an untrained head is exactly uniform") {
    for (FusionStrategy s : {FusionStrategy::kContentOnly, FusionStrategy::kVibAdaln}) {
        ToyModel m = tiny_model(s, GroundingMode::kAcoustic);
        const Utterance u = first_utt(m.task());
        Graph g;
        ToyModel::Bound b = m.bind(g, {});
        auto refs = m.build_speech_loss(g, b, u, 0.0, nullptr);
        const double expect = static_cast<double>(u.target_speech.size()) *
                              std::log(static_cast<double>(m.task().speech_vocab()));
        CHECK(g.scalar_value(refs.recon) == doctest::Approx(expect).epsilon(1e-13));
        CHECK(g.scalar_value(refs.speech) == g.scalar_value(refs.recon)); // beta = 0
    }
}

TEST_CASE("text loss matches uniform and near-one-hot landmarks") {
    ToyModel m = tiny_model(FusionStrategy::kContentOnly, GroundingMode::kNone);
    Utterance u = first_utt(m.task());
    // uniform: zero readout
    for (double& v : m.params().mutable_get("text_head.w").data) v = 0.0;
    for (double& v : m.params().mutable_get("text_head.b").data) v = 0.0;
    {
        Graph g;
        ToyModel::Bound b = m.bind(g, {});
        const double expect = static_cast<double>(u.content.size()) *
                              std::log(static_cast<double>(m.task().content_vocab));
        CHECK(g.scalar_value(m.build_text_loss(g, b, u)) ==
              doctest::Approx(expect).epsilon(1e-13));
    }
    // near-one-hot: constant content plus a huge bias on that token
    for (int& c : u.content) c = 3;
    for (std::size_t j = 0; j < u.target_speech.size(); ++j)
        u.target_speech[j] = 3 * m.task().n_styles + u.style;
    m.params().mutable_get("text_head.b").at(0, 3) = 200.0;
    {
        Graph g;
        ToyModel::Bound b = m.bind(g, {});
        CHECK(g.scalar_value(m.build_text_loss(g, b, u)) < 1e-10);
    }
}

TEST_CASE("model losses pass the finite-difference oracle") {
    const std::set<std::string> wrt_speech = {"head.w_f", "head.w_g", "head.b",
                                              "head.speech_embed", "gen.embed", "adaln.gamma.w",
                                              "adaln.delta.b", "intent.mu.w", "intent.logvar.w"};
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic, 23);
    // move the speech head off its zero init so gradients are generic
    Rng r(41);
    for (const char* name : {"head.w_f", "head.w_g", "head.w_p", "head.b"})
        for (double& v : m.params().mutable_get(name).data) v = 0.2 * r.normal();
    const Utterance u = first_utt(m.task(), 77);

    LossBuilder recon(m, u, wrt_speech, LossBuilder::kRecon);
    CHECK(finite_diff_check(recon, m.params(), {"head.w_f", "head.speech_embed", "intent.mu.w"},
                            1e-5) < 1e-4);

    LossBuilder vib(m, u, wrt_speech, LossBuilder::kVib);
    CHECK(finite_diff_check(vib, m.params(), {"intent.mu.w", "intent.logvar.w"}, 1e-5) < 1e-4);

    LossBuilder speech(m, u, wrt_speech, LossBuilder::kSpeech);
    CHECK(finite_diff_check(speech, m.params(), {"intent.logvar.w", "adaln.gamma.w", "gen.embed"},
                            1e-5) < 1e-4);

    const std::set<std::string> wrt_stage2 = {"backbone.last.w", "backbone.last.b", "head.w_f"};
    LossBuilder stage2(m, u, wrt_stage2, LossBuilder::kStage2);
    CHECK(finite_diff_check(stage2, m.params(), {"backbone.last.w", "backbone.last.b"}, 1e-5) <
          1e-4);

    LossBuilder text(m, u, wrt_stage2, LossBuilder::kText);
    CHECK(finite_diff_check(text, m.params(), {"backbone.last.w"}, 1e-5) < 1e-4);
}

TEST_CASE("greedy decode is deterministic and cold sampling converges to it") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic, 29);
    Rng r(43);
    for (const char* name : {"head.w_f", "head.w_g", "head.w_p", "head.b"})
        for (double& v : m.params().mutable_get(name).data) v = 0.5 * r.normal();
    const Utterance u = first_utt(m.task(), 31);

    const auto g1 = m.decode_greedy(u);
    const auto g2 = m.decode_greedy(u);
    CHECK(g1.tokens == g2.tokens);
    CHECK(g1.logp == g2.logp);

    const auto cold = m.decode_sample(u, 1e-5, Rng(7));
    CHECK(cold.tokens == g1.tokens);

    // warm sampling with different streams should eventually differ
    const auto s1 = m.decode_sample(u, 1.5, Rng(1));
    const auto s2 = m.decode_sample(u, 1.5, Rng(2));
    const auto s1_again = m.decode_sample(u, 1.5, Rng(1));
    CHECK(s1.tokens == s1_again.tokens);
    CHECK((s1.tokens != s2.tokens || s1.tokens != g1.tokens));
}

TEST_CASE("recorded log-probabilities match a re-scoring pass") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic, 37);
    Rng r(47);
    for (const char* name : {"head.w_f", "head.w_g", "head.w_p", "head.b"})
        for (double& v : m.params().mutable_get(name).data) v = 0.5 * r.normal();
    const Utterance u = first_utt(m.task(), 53);

    const auto sampled = m.decode_sample(u, 1.0, Rng(11));
    const auto rescored = m.rescore(u, sampled.tokens);
    double sum_rec = 0.0, sum_res = 0.0;
    for (std::size_t j = 0; j < sampled.logp.size(); ++j) {
        sum_rec += sampled.logp[j];
        sum_res += rescored[j];
    }
    CHECK(std::abs(sum_rec - sum_res) < 1e-10);

    // the graph route used by the preference losses agrees too
    Graph g;
    ToyModel::Bound b = m.bind(g, {});
    ValueRef lp = m.build_sequence_logprob(g, b, u, sampled.tokens);
    double sum_graph = 0.0;
    for (double v : g.value(lp).data) sum_graph += v;
    CHECK(std::abs(sum_graph - sum_rec) < 1e-10);
}

TEST_CASE("stage training respects the freeze contracts") {
    TaskConfig t = tiny_task();
    const auto corpus = generate_corpus(t, 60, Rng(3).stream("corpus"));
    ToyModel m = ToyModel::init(t, FusionStrategy::kVibAdaln, GroundingMode::kAcoustic,
                                OuPriorConfig{}, Rng(8).stream("init"));
    StageSchedule sched{40, 0.05, 4};

    const std::uint64_t frozen_before = m.frozen_hash(m.stage1_trainable());
    const std::uint64_t head_before = m.params().hash_of("head.w_f");
    train_stage1(m, train_split(corpus), sched, Rng(8).stream("stage1"));
    CHECK(m.frozen_hash(m.stage1_trainable()) == frozen_before);
    CHECK(m.params().hash_of("head.w_f") != head_before);

    const std::uint64_t frozen2_before = m.frozen_hash(m.stage2_trainable());
    const std::uint64_t last_before = m.params().hash_of("backbone.last.w");
    train_stage2(m, train_split(corpus), sched, Rng(8).stream("stage2"));
    CHECK(m.frozen_hash(m.stage2_trainable()) == frozen2_before);
    CHECK(m.params().hash_of("backbone.last.w") != last_before);
}

TEST_CASE("beta stays zero through the warm-up fraction of stage 1") {
    TaskConfig t = tiny_task();
    const auto corpus = generate_corpus(t, 40, Rng(5).stream("corpus"));
    ToyModel m = ToyModel::init(t, FusionStrategy::kVibAdaln, GroundingMode::kAcoustic,
                                OuPriorConfig{}, Rng(6).stream("init"));
    StageSchedule sched{50, 0.05, 4};
    TrainTrace trace = train_stage1(m, corpus, sched, Rng(6).stream("stage1"));
    REQUIRE(trace.entries.size() == 50);
    // the warm-up covers steps 0..4 and the schedule is continuous at step 5
    for (int s = 0; s <= 5; ++s) CHECK(trace.entries[static_cast<std::size_t>(s)].beta == 0.0);
    CHECK(trace.entries[6].beta > 0.0);
    CHECK(trace.entries.back().beta > trace.entries[10].beta);
}

TEST_CASE("short stage-1 training reduces the loss") {
    TaskConfig t = tiny_task();
    const auto corpus = generate_corpus(t, 200, Rng(15).stream("corpus"));
    ToyModel m = ToyModel::init(t, FusionStrategy::kContentOnly, GroundingMode::kAcoustic,
                                OuPriorConfig{}, Rng(15).stream("init"));
    StageSchedule sched{300, 0.08, 8};
    TrainTrace trace = train_stage1(m, train_split(corpus), sched, Rng(15).stream("stage1"));
    const double early = trace.moving_average(50, 50);
    const double late = trace.moving_average(trace.entries.size(), 50);
    CHECK(late < early);
}

TEST_CASE("checkpoints round-trip bitwise") {
    ToyModel m = tiny_model(FusionStrategy::kVanillaAdaln, GroundingMode::kSemantic, 61);
    save_checkpoint(m, Stage::kStage1, 61, "{\"note\":\"t\"}", "test_ckpt.json");
    const Checkpoint ck = load_checkpoint("test_ckpt.json");
    CHECK(ck.stage == Stage::kStage1);
    CHECK(ck.seed == 61);
    CHECK(ck.model.strategy() == FusionStrategy::kVanillaAdaln);
    CHECK(ck.model.grounding() == GroundingMode::kSemantic);
    CHECK(ck.model.params().hash_all() == m.params().hash_all());
    std::remove("test_ckpt.json");
}

TEST_CASE("anchor decode never reads the context") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic, 67);
    Rng r(71);
    for (const char* name : {"head.w_f", "head.w_g", "head.w_p", "head.b"})
        for (double& v : m.params().mutable_get(name).data) v = 0.5 * r.normal();
    Utterance u = first_utt(m.task(), 73);
    const std::vector<int> text{1, 4, 0};
    const auto a1 = m.decode_anchor(u, text);
    std::rotate(u.context.begin(), u.context.begin() + 1, u.context.end());
    u.style = (u.style + 1) % m.task().n_styles;
    const auto a2 = m.decode_anchor(u, text);
    CHECK(a1.tokens == a2.tokens);
    CHECK(a1.logp == a2.logp);
}

TEST_CASE("decode rejects incompatible overrides") {
    ToyModel m = tiny_model(FusionStrategy::kVibAdaln, GroundingMode::kAcoustic);
    const Utterance u = first_utt(m.task());
    CHECK_THROWS_AS((void)m.decode(u, FusionStrategy::kVanillaAdaln, GroundingMode::kAcoustic,
                                   DecodeMode::kGreedy, 0.0, nullptr, nullptr),
                    ContractViolation);
    CHECK_THROWS_AS((void)m.decode(u, FusionStrategy::kVibAdaln, GroundingMode::kSemantic,
                                   DecodeMode::kGreedy, 0.0, nullptr, nullptr),
                    ContractViolation);
}

TEST_CASE("planted and chance probes behave as expected") {
    Rng r(81);
    std::vector<std::vector<double>> train_x, test_x;
    std::vector<int> train_y, test_y;
    const int n_classes = 4;
    for (int i = 0; i < 400; ++i) {
        const int y = r.uniform_int(n_classes);
        std::vector<double> x(n_classes, 0.0);
        x[static_cast<std::size_t>(y)] = 1.0;
        for (auto& v : x) v += 0.05 * r.normal();
        if (i % 5 == 4) {
            test_x.push_back(x);
            test_y.push_back(y);
        } else {
            train_x.push_back(x);
            train_y.push_back(y);
        }
    }
    CHECK(linear_probe_accuracy(train_x, train_y, test_x, test_y, n_classes) > 0.95);

    // random labels: accuracy near chance
    Rng r2(82);
    for (auto& y : train_y) y = r2.uniform_int(n_classes);
    for (auto& y : test_y) y = r2.uniform_int(n_classes);
    const double acc = linear_probe_accuracy(train_x, train_y, test_x, test_y, n_classes);
    CHECK(acc < 0.45);
}
