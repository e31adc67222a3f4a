#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "ilab/task.hpp"

using namespace ilab;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("target speech factorizes back into content and style exactly") {
    TaskConfig cfg;
    const auto corpus = generate_corpus(cfg, 500, Rng(1).stream("corpus"));
    for (const Utterance& u : corpus) {
        CHECK(decode_content(u.target_speech, cfg.n_styles) == u.content);
        for (int y : u.target_speech) CHECK(decode_style_token(y, cfg.n_styles) == u.style);
        CHECK(u.content.size() >= static_cast<std::size_t>(cfg.seq_len_min));
        CHECK(u.content.size() <= static_cast<std::size_t>(cfg.seq_len_max));
        CHECK(u.context.size() == static_cast<std::size_t>(cfg.context_len));
    }
}

TEST_CASE("noise-free context makes majority style decoding exact") {
    TaskConfig cfg;
    cfg.style_noise = 0.0;
    const auto corpus = generate_corpus(cfg, 1000, Rng(2).stream("corpus"));
    for (const Utterance& u : corpus) CHECK(majority_style(u.context, cfg.n_styles) == u.style);
}

TEST_CASE("style frequencies match the uniform prior") {
    TaskConfig cfg;
    const int n = 10000;
    const auto corpus = generate_corpus(cfg, n, Rng(3).stream("corpus"));
    std::vector<int> counts(static_cast<std::size_t>(cfg.n_styles), 0);
    for (const Utterance& u : corpus) ++counts[static_cast<std::size_t>(u.style)];
    const double p = 1.0 / cfg.n_styles;
    const double sd = std::sqrt(p * (1 - p) * n);
    for (int c : counts) CHECK(std::abs(c - n * p) < 3.0 * sd);
}

TEST_CASE("identical seeds give bitwise-identical corpora") {
    TaskConfig cfg;
    const auto a = generate_corpus(cfg, 200, Rng(7).stream("corpus"));
    const auto b = generate_corpus(cfg, 200, Rng(7).stream("corpus"));
    save_corpus_jsonl(a, "test_corpus_a.jsonl");
    save_corpus_jsonl(b, "test_corpus_b.jsonl");
    CHECK(slurp("test_corpus_a.jsonl") == slurp("test_corpus_b.jsonl"));
    std::remove("test_corpus_a.jsonl");
    std::remove("test_corpus_b.jsonl");
}

TEST_CASE("corpus files round-trip") {
    TaskConfig cfg;
    const auto corpus = generate_corpus(cfg, 50, Rng(9).stream("corpus"));
    save_corpus_jsonl(corpus, "test_corpus_rt.jsonl");
    const auto loaded = load_corpus_jsonl("test_corpus_rt.jsonl");
    REQUIRE(loaded.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].id == corpus[i].id);
        CHECK(loaded[i].style == corpus[i].style);
        CHECK(loaded[i].content == corpus[i].content);
        CHECK(loaded[i].context == corpus[i].context);
        CHECK(loaded[i].target_speech == corpus[i].target_speech);
        CHECK(loaded[i].noise_seed == corpus[i].noise_seed);
    }
    std::remove("test_corpus_rt.jsonl");
}

TEST_CASE("bad configurations are rejected") {
    TaskConfig cfg;
    cfg.style_noise = 0.5;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    cfg = TaskConfig{};
    cfg.context_vocab = 2;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    cfg = TaskConfig{};
    cfg.seq_len_min = 5;
    cfg.seq_len_max = 4;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    CHECK_THROWS_AS((void)generate_corpus(TaskConfig{}, 0, Rng(1)), ContractViolation);
}

TEST_CASE("the held-out split is a disjoint 80/20 partition") {
    TaskConfig cfg;
    const auto corpus = generate_corpus(cfg, 1000, Rng(4).stream("corpus"));
    const auto train = train_split(corpus);
    const auto eval = eval_split(corpus);
    CHECK(train.size() + eval.size() == corpus.size());
    CHECK(eval.size() == 200);
    for (const Utterance& u : eval) CHECK(u.id % 5 == 4);
    for (const Utterance& u : train) CHECK(u.id % 5 != 4);
}

TEST_CASE("style agreement counts the style channel") {
    // tokens 4*c+s with n_styles=4
    CHECK(style_agreement({2, 6, 10}, 2, 4) == doctest::Approx(1.0));
    CHECK(style_agreement({2, 7, 10, 11}, 2, 4) == doctest::Approx(0.5));
}
