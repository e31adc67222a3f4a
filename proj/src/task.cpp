#include "ilab/task.hpp"

#include <fstream>

#include "json.hpp"

namespace ilab {

void TaskConfig::validate() const {
    if (n_styles < 2) throw ContractViolation("task needs at least 2 styles");
    if (content_vocab < 2) throw ContractViolation("task needs content_vocab >= 2");
    if (context_vocab < n_styles)
        throw ContractViolation("context_vocab must be >= n_styles so context can carry style");
    if (context_len < 1) throw ContractViolation("context_len must be positive");
    if (seq_len_min < 1 || seq_len_max < seq_len_min)
        throw ContractViolation("invalid sequence length range");
    if (!(style_noise >= 0.0 && style_noise < 0.5))
        throw ContractViolation("style_noise must lie in [0, 0.5) so style stays recoverable");
    if (d_h < 1 || d_z < 1 || d_e < 1) throw ContractViolation("model dims must be positive");
}

std::vector<int> decode_content(const std::vector<int>& speech, int n_styles) {
    std::vector<int> out(speech.size());
    for (std::size_t i = 0; i < speech.size(); ++i)
        out[i] = decode_content_token(speech[i], n_styles);
    return out;
}

double style_agreement(const std::vector<int>& speech, int style, int n_styles) {
    if (speech.empty()) return 0.0;
    int hits = 0;
    for (int y : speech)
        if (decode_style_token(y, n_styles) == style) ++hits;
    return static_cast<double>(hits) / static_cast<double>(speech.size());
}

std::vector<Utterance> generate_corpus(const TaskConfig& cfg, int n, Rng corpus_stream) {
    cfg.validate();
    if (n < 1) throw ContractViolation("corpus size must be >= 1");
    std::vector<Utterance> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng r = corpus_stream.stream(static_cast<std::uint64_t>(i));
        Utterance& u = out[static_cast<std::size_t>(i)];
        u.id = i;
        u.style = r.uniform_int(cfg.n_styles);
        const int len = cfg.seq_len_min + r.uniform_int(cfg.seq_len_max - cfg.seq_len_min + 1);
        u.content.resize(static_cast<std::size_t>(len));
        u.target_speech.resize(static_cast<std::size_t>(len));
        for (int j = 0; j < len; ++j) {
            u.content[static_cast<std::size_t>(j)] = r.uniform_int(cfg.content_vocab);
            u.target_speech[static_cast<std::size_t>(j)] =
                u.content[static_cast<std::size_t>(j)] * cfg.n_styles + u.style;
        }
        u.context.resize(static_cast<std::size_t>(cfg.context_len));
        const int per_class = (cfg.context_vocab - u.style + cfg.n_styles - 1) / cfg.n_styles;
        for (int j = 0; j < cfg.context_len; ++j) {
            int tok = u.style + cfg.n_styles * r.uniform_int(per_class);
            if (r.uniform() < cfg.style_noise) tok = r.uniform_int(cfg.context_vocab);
            u.context[static_cast<std::size_t>(j)] = tok;
        }
        u.noise_seed = r.next_u64();
    }
    return out;
}

int majority_style(const std::vector<int>& context, int n_styles) {
    if (context.empty()) throw ContractViolation("majority_style needs a nonempty context");
    std::vector<int> counts(static_cast<std::size_t>(n_styles), 0);
    for (int t : context) ++counts[static_cast<std::size_t>(t % n_styles)];
    int best = 0;
    for (int s = 1; s < n_styles; ++s)
        if (counts[static_cast<std::size_t>(s)] > counts[static_cast<std::size_t>(best)]) best = s;
    return best;
}

void save_corpus_jsonl(const std::vector<Utterance>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    for (const Utterance& u : corpus) {
        nlohmann::ordered_json j;
        j["id"] = u.id;
        j["style"] = u.style;
        j["content"] = u.content;
        j["context"] = u.context;
        j["target_speech"] = u.target_speech;
        j["noise_seed"] = u.noise_seed;
        out << j.dump() << "\n";
    }
}

std::vector<Utterance> load_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open corpus file '" + path + "'");
    std::vector<Utterance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Utterance u;
        u.id = j.at("id").get<int>();
        u.style = j.at("style").get<int>();
        u.content = j.at("content").get<std::vector<int>>();
        u.context = j.at("context").get<std::vector<int>>();
        u.target_speech = j.at("target_speech").get<std::vector<int>>();
        u.noise_seed = j.at("noise_seed").get<std::uint64_t>();
        out.push_back(std::move(u));
    }
    return out;
}

bool is_heldout(const Utterance& u) { return u.id % 5 == 4; }

std::vector<Utterance> train_split(const std::vector<Utterance>& corpus) {
    std::vector<Utterance> out;
    for (const auto& u : corpus)
        if (!is_heldout(u)) out.push_back(u);
    return out;
}

std::vector<Utterance> eval_split(const std::vector<Utterance>& corpus) {
    std::vector<Utterance> out;
    for (const auto& u : corpus)
        if (is_heldout(u)) out.push_back(u);
    return out;
}

} // namespace ilab
