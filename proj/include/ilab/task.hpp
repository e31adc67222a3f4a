#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ilab/faults.hpp"
#include "ilab/rng.hpp"

namespace ilab {

// Synthetic expressive-sequence task. Speech tokens carry a content channel
// and a style channel: y = content * n_styles + style, so both are exactly
// recoverable from a target sequence. Context tokens are style-informative
// up to a per-token corruption probability.
struct TaskConfig {
    int n_styles = 4;
    int content_vocab = 16;
    int context_vocab = 12;
    int context_len = 6;
    int seq_len_min = 4;
    int seq_len_max = 8;
    double style_noise = 0.1;
    int d_h = 32;
    int d_z = 8;
    int d_e = 16;

    int speech_vocab() const { return content_vocab * n_styles; }
    void validate() const;
};

struct Utterance {
    int id = 0;
    int style = 0;
    std::vector<int> content;
    std::vector<int> context;
    std::vector<int> target_speech;
    // Seeds the frozen backbone's per-position noise so every consumer sees
    // the same hidden states for this utterance.
    std::uint64_t noise_seed = 0;
};

inline int decode_content_token(int speech_token, int n_styles) { return speech_token / n_styles; }
inline int decode_style_token(int speech_token, int n_styles) { return speech_token % n_styles; }

std::vector<int> decode_content(const std::vector<int>& speech, int n_styles);

// Fraction of positions whose style channel equals `style`.
double style_agreement(const std::vector<int>& speech, int style, int n_styles);

std::vector<Utterance> generate_corpus(const TaskConfig& cfg, int n, Rng corpus_stream);

// Plurality vote over the context tokens' style classes; recovers the style
// exactly when style_noise = 0. Ties break toward the lowest style.
int majority_style(const std::vector<int>& context, int n_styles);

void save_corpus_jsonl(const std::vector<Utterance>& corpus, const std::string& path);
std::vector<Utterance> load_corpus_jsonl(const std::string& path);

// Deterministic 80/20 split by utterance id: id % 5 == 4 is held out.
bool is_heldout(const Utterance& u);
std::vector<Utterance> train_split(const std::vector<Utterance>& corpus);
std::vector<Utterance> eval_split(const std::vector<Utterance>& corpus);

} // namespace ilab
