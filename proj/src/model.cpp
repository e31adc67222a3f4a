#include "ilab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ilab/kernels.hpp"
#include "ilab/serialize.hpp"

namespace ilab {

const char* to_string(GroundingMode m) {
    switch (m) {
    case GroundingMode::kNone: return "none";
    case GroundingMode::kSemantic: return "semantic";
    case GroundingMode::kAcoustic: return "acoustic";
    }
    return "?";
}

GroundingMode grounding_from_string(const std::string& s) {
    if (s == "none") return GroundingMode::kNone;
    if (s == "semantic") return GroundingMode::kSemantic;
    if (s == "acoustic") return GroundingMode::kAcoustic;
    throw ContractViolation("unknown grounding mode '" + s + "'");
}

const char* to_string(Stage s) {
    switch (s) {
    case Stage::kInit: return "init";
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
    case Stage::kUapo: return "uapo";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "init") return Stage::kInit;
    if (s == "stage1") return Stage::kStage1;
    if (s == "stage2") return Stage::kStage2;
    if (s == "uapo") return Stage::kUapo;
    throw ContractViolation("unknown stage '" + s + "'");
}

namespace {

// sigma = exp(logvar / 2) clamped to [1e-4, 1e4]
const double kLogVarLo = 2.0 * std::log(1e-4);
const double kLogVarHi = 2.0 * std::log(1e4);

DenseArray gaussian(std::vector<std::size_t> shape, double sd, Rng& r) {
    DenseArray a = DenseArray::zeros(std::move(shape));
    for (double& v : a.data) v = sd * r.normal();
    return a;
}

DenseArray identity(std::size_t n) {
    DenseArray a = DenseArray::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) a.at(i, i) = 1.0;
    return a;
}

// Frozen per-position backbone noise, keyed by the utterance so every
// consumer (graph builds, decode, probes) sees identical hidden states.
DenseArray backbone_noise(std::uint64_t noise_seed, const char* tag, std::size_t n,
                          std::size_t d) {
    Rng r = Rng(noise_seed).stream(tag);
    return gaussian({n, d}, ToyModel::kHiddenNoise, r);
}

DenseArray matmul_arr(const DenseArray& a, const DenseArray& b) {
    DenseArray c = DenseArray::zeros({a.rows(), b.cols()});
    kernels::matmul(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols());
    return c;
}

void add_row_inplace(DenseArray& x, const DenseArray& row) {
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) x.at(i, j) += row.at(0, j);
}

DenseArray mean_rows_arr(const DenseArray& x) {
    DenseArray ones = DenseArray::full({1, x.rows()}, 1.0 / static_cast<double>(x.rows()));
    return matmul_arr(ones, x);
}

DenseArray normalized_hidden_arr(const DenseArray& h) {
    DenseArray out = DenseArray::zeros(h.shape);
    kernels::layer_norm_rows(h.data.data(), out.data.data(), h.rows(), h.cols(), Graph::kNormEps);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(h.cols()));
    for (double& v : out.data) v *= inv_sqrt;
    return out;
}

std::vector<int> shifted_targets(const std::vector<int>& tokens, int bos) {
    std::vector<int> prev(tokens.size());
    prev[0] = bos;
    for (std::size_t j = 1; j < tokens.size(); ++j) prev[j] = tokens[j - 1];
    return prev;
}

} // namespace

ToyModel ToyModel::init(const TaskConfig& task, FusionStrategy strategy, GroundingMode grounding,
                        const OuPriorConfig& ou, Rng init_stream) {
    task.validate();
    ou.validate();
    ToyModel m;
    m.task_ = task;
    m.strategy_ = strategy;
    m.grounding_ = grounding;
    m.ou_ = ou;

    const auto d_e = static_cast<std::size_t>(task.d_e);
    const auto d_h = static_cast<std::size_t>(task.d_h);
    const auto d_z = static_cast<std::size_t>(task.d_z);
    const auto v_c = static_cast<std::size_t>(task.content_vocab);
    const auto v_x = static_cast<std::size_t>(task.context_vocab);
    const auto v_s = static_cast<std::size_t>(task.speech_vocab());
    const auto n_s = static_cast<std::size_t>(task.n_styles);
    const double inv_sqrt_de = 1.0 / std::sqrt(static_cast<double>(d_e));

    Rng r = init_stream;
    ParamStore& p = m.params_;
    p.add("embed.content", gaussian({v_c, d_e}, 1.0, r));
    p.add("embed.ctx", gaussian({v_x, d_e}, 1.0, r));
    p.add("backbone.w1", gaussian({d_e, d_h}, kContentGain * inv_sqrt_de, r));
    p.add("backbone.w2", gaussian({d_e, d_h}, kStyleGain * inv_sqrt_de, r));
    p.add("backbone.style_emb", gaussian({n_s, d_e}, 1.0, r));
    p.add("backbone.w1x", gaussian({d_e, d_h}, kContentGain * inv_sqrt_de, r));
    p.add("backbone.last.w", identity(d_h));
    p.add("backbone.last.b", DenseArray::zeros({1, d_h}));
    // The frozen text head is a matched filter for the content channel:
    // logits_c = <h, W1^T e_c> / d_h. It stands in for the pretrained text
    // pathway, which decodes content reliably before any training here.
    {
        const DenseArray& emb = p.get("embed.content");
        const DenseArray& w1 = p.get("backbone.w1");
        DenseArray proto = DenseArray::zeros({v_c, d_h});
        kernels::matmul(emb.data.data(), w1.data.data(), proto.data.data(), v_c, d_e, d_h);
        DenseArray wt = DenseArray::zeros({d_h, v_c});
        for (std::size_t c = 0; c < v_c; ++c)
            for (std::size_t j = 0; j < d_h; ++j)
                wt.at(j, c) = proto.at(c, j) / (2.0 * static_cast<double>(d_h));
        p.add("text_head.w", std::move(wt));
    }
    p.add("text_head.b", DenseArray::zeros({1, v_c}));
    p.add("fusion.proj_h", gaussian({d_h, d_e}, 1.0, r));
    p.add("intent.mu.w", gaussian({d_h, d_z}, kEncoderInit, r));
    p.add("intent.mu.b", DenseArray::zeros({1, d_z}));
    p.add("intent.logvar.w", gaussian({d_h, d_z}, kEncoderInit, r));
    p.add("intent.logvar.b", DenseArray::full({1, d_z}, kLogVarBiasInit));
    add_adaln_params(p, "adaln", m.adaln_cond_dim(), d_e);
    p.add("gen.embed", gaussian({v_x, d_z}, kGenEmbedInit, r));
    p.add("head.w_f", DenseArray::zeros({d_e, v_s}));
    p.add("head.w_g", DenseArray::zeros({m.grounding_dim(), v_s}));
    p.add("head.w_p", DenseArray::zeros({d_e, v_s}));
    p.add("head.b", DenseArray::zeros({1, v_s}));
    p.add("head.speech_embed", gaussian({v_s + 1, d_e}, 1.0, r));
    return m;
}

std::size_t ToyModel::grounding_dim() const {
    return grounding_ == GroundingMode::kSemantic ? static_cast<std::size_t>(task_.d_h)
                                                  : static_cast<std::size_t>(task_.d_z);
}

std::size_t ToyModel::adaln_cond_dim() const {
    return strategy_ == FusionStrategy::kVanillaAdaln ? static_cast<std::size_t>(task_.d_h)
                                                      : static_cast<std::size_t>(task_.d_z);
}

std::set<std::string> ToyModel::stage1_trainable() const {
    return {"head.w_f",      "head.w_g",      "head.w_p",        "head.b",
            "head.speech_embed", "gen.embed",
            "adaln.gamma.w", "adaln.gamma.b", "adaln.delta.w",   "adaln.delta.b",
            "intent.mu.w",   "intent.mu.b",   "intent.logvar.w", "intent.logvar.b"};
}

std::set<std::string> ToyModel::stage2_trainable() const {
    auto s = stage1_trainable();
    for (const auto& n : backbone_last_names()) s.insert(n);
    return s;
}

std::vector<std::string> ToyModel::backbone_last_names() const {
    return {"backbone.last.w", "backbone.last.b"};
}

std::uint64_t ToyModel::frozen_hash(const std::set<std::string>& trainable) const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& name : params_.names())
        if (!trainable.count(name)) h = bitwise_hash(params_.get(name), h);
    return h;
}

// --------------------------------------------------------------- graph side

ValueRef ToyModel::Bound::at(const std::string& name) const {
    auto it = refs.find(name);
    if (it == refs.end()) throw ContractViolation("parameter '" + name + "' not bound");
    return it->second;
}

ToyModel::Bound ToyModel::bind(Graph& g, const std::set<std::string>& trainable) const {
    Bound b;
    for (const auto& name : params_.names())
        b.refs[name] = g.param(name, params_.get(name), trainable.count(name) != 0);
    return b;
}

namespace {

ValueRef build_hidden_node(Graph& g, const ToyModel::Bound& b, const Utterance& u, ValueRef e,
                           std::size_t d_h) {
    ValueRef style_e = g.gather_rows(b.at("backbone.style_emb"), {u.style});
    ValueRef style_h = g.matmul(style_e, b.at("backbone.w2"));
    ValueRef hpre = g.add(g.add(g.matmul(e, b.at("backbone.w1")), style_h),
                          g.constant(backbone_noise(u.noise_seed, "h", g.value(e).rows(), d_h)));
    return g.add(g.matmul(hpre, b.at("backbone.last.w")), b.at("backbone.last.b"));
}

ValueRef build_context_hidden_node(Graph& g, const ToyModel::Bound& b, const Utterance& u,
                                   std::size_t d_h) {
    ValueRef xe = g.gather_rows(b.at("embed.ctx"), u.context);
    ValueRef hpre = g.add(g.matmul(xe, b.at("backbone.w1x")),
                          g.constant(backbone_noise(u.noise_seed, "ctx", u.context.size(), d_h)));
    return g.add(g.matmul(hpre, b.at("backbone.last.w")), b.at("backbone.last.b"));
}

ValueRef build_grounding_node(Graph& g, const ToyModel::Bound& b, const Utterance& u,
                              GroundingMode mode, std::size_t dim, std::size_t d_h) {
    switch (mode) {
    case GroundingMode::kNone: return g.constant(DenseArray::zeros({1, dim}));
    case GroundingMode::kAcoustic:
        return g.mean_rows(g.gather_rows(b.at("gen.embed"), u.context));
    case GroundingMode::kSemantic:
        return g.mean_rows(normalized_hidden_node(g, build_context_hidden_node(g, b, u, d_h)));
    }
    throw ContractViolation("unreachable grounding mode");
}

// The speech pathway consumes hidden states through this normalized
// unit-scale view (the stand-in for a transformer's final LayerNorm): raw
// states have width- and gain-dependent norms that blow up the curvature of
// every consumer under momentum SGD. The text head keeps the raw states.
ValueRef normalized_hidden_node(Graph& g, ValueRef h) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(g.value(h).cols()));
    return g.scale(g.row_layer_norm(h), inv_sqrt);
}

struct IntentNodes {
    ValueRef mu, sigma, z;
};

IntentNodes build_intent_nodes(Graph& g, const ToyModel::Bound& b, ValueRef hn, Rng* sample_rng,
                               std::size_t d_z) {
    IntentNodes out;
    out.mu = g.add(g.matmul(hn, b.at("intent.mu.w")), b.at("intent.mu.b"));
    ValueRef lv = g.clamp(g.add(g.matmul(hn, b.at("intent.logvar.w")), b.at("intent.logvar.b")),
                          kLogVarLo, kLogVarHi);
    out.sigma = g.exp(g.scale(lv, 0.5));
    if (sample_rng) {
        DenseArray eps = DenseArray::zeros({g.value(hn).rows(), d_z});
        for (double& v : eps.data) v = sample_rng->normal();
        out.z = g.add(out.mu, g.mul(out.sigma, g.constant(std::move(eps))));
    } else {
        out.z = out.mu;
    }
    return out;
}

ValueRef build_logits_node(Graph& g, const ToyModel::Bound& b, ValueRef f, ValueRef rg,
                           const std::vector<int>& prev) {
    ValueRef pe = g.gather_rows(b.at("head.speech_embed"), prev);
    return g.add(g.add(g.add(g.matmul(f, b.at("head.w_f")), g.matmul(pe, b.at("head.w_p"))),
                       g.matmul(rg, b.at("head.w_g"))),
                 b.at("head.b"));
}

} // namespace

ToyModel::SpeechLossRefs ToyModel::build_speech_loss(Graph& g, const Bound& b, const Utterance& u,
                                                     double beta, Rng* sample_rng,
                                                     const DenseArray* frozen_kl_prev) const {
    if (u.content.empty()) throw ContractViolation("utterance has no content tokens");
    const auto d_h = static_cast<std::size_t>(task_.d_h);
    ValueRef e = g.gather_rows(b.at("embed.content"), u.content);

    ValueRef hn{}, z{};
    ValueRef vib = g.scalar(0.0);
    if (fusion_needs_hidden(strategy_) || fusion_needs_intent(strategy_))
        hn = normalized_hidden_node(g, build_hidden_node(g, b, u, e, d_h));
    if (strategy_ == FusionStrategy::kVibAdaln) {
        IntentNodes in =
            build_intent_nodes(g, b, hn, sample_rng, static_cast<std::size_t>(task_.d_z));
        z = in.z;
        vib = kl_ou_sequence_node(g, in.mu, in.sigma, ou_, frozen_kl_prev);
    }

    AdaLnRefs ar{b.at("adaln.gamma.w"), b.at("adaln.gamma.b"), b.at("adaln.delta.w"),
                 b.at("adaln.delta.b")};
    ValueRef f = fuse(g, e, hn, z, strategy_, &ar, b.at("fusion.proj_h"));
    ValueRef rg = build_grounding_node(g, b, u, grounding_, grounding_dim(), d_h);
    ValueRef logits = build_logits_node(g, b, f, rg, shifted_targets(u.target_speech, task_.speech_vocab()));
    ValueRef picked = g.gather_per_row(g.log_softmax(logits), u.target_speech);

    SpeechLossRefs out;
    out.recon = g.scale(g.sum(picked), -1.0);
    out.vib = vib;
    out.speech = g.add(out.recon, g.scale(vib, beta));
    return out;
}

ValueRef ToyModel::build_text_loss(Graph& g, const Bound& b, const Utterance& u) const {
    if (u.content.empty()) throw ContractViolation("utterance has no content tokens");
    ValueRef e = g.gather_rows(b.at("embed.content"), u.content);
    ValueRef h = build_hidden_node(g, b, u, e, static_cast<std::size_t>(task_.d_h));
    ValueRef logits = g.add(g.matmul(h, b.at("text_head.w")), b.at("text_head.b"));
    return g.scale(g.sum(g.gather_per_row(g.log_softmax(logits), u.content)), -1.0);
}

ValueRef ToyModel::build_sequence_logprob(Graph& g, const Bound& b, const Utterance& u,
                                          const std::vector<int>& tokens) const {
    if (tokens.empty()) throw ContractViolation("cannot score an empty sequence");
    if (tokens.size() != u.content.size())
        throw ContractViolation("scored sequence length " + std::to_string(tokens.size()) +
                                " does not match conditioning length " +
                                std::to_string(u.content.size()));
    const auto d_h = static_cast<std::size_t>(task_.d_h);
    ValueRef e = g.gather_rows(b.at("embed.content"), u.content);
    ValueRef hn{}, z{};
    if (fusion_needs_hidden(strategy_) || fusion_needs_intent(strategy_))
        hn = normalized_hidden_node(g, build_hidden_node(g, b, u, e, d_h));
    if (strategy_ == FusionStrategy::kVibAdaln)
        z = build_intent_nodes(g, b, hn, nullptr, static_cast<std::size_t>(task_.d_z)).z;
    AdaLnRefs ar{b.at("adaln.gamma.w"), b.at("adaln.gamma.b"), b.at("adaln.delta.w"),
                 b.at("adaln.delta.b")};
    ValueRef f = fuse(g, e, hn, z, strategy_, &ar, b.at("fusion.proj_h"));
    ValueRef rg = build_grounding_node(g, b, u, grounding_, grounding_dim(), d_h);
    ValueRef logits = build_logits_node(g, b, f, rg, shifted_targets(tokens, task_.speech_vocab()));
    return g.gather_per_row(g.log_softmax(logits), tokens);
}

// --------------------------------------------------------------- plain side

DenseArray ToyModel::embed_rows(const std::vector<int>& content) const {
    const DenseArray& emb = params_.get("embed.content");
    DenseArray e = DenseArray::zeros({content.size(), emb.cols()});
    for (std::size_t i = 0; i < content.size(); ++i) {
        if (content[i] < 0 || content[i] >= task_.content_vocab)
            throw ContractViolation("content token out of range");
        for (std::size_t j = 0; j < emb.cols(); ++j)
            e.at(i, j) = emb.at(static_cast<std::size_t>(content[i]), j);
    }
    return e;
}

DenseArray ToyModel::hidden_states(const Utterance& u) const {
    DenseArray e = embed_rows(u.content);
    DenseArray hpre = matmul_arr(e, params_.get("backbone.w1"));
    const DenseArray& style_emb = params_.get("backbone.style_emb");
    DenseArray style_e = DenseArray::zeros({1, style_emb.cols()});
    for (std::size_t j = 0; j < style_emb.cols(); ++j)
        style_e.at(0, j) = style_emb.at(static_cast<std::size_t>(u.style), j);
    add_row_inplace(hpre, matmul_arr(style_e, params_.get("backbone.w2")));
    DenseArray eps = backbone_noise(u.noise_seed, "h", u.content.size(),
                                    static_cast<std::size_t>(task_.d_h));
    for (std::size_t t = 0; t < hpre.numel(); ++t) hpre.data[t] += eps.data[t];
    DenseArray h = matmul_arr(hpre, params_.get("backbone.last.w"));
    add_row_inplace(h, params_.get("backbone.last.b"));
    return h;
}

DenseArray ToyModel::context_hidden_states(const Utterance& u) const {
    const DenseArray& emb = params_.get("embed.ctx");
    DenseArray xe = DenseArray::zeros({u.context.size(), emb.cols()});
    for (std::size_t i = 0; i < u.context.size(); ++i)
        for (std::size_t j = 0; j < emb.cols(); ++j)
            xe.at(i, j) = emb.at(static_cast<std::size_t>(u.context[i]), j);
    DenseArray hpre = matmul_arr(xe, params_.get("backbone.w1x"));
    DenseArray eps = backbone_noise(u.noise_seed, "ctx", u.context.size(),
                                    static_cast<std::size_t>(task_.d_h));
    for (std::size_t t = 0; t < hpre.numel(); ++t) hpre.data[t] += eps.data[t];
    DenseArray h = matmul_arr(hpre, params_.get("backbone.last.w"));
    add_row_inplace(h, params_.get("backbone.last.b"));
    return h;
}

IntentPosterior ToyModel::posterior(const DenseArray& h) const {
    DenseArray enc_in = normalized_hidden_arr(h);
    DenseArray mu = matmul_arr(enc_in, params_.get("intent.mu.w"));
    add_row_inplace(mu, params_.get("intent.mu.b"));
    DenseArray lv = matmul_arr(enc_in, params_.get("intent.logvar.w"));
    add_row_inplace(lv, params_.get("intent.logvar.b"));
    IntentPosterior post;
    const std::size_t n = h.rows(), d = mu.cols();
    post.mu.resize(n);
    post.sigma.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        post.mu[i].resize(d);
        post.sigma[i].resize(d);
        for (std::size_t k = 0; k < d; ++k) {
            post.mu[i][k] = mu.at(i, k);
            const double clamped = std::min(kLogVarHi, std::max(kLogVarLo, lv.at(i, k)));
            post.sigma[i][k] = std::exp(clamped * 0.5);
        }
    }
    return post;
}

DenseArray ToyModel::grounding_vector(const Utterance& u) const {
    switch (grounding_) {
    case GroundingMode::kNone: return DenseArray::zeros({1, grounding_dim()});
    case GroundingMode::kAcoustic: {
        const DenseArray& emb = params_.get("gen.embed");
        DenseArray rows = DenseArray::zeros({u.context.size(), emb.cols()});
        for (std::size_t i = 0; i < u.context.size(); ++i)
            for (std::size_t j = 0; j < emb.cols(); ++j)
                rows.at(i, j) = emb.at(static_cast<std::size_t>(u.context[i]), j);
        return mean_rows_arr(rows);
    }
    case GroundingMode::kSemantic:
        return mean_rows_arr(normalized_hidden_arr(context_hidden_states(u)));
    }
    throw ContractViolation("unreachable grounding mode");
}

DenseArray ToyModel::fused_rows(const Utterance& u, FusionStrategy strategy,
                                const std::vector<int>& content) const {
    DenseArray e = embed_rows(content);
    switch (strategy) {
    case FusionStrategy::kContentOnly: return e;
    case FusionStrategy::kAdditive: {
        DenseArray proj =
            matmul_arr(normalized_hidden_arr(hidden_states(u)), params_.get("fusion.proj_h"));
        for (std::size_t t = 0; t < e.numel(); ++t) e.data[t] += proj.data[t];
        return e;
    }
    case FusionStrategy::kVanillaAdaln:
        return adaln_plain(e, normalized_hidden_arr(hidden_states(u)),
                           params_.get("adaln.gamma.w"), params_.get("adaln.gamma.b"),
                           params_.get("adaln.delta.w"), params_.get("adaln.delta.b"));
    case FusionStrategy::kVibAdaln: {
        DenseArray h = hidden_states(u);
        IntentPosterior post = posterior(h);
        DenseArray mu = DenseArray::zeros({post.steps(), post.mu[0].size()});
        for (std::size_t i = 0; i < post.steps(); ++i)
            for (std::size_t k = 0; k < post.mu[i].size(); ++k) mu.at(i, k) = post.mu[i][k];
        return adaln_plain(e, mu, params_.get("adaln.gamma.w"), params_.get("adaln.gamma.b"),
                           params_.get("adaln.delta.w"), params_.get("adaln.delta.b"));
    }
    }
    throw ContractViolation("unreachable fusion strategy");
}

ToyModel::Decoded ToyModel::decode(const Utterance& u, FusionStrategy strategy,
                                   GroundingMode grounding, DecodeMode mode, double temperature,
                                   Rng* rng, const std::vector<int>* content_override) const {
    if (strategy != strategy_ && strategy != FusionStrategy::kContentOnly)
        throw ContractViolation("decode strategy override must be content-only or the model's own");
    if (grounding != grounding_ && grounding != GroundingMode::kNone)
        throw ContractViolation("decode grounding override must be none or the model's own");
    if (mode == DecodeMode::kSample && (rng == nullptr || !(temperature > 0.0)))
        throw ContractViolation("sampled decode needs an RNG and temperature > 0");

    const std::vector<int>& content = content_override ? *content_override : u.content;
    if (content.empty()) throw ContractViolation("decode needs at least one content token");
    const auto v_s = static_cast<std::size_t>(task_.speech_vocab());

    DenseArray f = fused_rows(u, strategy, content);
    DenseArray gvec = DenseArray::zeros({1, v_s});
    if (grounding != GroundingMode::kNone) {
        DenseArray rg = grounding_vector(u);
        gvec = matmul_arr(rg, params_.get("head.w_g"));
    }
    const DenseArray& w_f = params_.get("head.w_f");
    const DenseArray& w_p = params_.get("head.w_p");
    const DenseArray& bias = params_.get("head.b");
    const DenseArray& pe = params_.get("head.speech_embed");

    Decoded out;
    out.tokens.resize(content.size());
    out.logp.resize(content.size());
    int prev = task_.speech_vocab(); // BOS row
    std::vector<double> logits(v_s), lp(v_s), probs(v_s);
    for (std::size_t j = 0; j < content.size(); ++j) {
        DenseArray lf = DenseArray::zeros({1, v_s});
        kernels::matmul(&f.data[j * f.cols()], w_f.data.data(), lf.data.data(), 1, f.cols(), v_s);
        DenseArray lprev = DenseArray::zeros({1, v_s});
        kernels::matmul(&pe.data[static_cast<std::size_t>(prev) * pe.cols()], w_p.data.data(),
                        lprev.data.data(), 1, pe.cols(), v_s);
        for (std::size_t v = 0; v < v_s; ++v)
            logits[v] = ((lf.data[v] + lprev.data[v]) + gvec.data[v]) + bias.data[v];
        kernels::log_softmax_rows(logits.data(), lp.data(), 1, v_s);

        std::size_t pick = 0;
        if (mode == DecodeMode::kGreedy) {
            for (std::size_t v = 1; v < v_s; ++v)
                if (logits[v] > logits[pick]) pick = v;
        } else {
            double mx = logits[0];
            for (std::size_t v = 1; v < v_s; ++v) mx = std::max(mx, logits[v]);
            double total = 0.0;
            for (std::size_t v = 0; v < v_s; ++v) {
                probs[v] = std::exp((logits[v] - mx) / temperature);
                total += probs[v];
            }
            const double target = rng->uniform() * total;
            double acc = 0.0;
            for (std::size_t v = 0; v < v_s; ++v) {
                acc += probs[v];
                pick = v;
                if (acc > target) break;
            }
        }
        out.tokens[j] = static_cast<int>(pick);
        out.logp[j] = lp[pick];
        prev = static_cast<int>(pick);
    }
    return out;
}

ToyModel::Decoded ToyModel::decode_greedy(const Utterance& u) const {
    return decode(u, strategy_, grounding_, DecodeMode::kGreedy, 0.0, nullptr, nullptr);
}

ToyModel::Decoded ToyModel::decode_sample(const Utterance& u, double temperature, Rng rng) const {
    return decode(u, strategy_, grounding_, DecodeMode::kSample, temperature, &rng, nullptr);
}

ToyModel::Decoded ToyModel::decode_anchor(const Utterance& u,
                                          const std::vector<int>& text_response) const {
    return decode(u, FusionStrategy::kContentOnly, GroundingMode::kNone, DecodeMode::kGreedy, 0.0,
                  nullptr, &text_response);
}

std::vector<int> ToyModel::text_response(const Utterance& u) const {
    DenseArray h = hidden_states(u);
    DenseArray logits = matmul_arr(h, params_.get("text_head.w"));
    add_row_inplace(logits, params_.get("text_head.b"));
    std::vector<int> out(h.rows());
    for (std::size_t i = 0; i < h.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < logits.cols(); ++v)
            if (logits.at(i, v) > logits.at(i, best)) best = v;
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<double> ToyModel::rescore(const Utterance& u, const std::vector<int>& tokens) const {
    if (tokens.empty()) throw ContractViolation("cannot rescore an empty sequence");
    if (tokens.size() != u.content.size())
        throw ContractViolation("rescored sequence length does not match conditioning length");
    const auto v_s = static_cast<std::size_t>(task_.speech_vocab());
    DenseArray f = fused_rows(u, strategy_, u.content);
    DenseArray gvec = DenseArray::zeros({1, v_s});
    if (grounding_ != GroundingMode::kNone)
        gvec = matmul_arr(grounding_vector(u), params_.get("head.w_g"));
    const DenseArray& w_f = params_.get("head.w_f");
    const DenseArray& w_p = params_.get("head.w_p");
    const DenseArray& bias = params_.get("head.b");
    const DenseArray& pe = params_.get("head.speech_embed");

    std::vector<double> out(tokens.size());
    std::vector<double> logits(v_s), lp(v_s);
    int prev = task_.speech_vocab();
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        if (tokens[j] < 0 || tokens[j] >= task_.speech_vocab())
            throw ContractViolation("speech token out of range");
        DenseArray lf = DenseArray::zeros({1, v_s});
        kernels::matmul(&f.data[j * f.cols()], w_f.data.data(), lf.data.data(), 1, f.cols(), v_s);
        DenseArray lprev = DenseArray::zeros({1, v_s});
        kernels::matmul(&pe.data[static_cast<std::size_t>(prev) * pe.cols()], w_p.data.data(),
                        lprev.data.data(), 1, pe.cols(), v_s);
        for (std::size_t v = 0; v < v_s; ++v)
            logits[v] = ((lf.data[v] + lprev.data[v]) + gvec.data[v]) + bias.data[v];
        kernels::log_softmax_rows(logits.data(), lp.data(), 1, v_s);
        out[j] = lp[static_cast<std::size_t>(tokens[j])];
        prev = tokens[j];
    }
    return out;
}

// ----------------------------------------------------------------- training

double TrainTrace::moving_average(std::size_t end, std::size_t window) const {
    if (entries.empty()) return 0.0;
    end = std::min(end, entries.size());
    const std::size_t begin = end > window ? end - window : 0;
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += entries[i].loss;
    return s / static_cast<double>(end - begin);
}

namespace {

TrainTrace train_stage(ToyModel& model, const std::vector<Utterance>& train,
                       const StageSchedule& sched, Rng stream, bool stage2) {
    if (train.empty()) throw ContractViolation("training needs a nonempty dataset");
    if (sched.steps < 1 || sched.batch_size < 1)
        throw ContractViolation("stage schedule needs steps >= 1 and batch_size >= 1");

    const auto trainable = stage2 ? model.stage2_trainable() : model.stage1_trainable();
    SgdMomentum opt(sched.lr);
    if (stage2)
        for (const auto& name : model.backbone_last_names()) opt.set_lr_scale(name, 0.1);

    Rng batch_rng = stream.stream("batch");
    Rng sample_base = stream.stream("zsample");

    TrainTrace trace;
    double initial = 0.0;
    int diverged_run = 0;
    const bool vib = model.strategy() == FusionStrategy::kVibAdaln;
    for (int step = 0; step < sched.steps; ++step) {
        const double beta = vib ? beta_schedule(step, sched.steps, model.ou()) : 0.0;
        Graph g;
        ToyModel::Bound bound = model.bind(g, trainable);
        Rng step_rng = sample_base.stream(static_cast<std::uint64_t>(step));
        ValueRef total{};
        double recon_sum = 0.0, vib_sum = 0.0, text_sum = 0.0;
        for (int k = 0; k < sched.batch_size; ++k) {
            const Utterance& u =
                train[static_cast<std::size_t>(batch_rng.uniform_int(static_cast<int>(train.size())))];
            auto sl = model.build_speech_loss(g, bound, u, beta, &step_rng);
            recon_sum += g.scalar_value(sl.recon);
            vib_sum += g.scalar_value(sl.vib);
            ValueRef utt_loss = sl.speech;
            if (stage2) {
                ValueRef tl = model.build_text_loss(g, bound, u);
                text_sum += g.scalar_value(tl);
                utt_loss = g.add(utt_loss, tl);
            }
            total = k == 0 ? utt_loss : g.add(total, utt_loss);
        }
        ValueRef loss = g.scale(total, 1.0 / static_cast<double>(sched.batch_size));
        const double loss_v = g.scalar_value(loss);
        GradMap grads = g.backward(loss);
        opt.step(model.params(), grads);

        const double inv_b = 1.0 / static_cast<double>(sched.batch_size);
        trace.entries.push_back(
            {step, loss_v, recon_sum * inv_b, vib_sum * inv_b, text_sum * inv_b, beta});

        if (step == 0) initial = loss_v;
        if (loss_v > 10.0 * initial) {
            if (++diverged_run >= 200)
                throw TrainingFault("loss exceeded 10x its initial value for 200 consecutive steps at step " +
                                    std::to_string(step));
        } else {
            diverged_run = 0;
        }
    }
    return trace;
}

} // namespace

TrainTrace train_stage1(ToyModel& model, const std::vector<Utterance>& train,
                        const StageSchedule& sched, Rng stream) {
    return train_stage(model, train, sched, stream, false);
}

TrainTrace train_stage2(ToyModel& model, const std::vector<Utterance>& train,
                        const StageSchedule& sched, Rng stream) {
    return train_stage(model, train, sched, stream, true);
}

// ------------------------------------------------------------------- probes

const char* to_string(ProbeRepr r) {
    switch (r) {
    case ProbeRepr::kEmbed: return "e";
    case ProbeRepr::kHidden: return "h";
    case ProbeRepr::kIntent: return "z";
    }
    return "?";
}

double linear_probe_accuracy(const std::vector<std::vector<double>>& train_x,
                             const std::vector<int>& train_y,
                             const std::vector<std::vector<double>>& test_x,
                             const std::vector<int>& test_y, int n_classes) {
    if (train_x.empty() || test_x.empty()) throw ContractViolation("probe needs nonempty splits");
    const std::size_t d = train_x[0].size();
    const std::size_t n = train_x.size();
    const auto c = static_cast<std::size_t>(n_classes);

    // Standardize with train statistics.
    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (const auto& x : train_x)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x[j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    for (const auto& x : train_x)
        for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]);
    for (std::size_t j = 0; j < d; ++j) sd[j] = std::sqrt(sd[j] / static_cast<double>(n)) + 1e-8;

    auto standardized = [&](const std::vector<double>& x, std::vector<double>& out) {
        for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mean[j]) / sd[j];
    };

    std::vector<double> w(d * c, 0.0), bias(c, 0.0);
    std::vector<double> gw(d * c), gb(c), logits(c), xs(d);
    constexpr int kIters = 500;
    constexpr double kLr = 0.5;
    constexpr double kL2 = 1e-4;
    for (int it = 0; it < kIters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            standardized(train_x[i], xs);
            for (std::size_t k = 0; k < c; ++k) {
                double acc = bias[k];
                for (std::size_t j = 0; j < d; ++j) acc += xs[j] * w[j * c + k];
                logits[k] = acc;
            }
            double mx = logits[0];
            for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, logits[k]);
            double z = 0.0;
            for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[k] - mx);
            for (std::size_t k = 0; k < c; ++k) {
                const double p = std::exp(logits[k] - mx) / z;
                const double err = p - (static_cast<int>(k) == train_y[i] ? 1.0 : 0.0);
                gb[k] += err;
                for (std::size_t j = 0; j < d; ++j) gw[j * c + k] += err * xs[j];
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t t = 0; t < w.size(); ++t) w[t] -= kLr * (gw[t] * inv_n + kL2 * w[t]);
        for (std::size_t k = 0; k < c; ++k) bias[k] -= kLr * gb[k] * inv_n;
    }

    std::size_t hits = 0;
    for (std::size_t i = 0; i < test_x.size(); ++i) {
        standardized(test_x[i], xs);
        std::size_t best = 0;
        double bestv = -1e300;
        for (std::size_t k = 0; k < c; ++k) {
            double acc = bias[k];
            for (std::size_t j = 0; j < d; ++j) acc += xs[j] * w[j * c + k];
            if (acc > bestv) {
                bestv = acc;
                best = k;
            }
        }
        if (static_cast<int>(best) == test_y[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test_x.size());
}

double probe_styles(const ToyModel& model, const std::vector<Utterance>& corpus, ProbeRepr repr) {
    if (corpus.empty()) throw ContractViolation("probe needs a nonempty corpus");
    std::vector<std::vector<double>> train_x, test_x;
    std::vector<int> train_y, test_y;
    for (const Utterance& u : corpus) {
        DenseArray rows;
        switch (repr) {
        case ProbeRepr::kEmbed: rows = model.embed_rows(u.content); break;
        case ProbeRepr::kHidden: rows = model.hidden_states(u); break;
        case ProbeRepr::kIntent: {
            IntentPosterior post = model.posterior(model.hidden_states(u));
            rows = DenseArray::zeros({post.steps(), post.mu[0].size()});
            for (std::size_t i = 0; i < post.steps(); ++i)
                for (std::size_t k = 0; k < post.mu[i].size(); ++k) rows.at(i, k) = post.mu[i][k];
            break;
        }
        }
        std::vector<double> feat(rows.cols(), 0.0);
        for (std::size_t i = 0; i < rows.rows(); ++i)
            for (std::size_t j = 0; j < rows.cols(); ++j) feat[j] += rows.at(i, j);
        for (double& v : feat) v /= static_cast<double>(rows.rows());
        if (is_heldout(u)) {
            test_x.push_back(std::move(feat));
            test_y.push_back(u.style);
        } else {
            train_x.push_back(std::move(feat));
            train_y.push_back(u.style);
        }
    }
    return linear_probe_accuracy(train_x, train_y, test_x, test_y, model.task().n_styles);
}

// -------------------------------------------------------------- checkpoints

void save_checkpoint(const ToyModel& model, Stage stage, std::uint64_t seed,
                     const std::string& config_echo_json, const std::string& path) {
    nlohmann::ordered_json j;
    j["version"] = kCheckpointVersion;
    j["stage"] = to_string(stage);
    j["seed"] = seed;
    j["strategy"] = to_string(model.strategy());
    j["grounding"] = to_string(model.grounding());
    j["task"] = task_to_json(model.task());
    j["ou"] = ou_to_json(model.ou());
    j["rng"] = {{"seed", seed}, {"note", "stage streams derive from (seed, stage name)"}};
    j["config_echo"] =
        config_echo_json.empty() ? nlohmann::json() : nlohmann::json::parse(config_echo_json);
    nlohmann::ordered_json params;
    for (const auto& name : model.params().names()) {
        const DenseArray& a = model.params().get(name);
        params[name] = {{"shape", a.shape}, {"data", a.data}};
    }
    j["params"] = std::move(params);
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    out << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    in >> j;
    if (!j.contains("version") || j.at("version").get<int>() != kCheckpointVersion)
        throw ContractViolation("unsupported checkpoint version in '" + path + "'");

    Checkpoint ck;
    ck.stage = stage_from_string(j.at("stage").get<std::string>());
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.config_echo = j.at("config_echo").is_null() ? "" : j.at("config_echo").dump();
    ck.model = ToyModel::init(task_from_json(j.at("task")),
                              fusion_from_string(j.at("strategy").get<std::string>()),
                              grounding_from_string(j.at("grounding").get<std::string>()),
                              ou_from_json(j.at("ou")), Rng(0));

    const auto& params = j.at("params");
    for (const auto& name : ck.model.params().names()) {
        if (!params.contains(name))
            throw ContractViolation("checkpoint missing parameter '" + name + "'");
        const auto& pj = params.at(name);
        DenseArray a(pj.at("shape").get<std::vector<std::size_t>>(),
                     pj.at("data").get<std::vector<double>>());
        DenseArray& dst = ck.model.params().mutable_get(name);
        if (!dst.same_shape(a))
            throw ContractViolation("checkpoint parameter '" + name + "' has shape " +
                                    shape_str(a.shape) + ", expected " + shape_str(dst.shape));
        dst = std::move(a);
    }
    if (params.size() != ck.model.params().size())
        throw ContractViolation("checkpoint has unexpected extra parameters");
    return ck;
}

} // namespace ilab
