#include "ilab/fusion.hpp"

#include "ilab/kernels.hpp"

namespace ilab {

const char* to_string(FusionStrategy s) {
    switch (s) {
    case FusionStrategy::kContentOnly: return "content-only";
    case FusionStrategy::kAdditive: return "additive";
    case FusionStrategy::kVanillaAdaln: return "vanilla-adaln";
    case FusionStrategy::kVibAdaln: return "vib-adaln";
    }
    return "?";
}

FusionStrategy fusion_from_string(const std::string& s) {
    if (s == "content-only") return FusionStrategy::kContentOnly;
    if (s == "additive") return FusionStrategy::kAdditive;
    if (s == "vanilla-adaln") return FusionStrategy::kVanillaAdaln;
    if (s == "vib-adaln") return FusionStrategy::kVibAdaln;
    throw ContractViolation("unknown fusion strategy '" + s + "'");
}

bool fusion_needs_hidden(FusionStrategy s) {
    return s == FusionStrategy::kAdditive || s == FusionStrategy::kVanillaAdaln;
}

bool fusion_needs_intent(FusionStrategy s) { return s == FusionStrategy::kVibAdaln; }

ValueRef adaln(Graph& g, ValueRef x, ValueRef c, const AdaLnRefs& p) {
    const std::size_t d_e = g.value(x).cols();
    const std::size_t d_c = g.value(c).cols();
    if (g.value(p.gamma_w).rows() != d_c || g.value(p.gamma_w).cols() != d_e)
        throw ContractViolation("adaln conditioner dim " + std::to_string(d_c) +
                                " does not match map shape " + shape_str(g.value(p.gamma_w).shape));
    if (g.value(x).rows() != g.value(c).rows())
        throw ContractViolation("adaln input and conditioner lengths differ: " +
                                shape_str(g.value(x).shape) + " vs " + shape_str(g.value(c).shape));
    ValueRef gamma = g.add(g.matmul(c, p.gamma_w), p.gamma_b);
    ValueRef delta = g.add(g.matmul(c, p.delta_w), p.delta_b);
    return g.add(g.mul(g.row_layer_norm(x), g.add_const(gamma, 1.0)), delta);
}

ValueRef fuse(Graph& g, ValueRef e, ValueRef h, ValueRef z, FusionStrategy strategy,
              const AdaLnRefs* adaln_params, ValueRef proj_h) {
    if (fusion_needs_hidden(strategy) && !h.valid())
        throw ContractViolation(std::string("fusion strategy ") + to_string(strategy) +
                                " requires a hidden-state sequence");
    if (fusion_needs_intent(strategy) && !z.valid())
        throw ContractViolation(std::string("fusion strategy ") + to_string(strategy) +
                                " requires an intent sequence");
    switch (strategy) {
    case FusionStrategy::kContentOnly:
        return e;
    case FusionStrategy::kAdditive:
        if (!proj_h.valid()) throw ContractViolation("additive fusion requires proj_h");
        return g.add(e, g.matmul(h, proj_h));
    case FusionStrategy::kVanillaAdaln:
        return adaln(g, e, h, *adaln_params);
    case FusionStrategy::kVibAdaln:
        return adaln(g, e, z, *adaln_params);
    }
    throw ContractViolation("unreachable fusion strategy");
}

DenseArray adaln_plain(const DenseArray& x, const DenseArray& c, const DenseArray& gamma_w,
                       const DenseArray& gamma_b, const DenseArray& delta_w,
                       const DenseArray& delta_b) {
    const std::size_t n = x.rows(), d_e = x.cols(), d_c = c.cols();
    if (c.rows() != n || gamma_w.rows() != d_c || gamma_w.cols() != d_e)
        throw ContractViolation("adaln shapes not conformable: x " + shape_str(x.shape) + ", c " +
                                shape_str(c.shape) + ", map " + shape_str(gamma_w.shape));
    DenseArray gamma = DenseArray::zeros({n, d_e});
    DenseArray delta = DenseArray::zeros({n, d_e});
    kernels::matmul(c.data.data(), gamma_w.data.data(), gamma.data.data(), n, d_c, d_e);
    kernels::matmul(c.data.data(), delta_w.data.data(), delta.data.data(), n, d_c, d_e);
    DenseArray ln = DenseArray::zeros({n, d_e});
    kernels::layer_norm_rows(x.data.data(), ln.data.data(), n, d_e, Graph::kNormEps);
    DenseArray out = DenseArray::zeros({n, d_e});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d_e; ++j)
            out.at(i, j) = ln.at(i, j) * (gamma.at(i, j) + gamma_b.at(0, j) + 1.0) +
                           (delta.at(i, j) + delta_b.at(0, j));
    return out;
}

void add_adaln_params(ParamStore& store, const std::string& prefix, std::size_t d_cond,
                      std::size_t d_embed) {
    store.add(prefix + ".gamma.w", DenseArray::zeros({d_cond, d_embed}));
    store.add(prefix + ".gamma.b", DenseArray::zeros({1, d_embed}));
    store.add(prefix + ".delta.w", DenseArray::zeros({d_cond, d_embed}));
    store.add(prefix + ".delta.b", DenseArray::zeros({1, d_embed}));
}

} // namespace ilab
