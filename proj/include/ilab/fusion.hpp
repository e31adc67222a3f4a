#pragma once

#include <string>

#include "ilab/graph.hpp"

namespace ilab {

// How hidden-state information is injected into the token-embedding pathway.
enum class FusionStrategy { kContentOnly, kAdditive, kVanillaAdaln, kVibAdaln };

const char* to_string(FusionStrategy s);
FusionStrategy fusion_from_string(const std::string& s);

// Conditioner dimension the AdaLN maps take for a strategy (the intent
// dimension for vib-adaln, the hidden dimension for vanilla-adaln).
bool fusion_needs_hidden(FusionStrategy s);
bool fusion_needs_intent(FusionStrategy s);

struct AdaLnRefs {
    ValueRef gamma_w, gamma_b, delta_w, delta_b;
};

// (1 + gamma(c)) (.) layer_norm(x) + delta(c). gamma and delta are affine
// maps of the conditioner; with the residual-scale form, zero-initialized
// maps reduce this to plain normalization.
ValueRef adaln(Graph& g, ValueRef x, ValueRef c, const AdaLnRefs& p);

// Strategy dispatch over aligned sequences [N,*]. h is required for
// additive/vanilla-adaln, z for vib-adaln; proj_h maps the hidden dim onto
// the embedding dim for the additive variant.
ValueRef fuse(Graph& g, ValueRef e, ValueRef h, ValueRef z, FusionStrategy strategy,
              const AdaLnRefs* adaln_params, ValueRef proj_h);

// Value-space twins of the graph builders (same kernels, same op order) for
// the autoregressive decode path.
DenseArray adaln_plain(const DenseArray& x, const DenseArray& c, const DenseArray& gamma_w,
                       const DenseArray& gamma_b, const DenseArray& delta_w,
                       const DenseArray& delta_b);

// Registers zero-initialized gamma/delta maps under `prefix`.
void add_adaln_params(ParamStore& store, const std::string& prefix, std::size_t d_cond,
                      std::size_t d_embed);

} // namespace ilab
