#pragma once

#include "lsp/autograd.hpp"
#include "lsp/substrate.hpp"

#include <string>

// Layer builders: each layer contributes `prefix.w` / `prefix.b` entries to a
// ModelSpec and a forward helper that pulls those entries from a ParamStore.
namespace lsp::nn {

inline void add_conv(ModelSpec& spec, const std::string& prefix, int64_t in_c, int64_t out_c,
                     int64_t k) {
    spec.defs.push_back({prefix + ".w", {out_c, in_c, k, k}, in_c * k * k});
    spec.defs.push_back({prefix + ".b", {out_c}, 0});
}

inline void add_convt(ModelSpec& spec, const std::string& prefix, int64_t in_c, int64_t out_c,
                      int64_t k) {
    spec.defs.push_back({prefix + ".w", {in_c, out_c, k, k}, in_c * k * k});
    spec.defs.push_back({prefix + ".b", {out_c}, 0});
}

inline void add_dense(ModelSpec& spec, const std::string& prefix, int64_t in_dim, int64_t out_dim) {
    spec.defs.push_back({prefix + ".w", {in_dim, out_dim}, in_dim});
    spec.defs.push_back({prefix + ".b", {out_dim}, 0});
}

template <class S>
ag::Var<S> conv(const ParamStore<S>& ps, const std::string& prefix, const ag::Var<S>& x,
                const ops::Conv2dGeom& g) {
    return ag::conv2d(x, ps.at(prefix + ".w"), ps.at(prefix + ".b"), g);
}

template <class S>
ag::Var<S> convt(const ParamStore<S>& ps, const std::string& prefix, const ag::Var<S>& x,
                 const ops::ConvT2dGeom& g) {
    return ag::convt2d(x, ps.at(prefix + ".w"), ps.at(prefix + ".b"), g);
}

template <class S>
ag::Var<S> dense(const ParamStore<S>& ps, const std::string& prefix, const ag::Var<S>& x) {
    return ag::dense(x, ps.at(prefix + ".w"), ps.at(prefix + ".b"));
}

}  // namespace lsp::nn
