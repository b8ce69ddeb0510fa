#pragma once

#include "lsp/autograd.hpp"
#include "lsp/rng.hpp"
#include "lsp/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace lsp {

// Trainable parameters of one model: named autograd leaves plus a global step
// counter. Names keep insertion order so every walk over the store is
// deterministic.
template <class S>
class ParamStore {
public:
    ag::Var<S>& add(const std::string& name, Tensor<S> init);
    ag::Var<S>& at(const std::string& name);
    const ag::Var<S>& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }

    int64_t count_params() const;
    void zero_grads();
    void set_trainable(bool on);

    // Deep copy with an element-type change; gradients are not carried over.
    template <class T>
    ParamStore<T> cast() const {
        ParamStore<T> out;
        for (const auto& n : names_) out.add(n, at(n).value().template cast<T>());
        out.step = step;
        return out;
    }

    int64_t step = 0;

private:
    std::vector<std::string> names_;
    std::map<std::string, ag::Var<S>> index_;
};

// Temporarily drops gradient tracking on every leaf in the store. Previous
// flags are restored on destruction, so guards may nest (an inner guard on an
// already-frozen store leaves it frozen).
template <class S>
class ScopedNoGrad {
public:
    explicit ScopedNoGrad(ParamStore<S>& ps) : ps_(ps) {
        flags_.reserve(ps.names().size());
        for (const auto& n : ps.names()) {
            flags_.push_back(ps.at(n).requires_grad());
            ps.at(n).set_requires_grad(false);
        }
    }
    ~ScopedNoGrad() {
        size_t i = 0;
        for (const auto& n : ps_.names()) ps_.at(n).set_requires_grad(flags_[i++]);
    }
    ScopedNoGrad(const ScopedNoGrad&) = delete;
    ScopedNoGrad& operator=(const ScopedNoGrad&) = delete;

private:
    ParamStore<S>& ps_;
    std::vector<bool> flags_;
};

// Layer-by-layer description used for initialization; fan_in == 0 marks a
// zero-initialized tensor (biases), anything else draws from
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
struct ParamDef {
    std::string name;
    Shape shape;
    int64_t fan_in = 0;
};

struct ModelSpec {
    std::string arch;
    std::vector<ParamDef> defs;
};

template <class S>
ParamStore<S> init_params(const ModelSpec& spec, uint64_t seed);

// Adaptive-moment optimizer state; accumulators appear lazily on first use.
template <class S>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::map<std::string, Tensor<S>> m, v;
};

// One update using the gradients currently stored on the parameter leaves.
// Every parameter must carry a finite gradient.
template <class S>
void adam_step(ParamStore<S>& store, AdamState<S>& state);

// loss_fn computes the scalar loss for the current parameter values; when
// want_grad is set it must also leave gradients on the store's leaves.
template <class S>
using LossFn = std::function<double(ParamStore<S>&, bool want_grad)>;

// Central-difference verification on `probes` randomly chosen coordinates;
// returns max |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
template <class S>
double finite_diff_check(const LossFn<S>& loss_fn, ParamStore<S>& store, int probes, double eps,
                         Rng& rng);

using MetaMap = std::vector<std::pair<std::string, std::string>>;

// Versioned binary container (magic, version, dtype, named tensors, step,
// trailing CRC-32) plus a plain-text key=value sidecar at path + ".meta".
template <class S>
void save_checkpoint(const ParamStore<S>& store, const MetaMap& meta, const std::string& path);

template <class S>
std::pair<ParamStore<S>, MetaMap> load_checkpoint(const std::string& path);

}  // namespace lsp
