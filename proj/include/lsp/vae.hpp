#pragma once

#include "lsp/autograd.hpp"
#include "lsp/dataio.hpp"
#include "lsp/nn.hpp"
#include "lsp/rng.hpp"
#include "lsp/substrate.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace lsp {

// Joint continuous/categorical VAE over 28x28 grayscale images.
//
// Encoder: conv 1->32 4x4 s2 p1, conv 32->64 4x4 s2 p1, dense 3136->256,
// then three heads (mu_z, log_sigma_z, c_logits). Decoder mirrors it with
// transposed convolutions and a terminal sigmoid, so reconstructions live in
// [0,1]. The continuous posterior is diagonal Gaussian; the categorical
// posterior is relaxed with Gumbel-softmax at temperature `gumbel_tau`.
struct VaeConfig {
    int64_t m = 10;          // continuous latent dimensions
    int64_t n = 10;          // categorical latent classes
    double beta = 4.0;       // KL weight in the training objective
    double gumbel_tau = 0.67;
    int64_t epochs = 30;
    int64_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;

    // Optional capacity-annealed KL (off by default): the KL term becomes
    // gamma * |KL - C(t)| with C ramping linearly to `cap_*_max` over
    // `cap_steps` optimizer steps, split across the two latent families.
    bool capacity_annealing = false;
    double cap_gamma = 30.0;
    double cap_z_max = 5.0;
    double cap_c_max = 5.0;
    int64_t cap_steps = 25000;

    int64_t image_side = 28;
    int64_t pixels() const { return image_side * image_side; }
    int64_t latent_dim() const { return m + n; }
    void validate() const;
};

template <class S>
struct Posterior {
    ag::Var<S> mu_z;         // [N, m]
    ag::Var<S> log_sigma_z;  // [N, m]
    ag::Var<S> c_logits;     // [N, n]
};

template <class S>
struct LatentCode {
    ag::Var<S> z;  // [N, m]
    ag::Var<S> c;  // [N, n], rows on the simplex
};

// One reparameterization draw. A tape with all-zero entries makes
// sample_latent deterministic: z == mu_z and c == softmax(c_logits / tau).
template <class S>
struct NoiseTape {
    Tensor<S> eps;     // [N, m], standard normal (or zeros)
    Tensor<S> gumbel;  // [N, n], standard Gumbel (or zeros)
};

template <class S>
NoiseTape<S> draw_noise_tape(Rng& rng, int64_t batch, const VaeConfig& cfg);

template <class S>
NoiseTape<S> zero_noise_tape(int64_t batch, const VaeConfig& cfg);

template <class S>
struct ElboTerms {
    ag::Var<S> total;  // [1] batch mean of recon + beta * kl
    ag::Var<S> recon;  // [1] batch mean of per-image summed Bernoulli NLL
    ag::Var<S> kl;     // [1] batch mean of Gaussian KL + categorical KL
};

template <class S>
class JointVae {
public:
    JointVae(VaeConfig cfg, ParamStore<S> params);

    static ModelSpec make_spec(const VaeConfig& cfg);
    static JointVae init(const VaeConfig& cfg, uint64_t seed);

    // x is [N,1,28,28] or [N,784].
    Posterior<S> encode(const ag::Var<S>& x) const;
    LatentCode<S> sample_latent(const Posterior<S>& p, const NoiseTape<S>& tape) const;
    // z [N,m], c [N,n] -> reconstruction probabilities [N, 784].
    ag::Var<S> decode(const ag::Var<S>& z, const ag::Var<S>& c) const;

    // x_target holds pixel intensities in [0,1], flattened to [N,784].
    ElboTerms<S> elbo_loss(const Tensor<S>& x_target, const Posterior<S>& p,
                           const ag::Var<S>& reconstruction) const;

    const VaeConfig& config() const { return cfg_; }
    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }

    template <class T>
    JointVae<T> cast() const {
        return JointVae<T>(cfg_, params_.template cast<T>());
    }

private:
    VaeConfig cfg_;
    ParamStore<S> params_;
};

struct VaeEpochLog {
    int64_t epoch = 0;
    double train_total = 0, train_recon = 0, train_kl = 0;
    double val_total = 0, val_recon = 0, val_kl = 0;
};

struct VaeTrainResult {
    JointVae<float> model;
    std::vector<VaeEpochLog> log;
};

// Trains on `train` with per-epoch deterministic validation on `val`
// (zero-noise tape). Neither split may be the held-out test split. When
// `jsonl` is non-null one JSON object per epoch is appended to it.
VaeTrainResult train_vae(const LabeledImageSet& train, const LabeledImageSet& val,
                         const VaeConfig& cfg, std::ostream* jsonl = nullptr);

// Weights plus the architecture-defining config fields, so a checkpoint alone
// rebuilds a usable model. Wrong-kind or incomplete metadata -> CorruptFile.
void save_vae_checkpoint(const JointVae<float>& model, const std::string& path);
JointVae<float> load_vae_checkpoint(const std::string& path);

#define LSP_INSTANTIATE_VAE_DECL(S)                                                    \
    extern template struct Posterior<S>;                                               \
    extern template struct LatentCode<S>;                                              \
    extern template class JointVae<S>;                                                 \
    extern template NoiseTape<S> draw_noise_tape<S>(Rng&, int64_t, const VaeConfig&);  \
    extern template NoiseTape<S> zero_noise_tape<S>(int64_t, const VaeConfig&);

LSP_INSTANTIATE_VAE_DECL(float)
LSP_INSTANTIATE_VAE_DECL(double)
#undef LSP_INSTANTIATE_VAE_DECL

}  // namespace lsp
