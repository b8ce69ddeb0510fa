#pragma once

#include "lsp/autograd.hpp"
#include "lsp/classifiers.hpp"
#include "lsp/dataio.hpp"
#include "lsp/latentstats.hpp"
#include "lsp/substrate.hpp"
#include "lsp/tensor.hpp"
#include "lsp/vae.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace lsp {

enum class AttackNorm { L2, Linf };
enum class TargetMode { TwoHot, HalfHalf };

const char* attack_norm_name(AttackNorm n);
AttackNorm attack_norm_from_name(const std::string& s);
const char* target_mode_name(TargetMode m);
TargetMode target_mode_from_name(const std::string& s);

// Latent-poisoning attack settings. The poisoned latent is
//   Z = lambda_org * z + lambda_noised * z',  C = renorm(lambda_org * c + lambda_noised * c')
// where (z', c') is a class-conditioned draw toward the classifier's
// second-choice class. With `learned_coefficient` the per-sample mixing
// weight comes from the coefficient network instead of `lambda_noised`.
// The training objective is
//   total = lambda0 * classification + lambda1 * pixel norm + lambda2 * DSSIM.
struct AttackConfig {
    double lambda_org = 0.6;
    double lambda_noised = 0.8;
    bool learned_coefficient = false;

    double lambda0 = 1.0;  // classification (two-hot) term
    double lambda1 = 1.0;  // pixel-norm term
    double lambda2 = 1.0;  // structural-dissimilarity term
    AttackNorm norm_choice = AttackNorm::L2;
    TargetMode target_mode = TargetMode::TwoHot;
    double smoothmax_temp = 50.0;  // temperature of the smooth row max

    int64_t param_budget = 12000;
    int64_t epochs = 10;
    int64_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;

    void validate() const;
};

// Hidden widths (noise head, coefficient head) whose combined parameter
// count lands within 5% of `param_budget`; throws ConfigError when no width
// can get that close.
std::pair<int64_t, int64_t> attack_hidden_widths(int64_t m, int64_t n, int64_t classes,
                                                 int64_t param_budget);

// The two poisoning networks. Both read rows of concat(z [m], c [n],
// one-hot target [classes]); the noise head emits (eta_z, eta_c) and the
// coefficient head a mixing weight in (0,1).
template <class S>
class AttackNetworks {
public:
    AttackNetworks(int64_t m, int64_t n, int64_t classes, int64_t param_budget,
                   ParamStore<S> params);

    static ModelSpec make_spec(int64_t m, int64_t n, int64_t classes, int64_t param_budget);
    static AttackNetworks init(int64_t m, int64_t n, int64_t classes, int64_t param_budget,
                               uint64_t seed);

    ag::Var<S> noise(const ag::Var<S>& input) const;        // [N, m+n]
    ag::Var<S> coefficient(const ag::Var<S>& input) const;  // [N, 1], sigmoid output

    int64_t m() const { return m_; }
    int64_t n() const { return n_; }
    int64_t classes() const { return classes_; }
    int64_t param_budget() const { return budget_; }
    int64_t input_dim() const { return m_ + n_ + classes_; }
    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }

    template <class T>
    AttackNetworks<T> cast() const {
        return AttackNetworks<T>(m_, n_, classes_, budget_, params_.template cast<T>());
    }

private:
    int64_t m_, n_, classes_, budget_;
    ParamStore<S> params_;
};

// Largest and second-largest entries of a probability row; ties resolve to
// the lower class index. The row must have >= 2 classes and sum to ~1.
std::pair<int32_t, int32_t> select_target(const float* probs, int64_t k);
std::pair<int32_t, int32_t> select_target(const std::vector<float>& probs);

// Two-hot label vector: 1 at top1 and top2, 0 elsewhere (sums to 2).
Tensor<float> make_target_softlabels(int32_t top1, int32_t top2, int64_t classes);

// Deterministic latent map used throughout the attack: z = posterior mean,
// c = softmax(c_logits) with no relaxation temperature — the same map the
// class statistics are fit on. Returns ([N,m], [N,n]).
std::pair<Tensor<float>, Tensor<float>> encode_deterministic(const JointVae<float>& vae,
                                                             const Tensor<float>& x);
Tensor<float> reconstruct_deterministic(const JointVae<float>& vae, const Tensor<float>& x);

// Core poisoning step on a batch: eta = noise(z, c, target one-hot),
// (z', c') = class-conditioned latent at the targets, then the mix described
// on AttackConfig. The categorical mix is clamped at zero and renormalized
// onto the simplex (uniform fallback when everything clamps away).
template <class S>
LatentCode<S> poison_latents(const ag::Var<S>& z, const ag::Var<S>& c,
                             const ClassLatentStats& stats, const std::vector<int32_t>& targets,
                             const AttackNetworks<S>& networks, const AttackConfig& cfg);

// Per-row multilabel binary cross entropy: sum over classes of
// -w_k [ t log p + (1 - t) log(1 - p) ], probabilities clamped to
// [1e-7, 1 - 1e-7]. `weights` may be null (all ones).
template <class S>
ag::Var<S> bce_multilabel(const ag::Var<S>& pred_probs, const Tensor<S>& targets,
                          const Tensor<S>* weights = nullptr);

template <class S>
struct AttackLossTerms {
    ag::Var<S> total;     // [1]
    ag::Var<S> classify;  // [1] lambda0's term before weighting
    ag::Var<S> norm;      // [1] lambda1's term before weighting
    ag::Var<S> dssim;     // [1] lambda2's term before weighting
};

// Composite objective on a batch. `target_twohot` is the [N,K] two-hot
// matrix; in HalfHalf mode it is halved into a 0.5/0.5 soft label and scored
// with cross entropy on the logits instead of multilabel BCE on the
// probabilities. The L-infinity norm uses a smooth row max (log-mean-exp at
// cfg.smoothmax_temp) so the graph stays differentiable; exact norms belong
// to evaluation records, not this loss.
template <class S>
AttackLossTerms<S> composite_loss(const Tensor<S>& x, const ag::Var<S>& x_adv,
                                  const ClassifyOut<S>& pred, const Tensor<S>& target_twohot,
                                  const AttackConfig& cfg);

struct AttackEpochLog {
    int64_t epoch = 0;
    double total = 0, classify = 0, norm = 0, dssim = 0;
};

struct AttackTrainResult {
    AttackNetworks<float> networks;
    std::vector<AttackEpochLog> log;
};

// Amortized training of the poisoning networks against a frozen autoencoder
// and frozen white-box inference classifier; the held-out test classifier is
// never an input here. Gradient tracking on both frozen models is disabled
// for the duration and their weights are fingerprinted before/after — any
// drift raises InvariantViolation. Throws NonFiniteLoss if the objective
// stops being finite.
AttackTrainResult attack_train(const JointVae<float>& vae, const Classifier<float>& inference,
                               const ClassLatentStats& stats, const LabeledImageSet& train,
                               const AttackConfig& cfg, std::ostream* jsonl = nullptr);

struct AttackRecord {
    Tensor<float> original;     // [D], pixels in [0,1]
    Tensor<float> adversarial;  // [D], pixels in [0,1]
    int32_t label = -1;         // ground-truth label of the original
    int32_t top1 = -1;          // inference classifier's first choice on the original
    int32_t top2 = -1;          // second choice == poisoning target
    float top1_prob = 0.0f;
    float top2_prob = 0.0f;
    double ssim = 0;  // exact global structural similarity
    double l2 = 0;    // exact pixel norms of the perturbation
    double linf = 0;

    // Filled by complete_with_test_predictions.
    bool has_test_eval = false;
    int32_t test_pred_before = -1;
    int32_t test_pred_after = -1;
    bool success = false;  // test_pred_after != label
};

// Runs the deterministic poisoning pipeline (encode -> select target ->
// poison -> decode) and returns one record per image, without the test
// classifier fields. No randomness is involved anywhere.
std::vector<AttackRecord> attack_apply(const AttackNetworks<float>& networks,
                                       const JointVae<float>& vae,
                                       const Classifier<float>& inference,
                                       const ClassLatentStats& stats, const Tensor<float>& images,
                                       const std::vector<int32_t>& labels, const AttackConfig& cfg);

// Black-box pass over the held-out classifier: prediction queries only, and
// success = (prediction on the adversarial image != ground-truth label).
void complete_with_test_predictions(BlackBoxClassifier& test_clf,
                                    std::vector<AttackRecord>& records);

// Fraction of records whose adversarial image lifts the poisoning target's
// probability to at least the original top choice's probability under the
// inference classifier — the soft two-hot objective achieved as an
// inequality.
double target_inequality_rate(const Classifier<float>& inference,
                              const std::vector<AttackRecord>& records);

// Per-sample alternative to the amortized networks: optimizes the noise
// vectors (and the mixing coefficient when learned) for one image directly,
// by Adam on the same composite objective. Needs no trained networks.
AttackRecord attack_optimize_single(const JointVae<float>& vae, const Classifier<float>& inference,
                                    const ClassLatentStats& stats, const Tensor<float>& image,
                                    int32_t label, const AttackConfig& cfg, int64_t steps = 200);

// decode(a * encode(x1) + b * encode(x2)) with the categorical part
// renormalized onto the simplex; x1, x2 are [N,D] or [N,1,s,s] batches.
Tensor<float> interpolate(const JointVae<float>& vae, const Tensor<float>& x1,
                          const Tensor<float>& x2, double a, double b);

void save_attack_checkpoint(const AttackNetworks<float>& networks, const std::string& path);
AttackNetworks<float> load_attack_checkpoint(const std::string& path);

#define LSP_INSTANTIATE_ATTACK_DECL(S)                                                          \
    extern template class AttackNetworks<S>;                                                    \
    extern template struct AttackLossTerms<S>;                                                  \
    extern template LatentCode<S> poison_latents<S>(const ag::Var<S>&, const ag::Var<S>&,       \
                                                    const ClassLatentStats&,                    \
                                                    const std::vector<int32_t>&,                \
                                                    const AttackNetworks<S>&,                   \
                                                    const AttackConfig&);                       \
    extern template ag::Var<S> bce_multilabel<S>(const ag::Var<S>&, const Tensor<S>&,           \
                                                 const Tensor<S>*);                             \
    extern template AttackLossTerms<S> composite_loss<S>(const Tensor<S>&, const ag::Var<S>&,   \
                                                         const ClassifyOut<S>&,                 \
                                                         const Tensor<S>&, const AttackConfig&);

LSP_INSTANTIATE_ATTACK_DECL(float)
LSP_INSTANTIATE_ATTACK_DECL(double)
#undef LSP_INSTANTIATE_ATTACK_DECL

}  // namespace lsp
