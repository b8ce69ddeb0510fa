#include "lsp/attack.hpp"

#include "lsp/metrics.hpp"
#include "lsp/rng.hpp"
#include "lsp/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace lsp {

const char* attack_norm_name(AttackNorm n) {
    switch (n) {
        case AttackNorm::L2: return "l2";
        case AttackNorm::Linf: return "linf";
    }
    fail(ErrorCode::InvariantViolation, "unknown norm id");
}

AttackNorm attack_norm_from_name(const std::string& s) {
    if (s == "l2") return AttackNorm::L2;
    if (s == "linf") return AttackNorm::Linf;
    fail(ErrorCode::ConfigError, "unknown norm '" + s + "' (expected l2 or linf)");
}

const char* target_mode_name(TargetMode m) {
    switch (m) {
        case TargetMode::TwoHot: return "two-hot";
        case TargetMode::HalfHalf: return "half-half";
    }
    fail(ErrorCode::InvariantViolation, "unknown target mode id");
}

TargetMode target_mode_from_name(const std::string& s) {
    if (s == "two-hot") return TargetMode::TwoHot;
    if (s == "half-half") return TargetMode::HalfHalf;
    fail(ErrorCode::ConfigError, "unknown target mode '" + s + "' (expected two-hot or half-half)");
}

void AttackConfig::validate() const {
    if (!(lambda_org >= 0.0 && lambda_org <= 1.0))
        fail(ErrorCode::ConfigError, "attack: lambda_org must lie in [0,1]");
    if (!learned_coefficient && !(lambda_noised >= 0.0 && lambda_noised <= 1.0))
        fail(ErrorCode::ConfigError, "attack: lambda_noised must lie in [0,1]");
    if (lambda0 < 0 || lambda1 < 0 || lambda2 < 0)
        fail(ErrorCode::ConfigError, "attack: loss weights must be >= 0");
    if (lambda0 + lambda1 + lambda2 <= 0)
        fail(ErrorCode::ConfigError, "attack: at least one loss weight must be > 0");
    if (smoothmax_temp <= 0) fail(ErrorCode::ConfigError, "attack: smoothmax_temp must be > 0");
    if (param_budget < 1) fail(ErrorCode::ConfigError, "attack: param_budget must be >= 1");
    if (epochs < 0) fail(ErrorCode::ConfigError, "attack: epochs must be >= 0");
    if (batch_size < 1) fail(ErrorCode::ConfigError, "attack: batch_size must be >= 1");
    if (lr <= 0) fail(ErrorCode::ConfigError, "attack: lr must be > 0");
}

std::pair<int64_t, int64_t> attack_hidden_widths(int64_t m, int64_t n, int64_t classes,
                                                 int64_t param_budget) {
    if (m < 1 || n < 1) fail(ErrorCode::ConfigError, "attack: latent dims must be >= 1");
    if (classes < 2) fail(ErrorCode::ConfigError, "attack: classes must be >= 2");
    if (param_budget < 1) fail(ErrorCode::ConfigError, "attack: param_budget must be >= 1");
    const int64_t in = m + n + classes;
    const int64_t out = m + n;
    int64_t best_h = -1, best_h2 = -1, best_err = -1;
    for (int64_t h = 4; h <= 8192; ++h) {
        const int64_t h2 = std::max<int64_t>(4, h / 2);
        const int64_t count = (in + 1) * h + (h + 1) * out + (in + 1) * h2 + (h2 + 1);
        const int64_t err = std::llabs(count - param_budget);
        if (best_err < 0 || err < best_err) {
            best_err = err;
            best_h = h;
            best_h2 = h2;
        }
    }
    if (best_err * 20 > param_budget)
        fail(ErrorCode::ConfigError, "attack: no hidden width lands within 5% of a budget of " +
                                         std::to_string(param_budget) + " parameters");
    return {best_h, best_h2};
}

namespace {

void check_dims(int64_t m, int64_t n, int64_t classes) {
    if (m < 1 || n < 1) fail(ErrorCode::ConfigError, "attack: latent dims must be >= 1");
    if (classes < 2) fail(ErrorCode::ConfigError, "attack: classes must be >= 2");
}

// Flattens [N,D], [N,H,W] or [N,1,H,W] pixel batches (or a single [D] row)
// into [N,D].
Tensor<float> as_rows(const Tensor<float>& x, int64_t pixels, const char* who) {
    if (x.ndim() == 1 && x.dim(0) == pixels) return x.reshaped({1, pixels});
    if (x.ndim() == 2 && x.dim(1) == pixels) return x;
    if (x.ndim() == 2 && x.dim(0) * x.dim(1) == pixels) return x.reshaped({1, pixels});
    if (x.ndim() == 3 && x.dim(1) * x.dim(2) == pixels) return x.reshaped({x.dim(0), pixels});
    if (x.ndim() == 4 && x.dim(1) == 1 && x.dim(2) * x.dim(3) == pixels)
        return x.reshaped({x.dim(0), pixels});
    fail(ErrorCode::ShapeMismatch,
         std::string(who) + ": expected image rows of " + std::to_string(pixels) +
             " pixels, got " + shape_str(x.shape()));
}

Tensor<float> slice_rows(const Tensor<float>& x, int64_t r0, int64_t r1) {
    const int64_t d = x.dim(1);
    Tensor<float> out({r1 - r0, d});
    std::copy(x.data() + r0 * d, x.data() + r1 * d, out.data());
    return out;
}

// Class-conditioned latent moments gathered per row at the target classes.
template <class S>
struct ClassRows {
    Tensor<S> mu_z, sig_z;  // [N, m]
    Tensor<S> mu_c, sig_c;  // [N, n]
};

template <class S>
ClassRows<S> gather_class_rows(const ClassLatentStats& st, const std::vector<int32_t>& targets) {
    const int64_t nrows = int64_t(targets.size());
    ClassRows<S> r{Tensor<S>({nrows, st.m}), Tensor<S>({nrows, st.m}), Tensor<S>({nrows, st.n}),
                   Tensor<S>({nrows, st.n})};
    for (int64_t i = 0; i < nrows; ++i) {
        const int64_t t = targets[size_t(i)];
        if (t < 0 || t >= st.classes)
            fail(ErrorCode::InvalidClass, "attack: target class " + std::to_string(t) +
                                              " outside [0," + std::to_string(st.classes) + ")");
        for (int64_t j = 0; j < st.m; ++j) {
            r.mu_z[i * st.m + j] = S(st.mu_z[t * st.m + j]);
            r.sig_z[i * st.m + j] = S(st.sigma_z[t * st.m + j]);
        }
        for (int64_t j = 0; j < st.n; ++j) {
            r.mu_c[i * st.n + j] = S(st.mu_c[t * st.n + j]);
            r.sig_c[i * st.n + j] = S(st.sigma_c[t * st.n + j]);
        }
    }
    return r;
}

// The mixing step shared by the amortized networks and the per-sample
// optimizer: z' = mu + eta_z * sigma (same for c'), then
// Z = lambda_org * z + lambda_noised * z' and the clamp-and-renormalize
// categorical mix. `lambda_rows` ([N], in (0,1)) overrides the fixed
// coefficient when present.
template <class S>
LatentCode<S> mix_poisoned(const ag::Var<S>& z, const ag::Var<S>& c, const ClassRows<S>& rows,
                           const ag::Var<S>& eta_z, const ag::Var<S>& eta_c,
                           const ag::Var<S>* lambda_rows, const AttackConfig& cfg) {
    auto zp = ag::add(ag::Var<S>::constant(rows.mu_z),
                      ag::mul(eta_z, ag::Var<S>::constant(rows.sig_z)));
    auto cp = ag::add(ag::Var<S>::constant(rows.mu_c),
                      ag::mul(eta_c, ag::Var<S>::constant(rows.sig_c)));
    const S lo = S(cfg.lambda_org);
    ag::Var<S> zm, cm;
    if (lambda_rows) {
        zm = ag::add(ag::mul_scalar(z, lo), ag::mul_colvec(zp, *lambda_rows));
        cm = ag::add(ag::mul_scalar(c, lo), ag::mul_colvec(cp, *lambda_rows));
    } else {
        const S ln = S(cfg.lambda_noised);
        zm = ag::add(ag::mul_scalar(z, lo), ag::mul_scalar(zp, ln));
        cm = ag::add(ag::mul_scalar(c, lo), ag::mul_scalar(cp, ln));
    }
    return {zm, ag::simplex_renorm_rows(cm, S(1e-8))};
}

// Leaves untouched by the current graph (the coefficient head under a fixed
// mixing weight) carry a correct-by-definition zero gradient; the optimizer
// requires every leaf to have one.
template <class S>
void materialize_zero_grads(ParamStore<S>& ps) {
    for (const auto& name : ps.names()) {
        auto& v = ps.at(name);
        if (!v.has_grad()) v.node()->grad = Tensor<S>(v.value().shape());
    }
}

std::vector<float> snapshot_params(const ParamStore<float>& ps) {
    std::vector<float> out;
    for (const auto& name : ps.names()) {
        const auto& v = ps.at(name).value().vec();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

void check_compatible(const JointVae<float>& vae, const Classifier<float>& inference,
                      const ClassLatentStats& stats) {
    const auto& vcfg = vae.config();
    if (stats.m != vcfg.m || stats.n != vcfg.n)
        fail(ErrorCode::ShapeMismatch, "attack: latent statistics sized " + std::to_string(stats.m) +
                                           "/" + std::to_string(stats.n) +
                                           " do not match the autoencoder");
    if (inference.classes() != stats.classes)
        fail(ErrorCode::ShapeMismatch, "attack: classifier classes do not match latent statistics");
    if (inference.image_side() != vcfg.image_side)
        fail(ErrorCode::ShapeMismatch, "attack: classifier image side does not match autoencoder");
}

AttackRecord make_record(const float* orig, const float* adv, int64_t d, int32_t label, int32_t t1,
                         int32_t t2, float p1, float p2) {
    AttackRecord r;
    r.original = Tensor<float>({d});
    r.adversarial = Tensor<float>({d});
    std::copy(orig, orig + d, r.original.data());
    std::copy(adv, adv + d, r.adversarial.data());
    for (int64_t i = 0; i < d; ++i)
        if (!(r.adversarial[i] >= 0.0f && r.adversarial[i] <= 1.0f))
            fail(ErrorCode::InvariantViolation, "attack: adversarial pixels escaped [0,1]");
    r.label = label;
    r.top1 = t1;
    r.top2 = t2;
    r.top1_prob = p1;
    r.top2_prob = p2;
    r.ssim = metrics::ssim(r.original, r.adversarial);
    r.l2 = metrics::lp_distance(r.original, r.adversarial, metrics::Norm::L2);
    r.linf = metrics::lp_distance(r.original, r.adversarial, metrics::Norm::Linf);
    return r;
}

}  // namespace

template <class S>
AttackNetworks<S>::AttackNetworks(int64_t m, int64_t n, int64_t classes, int64_t param_budget,
                                  ParamStore<S> params)
    : m_(m), n_(n), classes_(classes), budget_(param_budget), params_(std::move(params)) {
    check_dims(m, n, classes);
    const ModelSpec spec = make_spec(m, n, classes, param_budget);
    for (const auto& def : spec.defs) {
        if (!params_.has(def.name))
            fail(ErrorCode::PreconditionViolation,
                 "attack: parameter store missing " + def.name);
        if (params_.at(def.name).value().shape() != def.shape)
            fail(ErrorCode::ShapeMismatch, "attack: bad shape for parameter " + def.name);
    }
    const int64_t count = params_.count_params();
    if (std::llabs(count - param_budget) * 20 > param_budget)
        fail(ErrorCode::ConfigError, "attack: " + std::to_string(count) +
                                         " parameters fall outside 5% of the budget of " +
                                         std::to_string(param_budget));
}

template <class S>
ModelSpec AttackNetworks<S>::make_spec(int64_t m, int64_t n, int64_t classes,
                                       int64_t param_budget) {
    check_dims(m, n, classes);
    const auto [h, h2] = attack_hidden_widths(m, n, classes, param_budget);
    const int64_t in = m + n + classes;
    ModelSpec spec;
    spec.arch = "attack-poison-m" + std::to_string(m) + "-n" + std::to_string(n) + "-k" +
                std::to_string(classes) + "-b" + std::to_string(param_budget);
    nn::add_dense(spec, "noise.l1", in, h);
    nn::add_dense(spec, "noise.l2", h, m + n);
    nn::add_dense(spec, "coeff.l1", in, h2);
    nn::add_dense(spec, "coeff.l2", h2, 1);
    return spec;
}

template <class S>
AttackNetworks<S> AttackNetworks<S>::init(int64_t m, int64_t n, int64_t classes,
                                          int64_t param_budget, uint64_t seed) {
    return AttackNetworks(m, n, classes, param_budget,
                          init_params<S>(make_spec(m, n, classes, param_budget), seed));
}

template <class S>
ag::Var<S> AttackNetworks<S>::noise(const ag::Var<S>& input) const {
    if (input.shape().size() != 2 || input.dim(1) != input_dim())
        fail(ErrorCode::ShapeMismatch, "attack: noise input must be [N," +
                                           std::to_string(input_dim()) + "]");
    auto h = ag::relu(nn::dense(params_, "noise.l1", input));
    return nn::dense(params_, "noise.l2", h);
}

template <class S>
ag::Var<S> AttackNetworks<S>::coefficient(const ag::Var<S>& input) const {
    if (input.shape().size() != 2 || input.dim(1) != input_dim())
        fail(ErrorCode::ShapeMismatch, "attack: coefficient input must be [N," +
                                           std::to_string(input_dim()) + "]");
    auto h = ag::relu(nn::dense(params_, "coeff.l1", input));
    return ag::sigmoid(nn::dense(params_, "coeff.l2", h));
}

std::pair<int32_t, int32_t> select_target(const float* probs, int64_t k) {
    if (k < 2) fail(ErrorCode::PreconditionViolation, "select_target: need at least two classes");
    double sum = 0;
    for (int64_t i = 0; i < k; ++i) {
        if (!(probs[i] >= -1e-6f))
            fail(ErrorCode::PreconditionViolation, "select_target: negative probability");
        sum += double(probs[i]);
    }
    if (std::abs(sum - 1.0) > 1e-3)
        fail(ErrorCode::PreconditionViolation, "select_target: probabilities do not sum to 1");
    int64_t t1 = 0;
    for (int64_t i = 1; i < k; ++i)
        if (probs[i] > probs[t1]) t1 = i;
    int64_t t2 = t1 == 0 ? 1 : 0;
    for (int64_t i = 0; i < k; ++i)
        if (i != t1 && probs[i] > probs[t2]) t2 = i;
    return {int32_t(t1), int32_t(t2)};
}

std::pair<int32_t, int32_t> select_target(const std::vector<float>& probs) {
    return select_target(probs.data(), int64_t(probs.size()));
}

Tensor<float> make_target_softlabels(int32_t top1, int32_t top2, int64_t classes) {
    if (top1 < 0 || top1 >= classes || top2 < 0 || top2 >= classes)
        fail(ErrorCode::InvalidClass, "make_target_softlabels: class index out of range");
    if (top1 == top2)
        fail(ErrorCode::PreconditionViolation, "make_target_softlabels: classes must differ");
    Tensor<float> t({classes});
    t[top1] = 1.0f;
    t[top2] = 1.0f;
    return t;
}

std::pair<Tensor<float>, Tensor<float>> encode_deterministic(const JointVae<float>& vae,
                                                             const Tensor<float>& x) {
    const Tensor<float> flat = as_rows(x, vae.config().pixels(), "encode_deterministic");
    ScopedNoGrad<float> guard(const_cast<ParamStore<float>&>(vae.params()));
    auto post = vae.encode(ag::Var<float>::constant(flat));
    return {post.mu_z.value(), ops::softmax_rows(post.c_logits.value())};
}

Tensor<float> reconstruct_deterministic(const JointVae<float>& vae, const Tensor<float>& x) {
    auto [z, c] = encode_deterministic(vae, x);
    ScopedNoGrad<float> guard(const_cast<ParamStore<float>&>(vae.params()));
    return vae.decode(ag::Var<float>::constant(z), ag::Var<float>::constant(c)).value();
}

template <class S>
LatentCode<S> poison_latents(const ag::Var<S>& z, const ag::Var<S>& c,
                             const ClassLatentStats& stats, const std::vector<int32_t>& targets,
                             const AttackNetworks<S>& networks, const AttackConfig& cfg) {
    cfg.validate();
    stats.validate();
    if (z.shape().size() != 2 || c.shape().size() != 2)
        fail(ErrorCode::ShapeMismatch, "poison_latents: z and c must be 2-d");
    if (z.dim(1) != stats.m || z.dim(1) != networks.m())
        fail(ErrorCode::ShapeMismatch, "poison_latents: continuous latent width mismatch");
    if (c.dim(1) != stats.n || c.dim(1) != networks.n())
        fail(ErrorCode::ShapeMismatch, "poison_latents: categorical latent width mismatch");
    if (stats.classes != networks.classes())
        fail(ErrorCode::ShapeMismatch, "poison_latents: class count mismatch");
    const int64_t nrows = z.dim(0);
    if (c.dim(0) != nrows || int64_t(targets.size()) != nrows)
        fail(ErrorCode::ShapeMismatch, "poison_latents: one target per latent row required");

    const auto rows = gather_class_rows<S>(stats, targets);
    Tensor<S> onehot({nrows, stats.classes});
    for (int64_t i = 0; i < nrows; ++i) onehot[i * stats.classes + targets[size_t(i)]] = S(1);

    auto input = ag::concat_cols<S>({z, c, ag::Var<S>::constant(onehot)});
    auto eta = networks.noise(input);
    auto eta_z = ag::slice_cols(eta, 0, stats.m);
    auto eta_c = ag::slice_cols(eta, stats.m, stats.m + stats.n);
    if (cfg.learned_coefficient) {
        auto lam = ag::reshape(networks.coefficient(input), {nrows});
        return mix_poisoned(z, c, rows, eta_z, eta_c, &lam, cfg);
    }
    return mix_poisoned<S>(z, c, rows, eta_z, eta_c, nullptr, cfg);
}

template <class S>
ag::Var<S> bce_multilabel(const ag::Var<S>& pred_probs, const Tensor<S>& targets,
                          const Tensor<S>* weights) {
    if (pred_probs.shape().size() != 2)
        fail(ErrorCode::ShapeMismatch, "bce_multilabel: probabilities must be [N,K]");
    check_same_shape(pred_probs.value(), targets, "bce_multilabel");
    if (weights && weights->size() != pred_probs.dim(1))
        fail(ErrorCode::ShapeMismatch, "bce_multilabel: one weight per class required");
    return ag::bce_rows<S>(pred_probs, targets, weights, S(1e-7));
}

template <class S>
AttackLossTerms<S> composite_loss(const Tensor<S>& x, const ag::Var<S>& x_adv,
                                  const ClassifyOut<S>& pred, const Tensor<S>& target_twohot,
                                  const AttackConfig& cfg) {
    cfg.validate();
    if (x.ndim() != 2) fail(ErrorCode::ShapeMismatch, "composite_loss: x must be [N,D]");
    check_same_shape(x, x_adv.value(), "composite_loss");
    check_same_shape(pred.probs.value(), target_twohot, "composite_loss targets");
    if (x_adv.dim(0) != target_twohot.dim(0))
        fail(ErrorCode::ShapeMismatch, "composite_loss: batch sizes disagree");

    ag::Var<S> cls;
    if (cfg.target_mode == TargetMode::TwoHot) {
        cls = ag::mean_all(bce_multilabel<S>(pred.probs, target_twohot, nullptr));
    } else {
        Tensor<S> half = target_twohot;
        for (int64_t i = 0; i < half.size(); ++i) half[i] *= S(0.5);
        cls = ag::mean_all(ag::cross_entropy_rows(pred.logits, half));
    }

    auto diff = ag::sub(x_adv, ag::Var<S>::constant(x));
    ag::Var<S> norm =
        cfg.norm_choice == AttackNorm::L2
            ? ag::mean_all(ag::sqrt_(ag::rowwise_sum(ag::square(diff)), S(1e-12)))
            : ag::mean_all(
                  ag::rowwise_logmeanexp(ag::softabs(diff, S(1e-12)), S(cfg.smoothmax_temp)));

    auto sim = metrics::ssim_global_rows<S>(ag::Var<S>::constant(x), x_adv);
    auto dssim = ag::mean_all(ag::add_scalar(ag::mul_scalar(sim, S(-1)), S(1)));

    auto total = ag::add(ag::add(ag::mul_scalar(cls, S(cfg.lambda0)),
                                 ag::mul_scalar(norm, S(cfg.lambda1))),
                         ag::mul_scalar(dssim, S(cfg.lambda2)));
    return {total, cls, norm, dssim};
}

AttackTrainResult attack_train(const JointVae<float>& vae, const Classifier<float>& inference,
                               const ClassLatentStats& stats, const LabeledImageSet& train,
                               const AttackConfig& cfg, std::ostream* jsonl) {
    cfg.validate();
    stats.validate();
    check_compatible(vae, inference, stats);
    if (train.split == Split::Test)
        fail(ErrorCode::PreconditionViolation, "attack: refusing to train against the test split");
    if (train.count() == 0) fail(ErrorCode::EmptyInput, "attack: empty training set");
    const auto& vcfg = vae.config();
    if (train.height() * train.width() != vcfg.pixels())
        fail(ErrorCode::ShapeMismatch, "attack: dataset image size does not match the autoencoder");

    auto& vae_ps = const_cast<ParamStore<float>&>(vae.params());
    auto& clf_ps = const_cast<ParamStore<float>&>(inference.params());
    const auto vae_before = snapshot_params(vae_ps);
    const auto clf_before = snapshot_params(clf_ps);
    ScopedNoGrad<float> freeze_vae(vae_ps);
    ScopedNoGrad<float> freeze_clf(clf_ps);

    auto nets = AttackNetworks<float>::init(vcfg.m, vcfg.n, stats.classes, cfg.param_budget,
                                            hash_seed(cfg.seed, "attack:init"));
    AdamState<float> adam;
    adam.lr = cfg.lr;

    std::vector<AttackEpochLog> log;
    BatchIter iter(train, cfg.batch_size, hash_seed(cfg.seed, "attack:epoch:1"), true);
    Tensor<float> images;
    std::vector<int32_t> labels;
    int64_t gstep = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (epoch > 1) iter.reset(hash_seed(cfg.seed, "attack:epoch:" + std::to_string(epoch)), true);
        double s_total = 0, s_cls = 0, s_norm = 0, s_dssim = 0;
        int64_t seen = 0;
        while (iter.next(images, labels)) {
            const int64_t b = images.dim(0);
            const Tensor<float> flat = images.reshaped({b, vcfg.pixels()});

            auto post = vae.encode(ag::Var<float>::constant(images));
            auto z = ag::Var<float>::constant(post.mu_z.value());
            auto c = ag::Var<float>::constant(ops::softmax_rows(post.c_logits.value()));

            const Tensor<float> probs = inference.predict_probs(flat);
            std::vector<int32_t> targets(size_t(b), 0);
            Tensor<float> twohot({b, stats.classes});
            for (int64_t i = 0; i < b; ++i) {
                const auto [t1, t2] = select_target(probs.data() + i * stats.classes, stats.classes);
                targets[size_t(i)] = t2;
                twohot.at2(i, t1) = 1.0f;
                twohot.at2(i, t2) = 1.0f;
            }

            auto code = poison_latents<float>(z, c, stats, targets, nets, cfg);
            auto x_adv = vae.decode(code.z, code.c);
            auto pred = classify(inference, x_adv);
            auto terms = composite_loss<float>(flat, x_adv, pred, twohot, cfg);
            if (!terms.total.value().all_finite())
                fail(ErrorCode::NonFiniteLoss,
                     "attack: non-finite loss at step " + std::to_string(gstep));

            nets.params().zero_grads();
            ag::backward(terms.total);
            materialize_zero_grads(nets.params());
            adam_step(nets.params(), adam);

            s_total += double(terms.total.value()[0]) * double(b);
            s_cls += double(terms.classify.value()[0]) * double(b);
            s_norm += double(terms.norm.value()[0]) * double(b);
            s_dssim += double(terms.dssim.value()[0]) * double(b);
            seen += b;
            ++gstep;
        }

        AttackEpochLog entry;
        entry.epoch = epoch;
        entry.total = seen ? s_total / double(seen) : 0.0;
        entry.classify = seen ? s_cls / double(seen) : 0.0;
        entry.norm = seen ? s_norm / double(seen) : 0.0;
        entry.dssim = seen ? s_dssim / double(seen) : 0.0;
        log.push_back(entry);
        if (jsonl) {
            (*jsonl) << "{\"event\":\"attack_epoch\",\"epoch\":" << entry.epoch
                     << ",\"total\":" << entry.total << ",\"classify\":" << entry.classify
                     << ",\"norm\":" << entry.norm << ",\"dssim\":" << entry.dssim << "}\n";
            jsonl->flush();
        }
    }

    if (snapshot_params(vae_ps) != vae_before || snapshot_params(clf_ps) != clf_before)
        fail(ErrorCode::InvariantViolation, "attack: frozen model drifted during attack training");
    return {std::move(nets), std::move(log)};
}

std::vector<AttackRecord> attack_apply(const AttackNetworks<float>& networks,
                                       const JointVae<float>& vae,
                                       const Classifier<float>& inference,
                                       const ClassLatentStats& stats, const Tensor<float>& images,
                                       const std::vector<int32_t>& labels,
                                       const AttackConfig& cfg) {
    cfg.validate();
    stats.validate();
    check_compatible(vae, inference, stats);
    const int64_t d = vae.config().pixels();
    const Tensor<float> flat = as_rows(images, d, "attack_apply");
    const int64_t total = flat.dim(0);
    if (int64_t(labels.size()) != total)
        fail(ErrorCode::ShapeMismatch, "attack_apply: one label per image required");

    ScopedNoGrad<float> freeze_vae(const_cast<ParamStore<float>&>(vae.params()));
    ScopedNoGrad<float> freeze_clf(const_cast<ParamStore<float>&>(inference.params()));
    ScopedNoGrad<float> freeze_nets(const_cast<ParamStore<float>&>(networks.params()));

    std::vector<AttackRecord> out;
    out.reserve(size_t(total));
    const int64_t chunk = 256;
    const int64_t k = stats.classes;
    for (int64_t r0 = 0; r0 < total; r0 += chunk) {
        const int64_t r1 = std::min(total, r0 + chunk);
        const int64_t b = r1 - r0;
        const Tensor<float> sub = slice_rows(flat, r0, r1);

        auto [z_t, c_t] = encode_deterministic(vae, sub);
        const Tensor<float> probs = inference.predict_probs(sub);
        std::vector<int32_t> targets(size_t(b), 0);
        std::vector<std::pair<int32_t, int32_t>> tops(static_cast<size_t>(b));
        for (int64_t i = 0; i < b; ++i) {
            tops[size_t(i)] = select_target(probs.data() + i * k, k);
            targets[size_t(i)] = tops[size_t(i)].second;
        }

        auto code = poison_latents<float>(ag::Var<float>::constant(z_t),
                                          ag::Var<float>::constant(c_t), stats, targets, networks,
                                          cfg);
        const Tensor<float> adv = vae.decode(code.z, code.c).value();

        for (int64_t i = 0; i < b; ++i) {
            const auto [t1, t2] = tops[size_t(i)];
            out.push_back(make_record(sub.data() + i * d, adv.data() + i * d, d,
                                      labels[size_t(r0 + i)], t1, t2, probs.at2(i, t1),
                                      probs.at2(i, t2)));
        }
    }
    return out;
}

void complete_with_test_predictions(BlackBoxClassifier& test_clf,
                                    std::vector<AttackRecord>& records) {
    if (records.empty()) return;
    const int64_t d = records.front().original.size();
    const int64_t chunk = 256;
    for (size_t r0 = 0; r0 < records.size(); r0 += size_t(chunk)) {
        const size_t r1 = std::min(records.size(), r0 + size_t(chunk));
        const int64_t b = int64_t(r1 - r0);
        Tensor<float> orig({b, d}), adv({b, d});
        for (size_t i = r0; i < r1; ++i) {
            if (records[i].original.size() != d || records[i].adversarial.size() != d)
                fail(ErrorCode::ShapeMismatch, "attack: inconsistent record image sizes");
            std::copy(records[i].original.data(), records[i].original.data() + d,
                      orig.data() + int64_t(i - r0) * d);
            std::copy(records[i].adversarial.data(), records[i].adversarial.data() + d,
                      adv.data() + int64_t(i - r0) * d);
        }
        const auto before = test_clf.predict(orig);
        const auto after = test_clf.predict(adv);
        for (size_t i = r0; i < r1; ++i) {
            auto& rec = records[i];
            rec.test_pred_before = before[i - r0];
            rec.test_pred_after = after[i - r0];
            rec.success = rec.test_pred_after != rec.label;
            rec.has_test_eval = true;
        }
    }
}

double target_inequality_rate(const Classifier<float>& inference,
                              const std::vector<AttackRecord>& records) {
    if (records.empty()) fail(ErrorCode::EmptyInput, "target_inequality_rate: no records");
    const int64_t d = records.front().original.size();
    const int64_t k = inference.classes();
    int64_t achieved = 0;
    const int64_t chunk = 256;
    for (size_t r0 = 0; r0 < records.size(); r0 += size_t(chunk)) {
        const size_t r1 = std::min(records.size(), r0 + size_t(chunk));
        const int64_t b = int64_t(r1 - r0);
        Tensor<float> adv({b, d});
        for (size_t i = r0; i < r1; ++i)
            std::copy(records[i].adversarial.data(), records[i].adversarial.data() + d,
                      adv.data() + int64_t(i - r0) * d);
        const Tensor<float> probs = inference.predict_probs(adv);
        for (size_t i = r0; i < r1; ++i) {
            const auto& rec = records[i];
            if (rec.top1 < 0 || rec.top1 >= k || rec.top2 < 0 || rec.top2 >= k)
                fail(ErrorCode::InvalidClass, "target_inequality_rate: record classes out of range");
            achieved += probs.at2(int64_t(i - r0), rec.top2) >= probs.at2(int64_t(i - r0), rec.top1);
        }
    }
    return double(achieved) / double(records.size());
}

AttackRecord attack_optimize_single(const JointVae<float>& vae, const Classifier<float>& inference,
                                    const ClassLatentStats& stats, const Tensor<float>& image,
                                    int32_t label, const AttackConfig& cfg, int64_t steps) {
    cfg.validate();
    stats.validate();
    check_compatible(vae, inference, stats);
    if (steps < 1) fail(ErrorCode::ConfigError, "attack: optimization steps must be >= 1");
    const int64_t d = vae.config().pixels();
    const Tensor<float> flat = as_rows(image, d, "attack_optimize_single");
    if (flat.dim(0) != 1)
        fail(ErrorCode::ShapeMismatch, "attack_optimize_single: exactly one image expected");

    ScopedNoGrad<float> freeze_vae(const_cast<ParamStore<float>&>(vae.params()));
    ScopedNoGrad<float> freeze_clf(const_cast<ParamStore<float>&>(inference.params()));

    auto [z_t, c_t] = encode_deterministic(vae, flat);
    const Tensor<float> probs = inference.predict_probs(flat);
    const auto [t1, t2] = select_target(probs.data(), stats.classes);
    Tensor<float> twohot = make_target_softlabels(t1, t2, stats.classes).reshaped({1, stats.classes});
    const auto rows = gather_class_rows<float>(stats, {t2});

    ParamStore<float> ps;
    ps.add("eta_z", Tensor<float>({1, stats.m}));
    ps.add("eta_c", Tensor<float>({1, stats.n}));
    if (cfg.learned_coefficient) ps.add("lambda_logit", Tensor<float>({1}));
    AdamState<float> adam;
    adam.lr = cfg.lr;

    auto build = [&]() {
        auto z = ag::Var<float>::constant(z_t);
        auto c = ag::Var<float>::constant(c_t);
        if (cfg.learned_coefficient) {
            auto lam = ag::sigmoid(ps.at("lambda_logit"));
            return mix_poisoned<float>(z, c, rows, ps.at("eta_z"), ps.at("eta_c"), &lam, cfg);
        }
        return mix_poisoned<float>(z, c, rows, ps.at("eta_z"), ps.at("eta_c"), nullptr, cfg);
    };

    for (int64_t step = 0; step < steps; ++step) {
        auto code = build();
        auto x_adv = vae.decode(code.z, code.c);
        auto pred = classify(inference, x_adv);
        auto terms = composite_loss<float>(flat, x_adv, pred, twohot, cfg);
        if (!terms.total.value().all_finite())
            fail(ErrorCode::NonFiniteLoss,
                 "attack: non-finite loss at optimization step " + std::to_string(step));
        ps.zero_grads();
        ag::backward(terms.total);
        materialize_zero_grads(ps);
        adam_step(ps, adam);
    }

    ScopedNoGrad<float> freeze_etas(ps);
    auto code = build();
    const Tensor<float> adv = vae.decode(code.z, code.c).value();
    return make_record(flat.data(), adv.data(), d, label, t1, t2, probs[t1], probs[t2]);
}

Tensor<float> interpolate(const JointVae<float>& vae, const Tensor<float>& x1,
                          const Tensor<float>& x2, double a, double b) {
    const int64_t d = vae.config().pixels();
    const Tensor<float> f1 = as_rows(x1, d, "interpolate");
    const Tensor<float> f2 = as_rows(x2, d, "interpolate");
    if (f1.dim(0) != f2.dim(0))
        fail(ErrorCode::ShapeMismatch, "interpolate: batches must have equal size");

    auto [z1, c1] = encode_deterministic(vae, f1);
    auto [z2, c2] = encode_deterministic(vae, f2);
    Tensor<float> z(z1.shape()), c(c1.shape());
    for (int64_t i = 0; i < z.size(); ++i) z[i] = float(a) * z1[i] + float(b) * z2[i];
    const int64_t n = c.dim(1);
    for (int64_t r = 0; r < c.dim(0); ++r) {
        double sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            const double v = std::max(0.0, double(float(a) * c1[r * n + j] + float(b) * c2[r * n + j]));
            c[r * n + j] = float(v);
            sum += v;
        }
        if (sum <= 1e-8)
            for (int64_t j = 0; j < n; ++j) c[r * n + j] = 1.0f / float(n);
        else
            for (int64_t j = 0; j < n; ++j) c[r * n + j] = float(double(c[r * n + j]) / sum);
    }

    ScopedNoGrad<float> guard(const_cast<ParamStore<float>&>(vae.params()));
    return vae.decode(ag::Var<float>::constant(z), ag::Var<float>::constant(c)).value();
}

void save_attack_checkpoint(const AttackNetworks<float>& networks, const std::string& path) {
    MetaMap meta{{"kind", "attack-poison"},
                 {"m", std::to_string(networks.m())},
                 {"n", std::to_string(networks.n())},
                 {"classes", std::to_string(networks.classes())},
                 {"param_budget", std::to_string(networks.param_budget())}};
    save_checkpoint(networks.params(), meta, path);
}

AttackNetworks<float> load_attack_checkpoint(const std::string& path) {
    auto [ps, meta] = load_checkpoint<float>(path);
    auto get = [&meta, &path](const char* key) -> std::string {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        fail(ErrorCode::CorruptFile,
             "attack checkpoint " + path + " missing metadata key " + key);
    };
    if (get("kind") != "attack-poison")
        fail(ErrorCode::CorruptFile, "attack checkpoint " + path + " has the wrong kind");
    return AttackNetworks<float>(std::stoll(get("m")), std::stoll(get("n")),
                                 std::stoll(get("classes")), std::stoll(get("param_budget")),
                                 std::move(ps));
}

#define LSP_INSTANTIATE_ATTACK(S)                                                               \
    template class AttackNetworks<S>;                                                           \
    template struct AttackLossTerms<S>;                                                         \
    template LatentCode<S> poison_latents<S>(const ag::Var<S>&, const ag::Var<S>&,              \
                                             const ClassLatentStats&,                           \
                                             const std::vector<int32_t>&,                       \
                                             const AttackNetworks<S>&, const AttackConfig&);    \
    template ag::Var<S> bce_multilabel<S>(const ag::Var<S>&, const Tensor<S>&,                  \
                                          const Tensor<S>*);                                    \
    template AttackLossTerms<S> composite_loss<S>(const Tensor<S>&, const ag::Var<S>&,         \
                                                  const ClassifyOut<S>&, const Tensor<S>&,      \
                                                  const AttackConfig&);

LSP_INSTANTIATE_ATTACK(float)
LSP_INSTANTIATE_ATTACK(double)
#undef LSP_INSTANTIATE_ATTACK

}  // namespace lsp
