#pragma once

#include "lsp/autograd.hpp"
#include "lsp/dataio.hpp"
#include "lsp/nn.hpp"
#include "lsp/rng.hpp"
#include "lsp/substrate.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace lsp {

enum class Arch { LenetSmall, MadryMnist };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);

// Pixel-space L-infinity PGD. step_size <= 0 selects the 2.5 * eps / steps
// schedule; a uniform random start inside the ball is the default.
struct PgdConfig {
    double epsilon = 0.3;
    int64_t steps = 20;
    double step_size = 0.0;
    bool random_start = true;

    double effective_step() const {
        if (step_size > 0) return step_size;
        return steps > 0 ? 2.5 * epsilon / double(steps) : 0.0;
    }
    void validate() const;
};

struct ClassifierConfig {
    Arch arch = Arch::LenetSmall;
    int64_t classes = 10;
    int64_t image_side = 28;
    double label_smoothing = 0.0;
    int64_t epochs = 3;
    int64_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;

    // When set, every minibatch is replaced by its PGD counterpart before the
    // gradient step (adversarial training); requires train_attack.epsilon > 0.
    bool adversarial = false;
    PgdConfig train_attack;

    void validate() const;
};

// Feed-forward convolutional classifier. Calling logits() with an input that
// carries gradient tracking bumps a per-model audit counter; black-box
// consumers must leave that counter untouched.
template <class S>
class Classifier {
public:
    Classifier(Arch arch, int64_t classes, int64_t image_side, ParamStore<S> params);

    static ModelSpec make_spec(Arch arch, int64_t classes, int64_t image_side);
    static Classifier init(Arch arch, int64_t classes, int64_t image_side, uint64_t seed);

    // x is [N,1,side,side] or [N,side*side], values in [0,1].
    ag::Var<S> logits(const ag::Var<S>& x) const;
    Tensor<S> predict_probs(const Tensor<S>& x) const;  // [N,K], rows sum to 1
    std::vector<int32_t> predict(const Tensor<S>& x) const;

    Arch arch() const { return arch_; }
    int64_t classes() const { return classes_; }
    int64_t image_side() const { return side_; }
    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }
    int64_t grad_query_count() const { return grad_queries_; }

    template <class T>
    Classifier<T> cast() const {
        return Classifier<T>(arch_, classes_, side_, params_.template cast<T>());
    }

private:
    Arch arch_;
    int64_t classes_;
    int64_t side_;
    ParamStore<S> params_;
    mutable int64_t grad_queries_ = 0;
};

template <class S>
struct ClassifyOut {
    ag::Var<S> logits;  // [N,K]
    ag::Var<S> probs;   // [N,K], softmax rows
};

template <class S>
ClassifyOut<S> classify(const Classifier<S>& model, const ag::Var<S>& x);

// Cross entropy against (1 - eps_ls) * onehot + eps_ls / K, batch mean.
template <class S>
ag::Var<S> smoothed_ce_loss(const ag::Var<S>& logits, const std::vector<int32_t>& labels,
                            double eps_ls);

// Runs signed-gradient ascent on the classification loss, projecting onto the
// eps ball and the [0,1] box after every step. The ball/box invariants are
// checked on every returned batch. Parameters are temporarily frozen so the
// backward pass only produces input gradients.
template <class S>
Tensor<S> pgd_attack(Classifier<S>& model, const Tensor<S>& x, const std::vector<int32_t>& labels,
                     const PgdConfig& cfg, Rng& rng);

struct ClassifierEpochLog {
    int64_t epoch = 0;
    double train_loss = 0;
    double train_acc = 0;
    double val_acc = 0;
};

struct ClassifierTrainResult {
    Classifier<float> model;
    std::vector<ClassifierEpochLog> log;
};

ClassifierTrainResult train_classifier(const LabeledImageSet& train, const LabeledImageSet& val,
                                       const ClassifierConfig& cfg, std::ostream* jsonl = nullptr);

// Weights plus architecture/classes/image side, so a checkpoint alone rebuilds
// a usable model. Wrong-kind or incomplete metadata -> CorruptFile.
void save_classifier_checkpoint(const Classifier<float>& model, const std::string& path);
Classifier<float> load_classifier_checkpoint(const std::string& path);

struct EvalResult {
    double standard_acc = 0;
    std::optional<double> robust_acc;  // set only when an attack config is given
};

EvalResult eval_accuracy(Classifier<float>& model, const LabeledImageSet& set,
                         const std::optional<PgdConfig>& attack, int64_t batch_size = 256,
                         uint64_t seed = 0);

// Prediction-only facade over a trained model: no logits, no parameters, no
// graph handles. Inputs enter as plain tensors, so nothing downstream can
// differentiate through it, and the wrapped model's gradient-query counter
// stays where it was.
class BlackBoxClassifier {
public:
    explicit BlackBoxClassifier(Classifier<float> model);

    Tensor<float> predict_probs(const Tensor<float>& x);
    std::vector<int32_t> predict(const Tensor<float>& x);

    int64_t classes() const { return model_.classes(); }
    int64_t image_side() const { return model_.image_side(); }
    int64_t prediction_queries() const { return prediction_queries_; }
    int64_t gradient_queries() const { return model_.grad_query_count() - baseline_grad_queries_; }

private:
    Classifier<float> model_;
    int64_t prediction_queries_ = 0;
    int64_t baseline_grad_queries_ = 0;
};

#define LSP_INSTANTIATE_CLF_DECL(S)                                                       \
    extern template class Classifier<S>;                                                  \
    extern template ClassifyOut<S> classify<S>(const Classifier<S>&, const ag::Var<S>&); \
    extern template ag::Var<S> smoothed_ce_loss<S>(const ag::Var<S>&,                    \
                                                   const std::vector<int32_t>&, double); \
    extern template Tensor<S> pgd_attack<S>(Classifier<S>&, const Tensor<S>&,            \
                                            const std::vector<int32_t>&, const PgdConfig&, Rng&);

LSP_INSTANTIATE_CLF_DECL(float)
LSP_INSTANTIATE_CLF_DECL(double)
#undef LSP_INSTANTIATE_CLF_DECL

}  // namespace lsp
