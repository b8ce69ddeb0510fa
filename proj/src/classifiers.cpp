#include "lsp/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

namespace lsp {

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::LenetSmall: return "lenet-small";
        case Arch::MadryMnist: return "madry-mnist";
    }
    fail(ErrorCode::InvariantViolation, "unknown architecture id");
}

Arch arch_from_name(const std::string& name) {
    if (name == "lenet-small") return Arch::LenetSmall;
    if (name == "madry-mnist") return Arch::MadryMnist;
    fail(ErrorCode::ConfigError, "unknown architecture '" + name + "'");
}

void PgdConfig::validate() const {
    if (epsilon < 0) fail(ErrorCode::ConfigError, "pgd: epsilon must be >= 0");
    if (steps < 0) fail(ErrorCode::ConfigError, "pgd: steps must be >= 0");
    if (steps > 0 && epsilon > 0 && effective_step() <= 0)
        fail(ErrorCode::ConfigError, "pgd: step_size must be > 0 when steps > 0");
}

void ClassifierConfig::validate() const {
    if (classes < 2) fail(ErrorCode::ConfigError, "classifier: classes must be >= 2");
    if (epochs < 0) fail(ErrorCode::ConfigError, "classifier: epochs must be >= 0");
    if (batch_size < 1) fail(ErrorCode::ConfigError, "classifier: batch_size must be >= 1");
    if (lr <= 0) fail(ErrorCode::ConfigError, "classifier: lr must be > 0");
    if (label_smoothing < 0 || label_smoothing >= 1)
        fail(ErrorCode::ConfigError, "classifier: label_smoothing must be in [0,1)");
    if (adversarial) {
        train_attack.validate();
        if (train_attack.epsilon <= 0)
            fail(ErrorCode::PreconditionViolation,
                 "classifier: adversarial training needs epsilon > 0");
    }
    (void)Classifier<float>::make_spec(arch, classes, image_side);  // validates geometry
}

namespace {

// Both towers: conv 5x5 -> pool -> conv 5x5 -> pool -> dense stack.
struct Geometry {
    ops::Conv2dGeom c1, c2;
    int64_t flat = 0;  // dense input width after the second pool
};

Geometry lenet_geom(int64_t side) {
    if (side < 12 || side % 2 != 0 || (side / 2 - 4) % 2 != 0)
        fail(ErrorCode::ConfigError, "lenet-small: unsupported image side " + std::to_string(side));
    Geometry g;
    g.c1.in_c = 1, g.c1.in_h = side, g.c1.in_w = side;
    g.c1.out_c = 6, g.c1.kh = 5, g.c1.kw = 5, g.c1.stride = 1, g.c1.pad = 2;
    const int64_t h1 = side / 2;  // after pool
    g.c2.in_c = 6, g.c2.in_h = h1, g.c2.in_w = h1;
    g.c2.out_c = 16, g.c2.kh = 5, g.c2.kw = 5, g.c2.stride = 1, g.c2.pad = 0;
    const int64_t h2 = (h1 - 4) / 2;  // valid conv, then pool
    g.flat = 16 * h2 * h2;
    return g;
}

Geometry madry_geom(int64_t side) {
    if (side < 8 || side % 4 != 0)
        fail(ErrorCode::ConfigError, "madry-mnist: unsupported image side " + std::to_string(side));
    Geometry g;
    g.c1.in_c = 1, g.c1.in_h = side, g.c1.in_w = side;
    g.c1.out_c = 32, g.c1.kh = 5, g.c1.kw = 5, g.c1.stride = 1, g.c1.pad = 2;
    g.c2.in_c = 32, g.c2.in_h = side / 2, g.c2.in_w = side / 2;
    g.c2.out_c = 64, g.c2.kh = 5, g.c2.kw = 5, g.c2.stride = 1, g.c2.pad = 2;
    g.flat = 64 * (side / 4) * (side / 4);
    return g;
}

Geometry geom_for(Arch arch, int64_t side) {
    return arch == Arch::LenetSmall ? lenet_geom(side) : madry_geom(side);
}

template <class S>
void check_pixel_box(const Tensor<S>& x, const char* who) {
    for (int64_t i = 0; i < x.size(); ++i)
        if (!(x[i] >= S(0) && x[i] <= S(1)))
            fail(ErrorCode::PreconditionViolation,
                 std::string(who) + ": pixel values must lie in [0,1]");
}

}  // namespace

template <class S>
Classifier<S>::Classifier(Arch arch, int64_t classes, int64_t image_side, ParamStore<S> params)
    : arch_(arch), classes_(classes), side_(image_side), params_(std::move(params)) {
    const ModelSpec spec = make_spec(arch, classes, image_side);
    for (const auto& def : spec.defs) {
        if (!params_.has(def.name))
            fail(ErrorCode::PreconditionViolation, "classifier: parameter store missing " + def.name);
        if (params_.at(def.name).shape() != def.shape)
            fail(ErrorCode::ShapeMismatch, "classifier: bad shape for parameter " + def.name);
    }
}

template <class S>
ModelSpec Classifier<S>::make_spec(Arch arch, int64_t classes, int64_t image_side) {
    if (classes < 2) fail(ErrorCode::ConfigError, "classifier: classes must be >= 2");
    const Geometry g = geom_for(arch, image_side);
    ModelSpec spec;
    spec.arch = arch_name(arch);
    if (arch == Arch::LenetSmall) {
        nn::add_conv(spec, "c1", 1, 6, 5);
        nn::add_conv(spec, "c2", 6, 16, 5);
        nn::add_dense(spec, "f1", g.flat, 120);
        nn::add_dense(spec, "f2", 120, 84);
        nn::add_dense(spec, "f3", 84, classes);
    } else {
        nn::add_conv(spec, "c1", 1, 32, 5);
        nn::add_conv(spec, "c2", 32, 64, 5);
        nn::add_dense(spec, "f1", g.flat, 1024);
        nn::add_dense(spec, "f2", 1024, classes);
    }
    return spec;
}

template <class S>
Classifier<S> Classifier<S>::init(Arch arch, int64_t classes, int64_t image_side, uint64_t seed) {
    return Classifier(arch, classes, image_side, init_params<S>(make_spec(arch, classes, image_side), seed));
}

template <class S>
ag::Var<S> Classifier<S>::logits(const ag::Var<S>& x) const {
    if (x.requires_grad()) ++grad_queries_;
    const int64_t side = side_;
    ag::Var<S> xi = x;
    if (x.shape().size() == 2 && x.shape()[1] == side * side) {
        xi = ag::reshape(x, {x.shape()[0], 1, side, side});
    } else if (!(x.shape().size() == 4 && x.shape()[1] == 1 && x.shape()[2] == side &&
                 x.shape()[3] == side)) {
        fail(ErrorCode::ShapeMismatch, "classifier: expected [N,1,side,side] or [N,side*side]");
    }
    const int64_t n = xi.shape()[0];
    const Geometry g = geom_for(arch_, side);
    auto h1 = ag::maxpool2(ag::relu(nn::conv(params_, "c1", xi, g.c1)));
    auto h2 = ag::maxpool2(ag::relu(nn::conv(params_, "c2", h1, g.c2)));
    auto flat = ag::reshape(h2, {n, g.flat});
    if (arch_ == Arch::LenetSmall) {
        auto f1 = ag::relu(nn::dense(params_, "f1", flat));
        auto f2 = ag::relu(nn::dense(params_, "f2", f1));
        return nn::dense(params_, "f3", f2);
    }
    auto f1 = ag::relu(nn::dense(params_, "f1", flat));
    return nn::dense(params_, "f2", f1);
}

template <class S>
Tensor<S> Classifier<S>::predict_probs(const Tensor<S>& x) const {
    ScopedNoGrad<S> guard(const_cast<ParamStore<S>&>(params_));
    auto out = logits(ag::Var<S>::constant(x));
    return ops::softmax_rows<S>(out.value());
}

template <class S>
std::vector<int32_t> Classifier<S>::predict(const Tensor<S>& x) const {
    const Tensor<S> p = predict_probs(x);
    const int64_t n = p.dim(0), k = p.dim(1);
    std::vector<int32_t> out(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (p[i * k + j] > p[i * k + best]) best = j;
        out[size_t(i)] = int32_t(best);
    }
    return out;
}

template <class S>
ClassifyOut<S> classify(const Classifier<S>& model, const ag::Var<S>& x) {
    auto lg = model.logits(x);
    return {lg, ag::softmax_rows(lg)};
}

template <class S>
ag::Var<S> smoothed_ce_loss(const ag::Var<S>& logits, const std::vector<int32_t>& labels,
                            double eps_ls) {
    if (eps_ls < 0 || eps_ls >= 1)
        fail(ErrorCode::PreconditionViolation, "smoothed_ce_loss: eps_ls must be in [0,1)");
    const int64_t n = logits.shape()[0], k = logits.shape()[1];
    if (int64_t(labels.size()) != n)
        fail(ErrorCode::ShapeMismatch, "smoothed_ce_loss: label count mismatch");
    Tensor<S> target({n, k}, S(eps_ls / double(k)));
    for (int64_t i = 0; i < n; ++i) {
        const int32_t y = labels[size_t(i)];
        if (y < 0 || y >= k)
            fail(ErrorCode::InvalidClass, "smoothed_ce_loss: label out of range");
        target[i * k + y] += S(1.0 - eps_ls);
    }
    return ag::mean_all(ag::cross_entropy_rows(logits, target));
}

template <class S>
Tensor<S> pgd_attack(Classifier<S>& model, const Tensor<S>& x, const std::vector<int32_t>& labels,
                     const PgdConfig& cfg, Rng& rng) {
    cfg.validate();
    check_pixel_box(x, "pgd_attack");
    const S eps = S(cfg.epsilon);

    Tensor<S> adv = x;
    if (cfg.epsilon > 0 && (cfg.steps > 0 || cfg.random_start)) {
        if (cfg.random_start)
            for (int64_t i = 0; i < adv.size(); ++i)
                adv[i] = std::clamp(x[i] + S(rng.uniform(-cfg.epsilon, cfg.epsilon)), S(0), S(1));

        const S step = S(cfg.effective_step());
        ScopedNoGrad<S> guard(model.params());
        for (int64_t s = 0; s < cfg.steps; ++s) {
            auto xv = ag::Var<S>::leaf(adv, /*requires_grad=*/true);
            auto loss = smoothed_ce_loss<S>(model.logits(xv), labels, 0.0);
            ag::backward(loss);
            const auto& g = xv.grad();
            for (int64_t i = 0; i < adv.size(); ++i) {
                const S dir = g[i] > S(0) ? S(1) : (g[i] < S(0) ? S(-1) : S(0));
                const S moved = adv[i] + step * dir;
                adv[i] = std::clamp(std::clamp(moved, x[i] - eps, x[i] + eps), S(0), S(1));
            }
        }
    }

    for (int64_t i = 0; i < adv.size(); ++i) {
        if (!(adv[i] >= S(0) && adv[i] <= S(1)))
            fail(ErrorCode::InvariantViolation, "pgd_attack: output escaped the pixel box");
        if (std::abs(double(adv[i] - x[i])) > cfg.epsilon + 1e-6)
            fail(ErrorCode::InvariantViolation, "pgd_attack: output escaped the epsilon ball");
    }
    return adv;
}

namespace {

double batch_accuracy(const std::vector<int32_t>& pred, const std::vector<int32_t>& truth) {
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return pred.empty() ? 0.0 : double(hit) / double(pred.size());
}

}  // namespace

ClassifierTrainResult train_classifier(const LabeledImageSet& train, const LabeledImageSet& val,
                                       const ClassifierConfig& cfg, std::ostream* jsonl) {
    cfg.validate();
    if (train.split == Split::Test || val.split == Split::Test)
        fail(ErrorCode::PreconditionViolation, "classifier: refusing to train against the test split");
    if (train.count() == 0) fail(ErrorCode::EmptyInput, "classifier: empty training set");
    if (train.height() != cfg.image_side || train.width() != cfg.image_side)
        fail(ErrorCode::ShapeMismatch, "classifier: dataset image size does not match config");

    Classifier<float> model =
        Classifier<float>::init(cfg.arch, cfg.classes, cfg.image_side, cfg.seed);
    AdamState<float> adam;
    adam.lr = cfg.lr;
    Rng pgd_rng(hash_seed(cfg.seed, "clf:pgd"));
    BatchIter iter(train, cfg.batch_size, hash_seed(cfg.seed, "clf:epoch:1"), true);

    std::vector<ClassifierEpochLog> log;
    int64_t gstep = 0;
    Tensor<float> images;
    std::vector<int32_t> labels;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (epoch > 1) iter.reset(hash_seed(cfg.seed, "clf:epoch:" + std::to_string(epoch)), true);
        double loss_sum = 0;
        int64_t hit = 0, seen = 0;
        while (iter.next(images, labels)) {
            const int64_t b = images.dim(0);
            Tensor<float> inputs = images;
            if (cfg.adversarial)
                inputs = pgd_attack<float>(model, images, labels, cfg.train_attack, pgd_rng);

            auto xv = ag::Var<float>::constant(inputs);
            auto lg = model.logits(xv);
            auto loss = smoothed_ce_loss<float>(lg, labels, cfg.label_smoothing);
            if (!loss.value().all_finite())
                fail(ErrorCode::NonFiniteLoss,
                     "classifier: non-finite loss at step " + std::to_string(gstep));
            model.params().zero_grads();
            ag::backward(loss);
            adam_step(model.params(), adam);

            loss_sum += double(loss.value()[0]) * double(b);
            const auto& lv = lg.value();
            const int64_t k = cfg.classes;
            for (int64_t i = 0; i < b; ++i) {
                int64_t best = 0;
                for (int64_t j = 1; j < k; ++j)
                    if (lv[i * k + j] > lv[i * k + best]) best = j;
                hit += int32_t(best) == labels[size_t(i)];
            }
            seen += b;
            ++gstep;
        }

        ClassifierEpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = seen ? loss_sum / double(seen) : 0.0;
        entry.train_acc = seen ? double(hit) / double(seen) : 0.0;
        entry.val_acc = eval_accuracy(model, val, std::nullopt).standard_acc;
        log.push_back(entry);
        if (jsonl) {
            (*jsonl) << "{\"event\":\"clf_epoch\",\"arch\":\"" << arch_name(cfg.arch)
                     << "\",\"epoch\":" << entry.epoch << ",\"train_loss\":" << entry.train_loss
                     << ",\"train_acc\":" << entry.train_acc << ",\"val_acc\":" << entry.val_acc
                     << "}\n";
            jsonl->flush();
        }
    }
    return {std::move(model), std::move(log)};
}

EvalResult eval_accuracy(Classifier<float>& model, const LabeledImageSet& set,
                         const std::optional<PgdConfig>& attack, int64_t batch_size,
                         uint64_t seed) {
    if (set.count() == 0) fail(ErrorCode::EmptyInput, "eval_accuracy: empty evaluation set");
    EvalResult out;
    Tensor<float> images;
    std::vector<int32_t> labels;

    BatchIter iter(set, batch_size, 0, /*shuffle=*/false);
    int64_t hit = 0, seen = 0;
    while (iter.next(images, labels)) {
        const auto pred = model.predict(images);
        for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
        seen += int64_t(pred.size());
    }
    out.standard_acc = double(hit) / double(seen);

    if (attack.has_value()) {
        Rng rng(hash_seed(seed, "eval:pgd"));
        iter.reset(0, false);
        int64_t rhit = 0, rseen = 0;
        while (iter.next(images, labels)) {
            const Tensor<float> adv = pgd_attack<float>(model, images, labels, *attack, rng);
            const auto pred = model.predict(adv);
            for (size_t i = 0; i < pred.size(); ++i) rhit += pred[i] == labels[i];
            rseen += int64_t(pred.size());
        }
        out.robust_acc = double(rhit) / double(rseen);
    }
    return out;
}

void save_classifier_checkpoint(const Classifier<float>& model, const std::string& path) {
    MetaMap meta{{"kind", "classifier"},
                 {"arch", arch_name(model.arch())},
                 {"classes", std::to_string(model.classes())},
                 {"image_side", std::to_string(model.image_side())}};
    save_checkpoint(model.params(), meta, path);
}

Classifier<float> load_classifier_checkpoint(const std::string& path) {
    auto [ps, meta] = load_checkpoint<float>(path);
    auto get = [&meta, &path](const char* key) -> std::string {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        fail(ErrorCode::CorruptFile, "classifier checkpoint " + path + " missing metadata key " + key);
    };
    if (get("kind") != "classifier")
        fail(ErrorCode::CorruptFile, "classifier checkpoint " + path + " has the wrong kind");
    return Classifier<float>(arch_from_name(get("arch")), std::stoll(get("classes")),
                             std::stoll(get("image_side")), std::move(ps));
}

BlackBoxClassifier::BlackBoxClassifier(Classifier<float> model) : model_(std::move(model)) {
    baseline_grad_queries_ = model_.grad_query_count();
}

Tensor<float> BlackBoxClassifier::predict_probs(const Tensor<float>& x) {
    ++prediction_queries_;
    return model_.predict_probs(x);
}

std::vector<int32_t> BlackBoxClassifier::predict(const Tensor<float>& x) {
    ++prediction_queries_;
    return model_.predict(x);
}

#define LSP_INSTANTIATE_CLF(S)                                                             \
    template class Classifier<S>;                                                          \
    template ClassifyOut<S> classify<S>(const Classifier<S>&, const ag::Var<S>&);          \
    template ag::Var<S> smoothed_ce_loss<S>(const ag::Var<S>&, const std::vector<int32_t>&, \
                                            double);                                      \
    template Tensor<S> pgd_attack<S>(Classifier<S>&, const Tensor<S>&,                    \
                                     const std::vector<int32_t>&, const PgdConfig&, Rng&);

LSP_INSTANTIATE_CLF(float)
LSP_INSTANTIATE_CLF(double)
#undef LSP_INSTANTIATE_CLF

}  // namespace lsp
