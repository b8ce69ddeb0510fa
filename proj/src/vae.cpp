#include "lsp/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

namespace lsp {

void VaeConfig::validate() const {
    if (m < 1) fail(ErrorCode::ConfigError, "vae: continuous dimension m must be >= 1");
    if (n < 2) fail(ErrorCode::ConfigError, "vae: categorical size n must be >= 2");
    if (beta < 0) fail(ErrorCode::ConfigError, "vae: beta must be >= 0");
    if (gumbel_tau <= 0) fail(ErrorCode::ConfigError, "vae: gumbel_tau must be > 0");
    if (epochs < 0) fail(ErrorCode::ConfigError, "vae: epochs must be >= 0");
    if (batch_size < 1) fail(ErrorCode::ConfigError, "vae: batch_size must be >= 1");
    if (lr <= 0) fail(ErrorCode::ConfigError, "vae: lr must be > 0");
    if (image_side < 4 || image_side % 4 != 0)
        fail(ErrorCode::ConfigError,
             "vae: image_side must be a positive multiple of 4, got " + std::to_string(image_side));
    if (capacity_annealing && (cap_gamma <= 0 || cap_steps < 1))
        fail(ErrorCode::ConfigError, "vae: capacity annealing needs cap_gamma > 0 and cap_steps >= 1");
}

namespace {

// Two stride-2 4x4 convolutions halve each side twice.
int64_t quarter_side(const VaeConfig& cfg) { return cfg.image_side / 4; }
int64_t feat_dim(const VaeConfig& cfg) { return 64 * quarter_side(cfg) * quarter_side(cfg); }

ops::Conv2dGeom enc_geom1(const VaeConfig& cfg) {
    ops::Conv2dGeom g;
    g.in_c = 1, g.in_h = cfg.image_side, g.in_w = cfg.image_side;
    g.out_c = 32, g.kh = 4, g.kw = 4, g.stride = 2, g.pad = 1;
    return g;
}

ops::Conv2dGeom enc_geom2(const VaeConfig& cfg) {
    ops::Conv2dGeom g;
    g.in_c = 32, g.in_h = cfg.image_side / 2, g.in_w = cfg.image_side / 2;
    g.out_c = 64, g.kh = 4, g.kw = 4, g.stride = 2, g.pad = 1;
    return g;
}

ops::ConvT2dGeom dec_geom1(const VaeConfig& cfg) {
    ops::ConvT2dGeom g;
    g.in_c = 64, g.in_h = quarter_side(cfg), g.in_w = quarter_side(cfg);
    g.out_c = 32, g.kh = 4, g.kw = 4, g.stride = 2, g.pad = 1;
    return g;
}

ops::ConvT2dGeom dec_geom2(const VaeConfig& cfg) {
    ops::ConvT2dGeom g;
    g.in_c = 32, g.in_h = cfg.image_side / 2, g.in_w = cfg.image_side / 2;
    g.out_c = 1, g.kh = 4, g.kw = 4, g.stride = 2, g.pad = 1;
    return g;
}

}  // namespace

template <class S>
JointVae<S>::JointVae(VaeConfig cfg, ParamStore<S> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    const ModelSpec spec = make_spec(cfg_);
    for (const auto& def : spec.defs) {
        if (!params_.has(def.name))
            fail(ErrorCode::PreconditionViolation, "vae: parameter store missing " + def.name);
        if (params_.at(def.name).shape() != def.shape)
            fail(ErrorCode::ShapeMismatch, "vae: bad shape for parameter " + def.name);
    }
}

template <class S>
ModelSpec JointVae<S>::make_spec(const VaeConfig& cfg) {
    cfg.validate();
    ModelSpec spec;
    spec.arch = "jointvae-m" + std::to_string(cfg.m) + "-n" + std::to_string(cfg.n);
    nn::add_conv(spec, "enc.c1", 1, 32, 4);
    nn::add_conv(spec, "enc.c2", 32, 64, 4);
    nn::add_dense(spec, "enc.fc", feat_dim(cfg), 256);
    nn::add_dense(spec, "enc.mu", 256, cfg.m);
    nn::add_dense(spec, "enc.ls", 256, cfg.m);
    nn::add_dense(spec, "enc.cl", 256, cfg.n);
    nn::add_dense(spec, "dec.fc1", cfg.latent_dim(), 256);
    nn::add_dense(spec, "dec.fc2", 256, feat_dim(cfg));
    nn::add_convt(spec, "dec.t1", 64, 32, 4);
    nn::add_convt(spec, "dec.t2", 32, 1, 4);
    return spec;
}

template <class S>
JointVae<S> JointVae<S>::init(const VaeConfig& cfg, uint64_t seed) {
    return JointVae(cfg, init_params<S>(make_spec(cfg), seed));
}

template <class S>
Posterior<S> JointVae<S>::encode(const ag::Var<S>& x) const {
    const int64_t side = cfg_.image_side;
    ag::Var<S> xi = x;
    if (x.shape().size() == 2 && x.shape()[1] == cfg_.pixels()) {
        xi = ag::reshape(x, {x.shape()[0], 1, side, side});
    } else if (!(x.shape().size() == 4 && x.shape()[1] == 1 && x.shape()[2] == side &&
                 x.shape()[3] == side)) {
        fail(ErrorCode::ShapeMismatch, "vae encode: expected [N,1,side,side] or [N,side*side]");
    }
    const int64_t n = xi.shape()[0];
    auto h1 = ag::relu(nn::conv(params_, "enc.c1", xi, enc_geom1(cfg_)));
    auto h2 = ag::relu(nn::conv(params_, "enc.c2", h1, enc_geom2(cfg_)));
    auto h3 = ag::relu(nn::dense(params_, "enc.fc", ag::reshape(h2, {n, feat_dim(cfg_)})));
    return {nn::dense(params_, "enc.mu", h3), nn::dense(params_, "enc.ls", h3),
            nn::dense(params_, "enc.cl", h3)};
}

template <class S>
LatentCode<S> JointVae<S>::sample_latent(const Posterior<S>& p, const NoiseTape<S>& tape) const {
    if (tape.eps.shape() != p.mu_z.shape() || tape.gumbel.shape() != p.c_logits.shape())
        fail(ErrorCode::ShapeMismatch, "vae sample_latent: noise tape shape mismatch");
    auto z = ag::add(p.mu_z, ag::mul(ag::exp_(p.log_sigma_z), ag::Var<S>::constant(tape.eps)));
    auto c = ag::softmax_rows(ag::add(p.c_logits, ag::Var<S>::constant(tape.gumbel)),
                              S(1.0 / cfg_.gumbel_tau));
    return {z, c};
}

template <class S>
ag::Var<S> JointVae<S>::decode(const ag::Var<S>& z, const ag::Var<S>& c) const {
    if (z.shape().size() != 2 || z.shape()[1] != cfg_.m)
        fail(ErrorCode::ShapeMismatch, "vae decode: z must be [N,m]");
    if (c.shape().size() != 2 || c.shape()[1] != cfg_.n || c.shape()[0] != z.shape()[0])
        fail(ErrorCode::ShapeMismatch, "vae decode: c must be [N,n] with matching N");
    const int64_t n = z.shape()[0];
    const int64_t q = quarter_side(cfg_);
    auto h1 = ag::relu(nn::dense(params_, "dec.fc1", ag::concat_cols<S>({z, c})));
    auto h2 = ag::relu(nn::dense(params_, "dec.fc2", h1));
    auto u1 = ag::relu(nn::convt(params_, "dec.t1", ag::reshape(h2, {n, 64, q, q}), dec_geom1(cfg_)));
    auto u2 = ag::sigmoid(nn::convt(params_, "dec.t2", u1, dec_geom2(cfg_)));
    return ag::reshape(u2, {n, cfg_.pixels()});
}

template <class S>
ElboTerms<S> JointVae<S>::elbo_loss(const Tensor<S>& x_target, const Posterior<S>& p,
                                    const ag::Var<S>& reconstruction) const {
    Tensor<S> tgt = x_target;
    if (x_target.shape().size() != 2) tgt = x_target.reshaped({x_target.dim(0), cfg_.pixels()});
    if (tgt.shape() != reconstruction.shape())
        fail(ErrorCode::ShapeMismatch, "vae elbo: target/reconstruction shape mismatch");
    auto recon_rows = ag::bce_rows<S>(reconstruction, tgt, nullptr, S(1e-7));
    auto kl_rows = ag::add(ag::gaussian_kl_rows(p.mu_z, p.log_sigma_z),
                           ag::categorical_kl_uniform_rows(ag::softmax_rows(p.c_logits)));
    auto recon = ag::mean_all(recon_rows);
    auto kl = ag::mean_all(kl_rows);
    auto total = ag::add(recon, ag::mul_scalar(kl, S(cfg_.beta)));
    return {total, recon, kl};
}

template <class S>
NoiseTape<S> draw_noise_tape(Rng& rng, int64_t batch, const VaeConfig& cfg) {
    NoiseTape<S> tape{Tensor<S>({batch, cfg.m}), Tensor<S>({batch, cfg.n})};
    rng.fill_normal(tape.eps);
    rng.fill_gumbel(tape.gumbel);
    return tape;
}

template <class S>
NoiseTape<S> zero_noise_tape(int64_t batch, const VaeConfig& cfg) {
    return {Tensor<S>({batch, cfg.m}, S(0)), Tensor<S>({batch, cfg.n}, S(0))};
}

namespace {

struct EpochStats {
    double total = 0, recon = 0, kl = 0;
    int64_t images = 0;

    void accumulate(const ElboTerms<float>& t, int64_t batch) {
        total += double(t.total.value()[0]) * double(batch);
        recon += double(t.recon.value()[0]) * double(batch);
        kl += double(t.kl.value()[0]) * double(batch);
        images += batch;
    }
    double mean_total() const { return images ? total / double(images) : 0.0; }
    double mean_recon() const { return images ? recon / double(images) : 0.0; }
    double mean_kl() const { return images ? kl / double(images) : 0.0; }
};

// Deterministic full-pass evaluation with a zero noise tape.
EpochStats eval_elbo(const JointVae<float>& model, const LabeledImageSet& set,
                     const VaeConfig& cfg) {
    EpochStats stats;
    BatchIter iter(set, cfg.batch_size, 0, /*shuffle=*/false);
    Tensor<float> images;
    std::vector<int32_t> labels;
    while (iter.next(images, labels)) {
        const int64_t b = images.dim(0);
        auto x = ag::Var<float>::constant(images);
        auto post = model.encode(x);
        auto lat = model.sample_latent(post, zero_noise_tape<float>(b, cfg));
        auto rec = model.decode(lat.z, lat.c);
        stats.accumulate(model.elbo_loss(images.reshaped({b, cfg.pixels()}), post, rec), b);
    }
    return stats;
}

}  // namespace

VaeTrainResult train_vae(const LabeledImageSet& train, const LabeledImageSet& val,
                         const VaeConfig& cfg, std::ostream* jsonl) {
    cfg.validate();
    if (train.split == Split::Test || val.split == Split::Test)
        fail(ErrorCode::PreconditionViolation, "vae: refusing to train against the test split");
    if (train.count() == 0) fail(ErrorCode::EmptyInput, "vae: empty training set");
    if (train.height() != cfg.image_side || train.width() != cfg.image_side)
        fail(ErrorCode::ShapeMismatch, "vae: dataset image size does not match config");

    JointVae<float> model = JointVae<float>::init(cfg, cfg.seed);
    AdamState<float> adam;
    adam.lr = cfg.lr;
    Rng noise_rng(hash_seed(cfg.seed, "vae:noise"));
    BatchIter iter(train, cfg.batch_size, hash_seed(cfg.seed, "vae:epoch:1"), true);

    std::vector<VaeEpochLog> log;
    int64_t gstep = 0;
    Tensor<float> images;
    std::vector<int32_t> labels;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (epoch > 1) iter.reset(hash_seed(cfg.seed, "vae:epoch:" + std::to_string(epoch)), true);
        EpochStats stats;
        while (iter.next(images, labels)) {
            const int64_t b = images.dim(0);
            auto x = ag::Var<float>::constant(images);
            auto post = model.encode(x);
            auto lat = model.sample_latent(post, draw_noise_tape<float>(noise_rng, b, cfg));
            auto rec = model.decode(lat.z, lat.c);
            auto terms = model.elbo_loss(images.reshaped({b, cfg.pixels()}), post, rec);

            ag::Var<float> loss = terms.total;
            if (cfg.capacity_annealing) {
                const double ramp = std::min(1.0, double(gstep) / double(cfg.cap_steps));
                auto klz = ag::mean_all(ag::gaussian_kl_rows(post.mu_z, post.log_sigma_z));
                auto klc = ag::mean_all(
                    ag::categorical_kl_uniform_rows(ag::softmax_rows(post.c_logits)));
                auto cz = ag::Var<float>::constant(Tensor<float>({1}, float(ramp * cfg.cap_z_max)));
                auto cc = ag::Var<float>::constant(Tensor<float>({1}, float(ramp * cfg.cap_c_max)));
                auto pressure = ag::add(ag::softabs(ag::sub(klz, cz), 1e-6f),
                                        ag::softabs(ag::sub(klc, cc), 1e-6f));
                loss = ag::add(terms.recon, ag::mul_scalar(pressure, float(cfg.cap_gamma)));
            }
            if (!loss.value().all_finite())
                fail(ErrorCode::NonFiniteLoss,
                     "vae: non-finite loss at step " + std::to_string(gstep));
            model.params().zero_grads();
            ag::backward(loss);
            adam_step(model.params(), adam);
            stats.accumulate(terms, b);
            ++gstep;
        }

        const EpochStats vstats = eval_elbo(model, val, cfg);
        VaeEpochLog entry;
        entry.epoch = epoch;
        entry.train_total = stats.mean_total();
        entry.train_recon = stats.mean_recon();
        entry.train_kl = stats.mean_kl();
        entry.val_total = vstats.mean_total();
        entry.val_recon = vstats.mean_recon();
        entry.val_kl = vstats.mean_kl();
        log.push_back(entry);
        if (jsonl) {
            (*jsonl) << "{\"event\":\"vae_epoch\",\"epoch\":" << entry.epoch
                     << ",\"train_total\":" << entry.train_total
                     << ",\"train_recon\":" << entry.train_recon
                     << ",\"train_kl\":" << entry.train_kl << ",\"val_total\":" << entry.val_total
                     << ",\"val_recon\":" << entry.val_recon << ",\"val_kl\":" << entry.val_kl
                     << "}\n";
            jsonl->flush();
        }
    }
    return {std::move(model), std::move(log)};
}

void save_vae_checkpoint(const JointVae<float>& model, const std::string& path) {
    const VaeConfig& c = model.config();
    char buf[64];
    auto g17 = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    MetaMap meta{{"kind", "jointvae"},
                 {"m", std::to_string(c.m)},
                 {"n", std::to_string(c.n)},
                 {"beta", g17(c.beta)},
                 {"gumbel_tau", g17(c.gumbel_tau)},
                 {"image_side", std::to_string(c.image_side)}};
    save_checkpoint(model.params(), meta, path);
}

JointVae<float> load_vae_checkpoint(const std::string& path) {
    auto [ps, meta] = load_checkpoint<float>(path);
    auto get = [&meta, &path](const char* key) -> std::string {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        fail(ErrorCode::CorruptFile, "autoencoder checkpoint " + path + " missing metadata key " + key);
    };
    if (get("kind") != "jointvae")
        fail(ErrorCode::CorruptFile, "autoencoder checkpoint " + path + " has the wrong kind");
    VaeConfig c;
    c.m = std::stoll(get("m"));
    c.n = std::stoll(get("n"));
    c.beta = std::stod(get("beta"));
    c.gumbel_tau = std::stod(get("gumbel_tau"));
    c.image_side = std::stoll(get("image_side"));
    return JointVae<float>(c, std::move(ps));
}

#define LSP_INSTANTIATE_VAE(S)                                                          \
    template struct Posterior<S>;                                                       \
    template struct LatentCode<S>;                                                      \
    template class JointVae<S>;                                                         \
    template NoiseTape<S> draw_noise_tape<S>(Rng&, int64_t, const VaeConfig&);          \
    template NoiseTape<S> zero_noise_tape<S>(int64_t, const VaeConfig&);

LSP_INSTANTIATE_VAE(float)
LSP_INSTANTIATE_VAE(double)
#undef LSP_INSTANTIATE_VAE

}  // namespace lsp
