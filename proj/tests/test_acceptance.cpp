// Acceptance gate: nine end-to-end criteria, one printed verdict line each.
//
// The full-scale pipeline artifacts (trained models, evaluation runs) are
// cached under LSP_ACCEPT_DIR (default: ./acceptance_cache). A cached stage is
// reused only when its manifest matches the expected subcommand, seed, and
// fully resolved config, every recorded output digest still verifies, and
// every recorded input digest still matches the file on disk — so editing a
// hyperparameter here, or retraining an upstream model, invalidates exactly
// the stale stages. A cold cache retrains everything (the robust classifier
// dominates; budget about two CPU-hours).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lsp/attack.hpp"
#include "lsp/cli.hpp"
#include "lsp/dataio.hpp"
#include "lsp/latentstats.hpp"
#include "lsp/metrics.hpp"
#include "lsp/tensor_ops.hpp"
#include "lsp/vae.hpp"

#include "testutil.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace lsp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ----------------------------------------------------------- verdict lines --

fs::path cache_root() {
    if (const char* env = std::getenv("LSP_ACCEPT_DIR")) return env;
    return "acceptance_cache";
}

void verdict(int idx, bool ok, const std::string& label, const std::string& detail) {
    std::ostringstream line;
    line << "ACCEPTANCE " << idx << " " << (ok ? "pass" : "FAIL") << " - " << label;
    if (!detail.empty()) line << " (" << detail << ")";
    std::printf("%s\n", line.str().c_str());
    std::fflush(stdout);
    static std::ofstream report = [] {
        fs::create_directories(cache_root());
        return std::ofstream(cache_root() / "acceptance-report.txt", std::ios::trunc);
    }();
    report << line.str() << "\n";
    report.flush();
    CHECK_MESSAGE(ok, "criterion ", idx, ": ", label, " — ", detail);
}

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * fraction);
    return buf;
}

std::string secs(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.0f s", s);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE_MESSAGE(f.good(), "cannot open ", p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// --------------------------------------------------- cached pipeline stages --

struct Stage {
    std::string tag;
    std::string sub;
    uint64_t seed;
    std::vector<std::string> overrides;
};

std::vector<Stage> stage_plan(const fs::path& root) {
    auto art = [&](const char* tag, const char* name) {
        return (root / tag / name).string();
    };
    const std::vector<std::string> eval_overrides{
        "vae-checkpoint=" + art("vae", "vae.ckpt"),
        "inference-checkpoint=" + art("inference", "inference.ckpt"),
        "robust-checkpoint=" + art("robust", "robust.ckpt"),
        "attack-checkpoint=" + art("attack", "attack.ckpt"),
        "stats=" + art("stats", "stats.json"),
        "lambda-org=0",
        "lambda-noised=1",
        "count=1000",
        "accuracy-count=10000"};
    return {
        {"vae", "train-vae", 7, {"epochs=30", "batch-size=128"}},
        {"inference", "train-inference", 7, {"epochs=5", "batch-size=128"}},
        {"robust", "train-robust", 7, {"epochs=8"}},
        {"stats", "fit-stats", 7, {"vae-checkpoint=" + art("vae", "vae.ckpt")}},
        {"attack",
         "train-attack",
         7,
         {"vae-checkpoint=" + art("vae", "vae.ckpt"),
          "inference-checkpoint=" + art("inference", "inference.ckpt"),
          "stats=" + art("stats", "stats.json"), "lambda-org=0", "lambda-noised=1",
          "epochs=12", "batch-size=128"}},
        {"eval", "evaluate", 7, eval_overrides},
        {"eval-rerun", "evaluate", 7, eval_overrides},
        {"pgd",
         "baseline-pgd",
         7,
         {"robust-checkpoint=" + art("robust", "robust.ckpt"),
          "standard-checkpoint=" + art("inference", "inference.ckpt"), "count=1000"}},
        {"ablate",
         "ablate",
         7,
         {"vae-checkpoint=" + art("vae", "vae.ckpt"),
          "inference-checkpoint=" + art("inference", "inference.ckpt"),
          "robust-checkpoint=" + art("robust", "robust.ckpt"),
          "stats=" + art("stats", "stats.json"), "epochs=8", "eval-count=1000"}},
    };
}

bool stage_fresh(const Stage& s, const fs::path& dir,
                 const std::map<std::string, std::string>& expected) {
    try {
        const cli::RunManifest m = cli::read_manifest(dir.string());
        if (m.subcommand != s.sub || m.seed != s.seed || m.config != expected) return false;
        cli::verify_manifest_digests(m);
        for (const auto& in : m.inputs)
            if (cli::file_crc32(in.path) != in.crc32) return false;
        return true;
    } catch (const Error&) {
        return false;
    }
}

struct World {
    fs::path root = fs::absolute(cache_root());
    std::string data = testutil::data_root();
    bool ok = true;
    std::string failure;
    std::map<std::string, cli::RunManifest> manifest;
    std::map<std::string, json> summary;  // summary.json, or table.json for ablate

    World() {
        fs::create_directories(root);
        for (const Stage& s : stage_plan(root)) {
            const fs::path dir = root / s.tag;
            const auto expected = cli::resolve_section({}, s.sub, s.overrides);
            if (stage_fresh(s, dir, expected)) {
                std::printf("acceptance stage %-10s reusing cached run\n", s.tag.c_str());
            } else {
                std::printf("acceptance stage %-10s running %s ...\n", s.tag.c_str(),
                            s.sub.c_str());
                std::fflush(stdout);
                std::error_code ec;
                fs::remove_all(dir, ec);
                const cli::Invocation inv{s.sub, "", s.seed, data, dir.string(), s.overrides};
                if (cli::run(inv) != 0) {
                    ok = false;
                    failure = "stage '" + s.tag + "' failed";
                    if (fs::exists(dir / "error.json"))
                        failure += ": " + read_json(dir / "error.json").dump();
                    break;
                }
            }
            manifest[s.tag] = cli::read_manifest(dir.string());
            const fs::path sj = dir / "summary.json";
            const fs::path tj = dir / "table.json";
            if (fs::exists(sj)) summary[s.tag] = read_json(sj);
            else if (fs::exists(tj)) summary[s.tag] = read_json(tj);
        }
    }
};

const World& world() {
    static const World w;
    return w;
}

// Prints a FAIL verdict and returns false when the pipeline never came up, so
// every criterion still emits its line.
bool bootstrap_ok(int idx, const std::string& label) {
    if (world().ok) return true;
    verdict(idx, false, label, world().failure);
    return false;
}

// ------------------------------------------- property-suite helpers (crit 7) --

// Small self-contained shapes for the numeric properties.
constexpr int64_t kSide = 12;
constexpr int64_t kClasses = 4;
constexpr int64_t kM = 3;
constexpr int64_t kN = 4;
constexpr int64_t kBudget = 2000;

VaeConfig tiny_vae_cfg() {
    VaeConfig cfg;
    cfg.m = kM;
    cfg.n = kN;
    cfg.image_side = kSide;
    return cfg;
}

ClassLatentStats handmade_stats() {
    ClassLatentStats st;
    st.classes = kClasses;
    st.m = kM;
    st.n = kN;
    st.mu_z = Tensor<float>({kClasses, kM});
    st.sigma_z = Tensor<float>({kClasses, kM}, 0.5f);
    st.mu_c = Tensor<float>({kClasses, kN}, 1.0f / float(kN));
    st.sigma_c = Tensor<float>({kClasses, kN}, 0.1f);
    st.counts.assign(size_t(kClasses), 7);
    Rng rng(17);
    for (int64_t i = 0; i < st.mu_z.size(); ++i) st.mu_z[i] = float(rng.uniform(-1.0, 1.0));
    st.validate();
    return st;
}

double fd_elbo() {
    auto cfg = tiny_vae_cfg();
    auto store = init_params<double>(JointVae<double>::make_spec(cfg), 29);
    JointVae<double> model(cfg, store);

    Rng rng(31);
    Tensor<double> x({4, 1, kSide, kSide});
    rng.fill_uniform(x, 0.05, 0.95);
    Rng noise(77);
    const auto tape = draw_noise_tape<double>(noise, 4, cfg);

    LossFn<double> loss_fn = [&](ParamStore<double>& ps, bool want_grad) {
        auto post = model.encode(ag::Var<double>::constant(x));
        auto lat = model.sample_latent(post, tape);
        auto rec = model.decode(lat.z, lat.c);
        auto terms = model.elbo_loss(x.reshaped({4, kSide * kSide}), post, rec);
        if (want_grad) {
            ps.zero_grads();
            ag::backward(terms.total);
        }
        return double(terms.total.value()[0]);
    };
    Rng probe(13);
    return finite_diff_check<double>(loss_fn, store, 48, 1e-4, probe);
}

double fd_composite() {
    auto vae = JointVae<double>::init(tiny_vae_cfg(), 11);
    auto clf = Classifier<double>::init(Arch::LenetSmall, kClasses, kSide, 5);
    const auto stats = handmade_stats();

    Rng rng(41);
    Tensor<double> x({4, kSide * kSide});
    rng.fill_uniform(x, 0.05, 0.95);

    ScopedNoGrad<double> freeze_vae(vae.params());
    ScopedNoGrad<double> freeze_clf(clf.params());

    auto post = vae.encode(ag::Var<double>::constant(x));
    const Tensor<double> z_t = post.mu_z.value();
    const Tensor<double> c_t = ops::softmax_rows(post.c_logits.value());
    const Tensor<double> probs = clf.predict_probs(x);
    std::vector<int32_t> targets(4, 0);
    Tensor<double> twohot({4, kClasses});
    for (int64_t i = 0; i < 4; ++i) {
        std::vector<float> row(static_cast<size_t>(kClasses));
        for (int64_t j = 0; j < kClasses; ++j) row[size_t(j)] = float(probs.at2(i, j));
        const auto [t1, t2] = select_target(row);
        targets[size_t(i)] = t2;
        twohot.at2(i, t1) = 1.0;
        twohot.at2(i, t2) = 1.0;
    }

    AttackConfig cfg;
    cfg.param_budget = kBudget;
    ParamStore<double> store =
        init_params<double>(AttackNetworks<double>::make_spec(kM, kN, kClasses, kBudget), 2024);
    AttackNetworks<double> nets(kM, kN, kClasses, kBudget, store);

    LossFn<double> loss_fn = [&](ParamStore<double>& ps, bool want_grad) {
        auto code = poison_latents<double>(ag::Var<double>::constant(z_t),
                                           ag::Var<double>::constant(c_t), stats, targets, nets,
                                           cfg);
        auto x_adv = vae.decode(code.z, code.c);
        auto pred = classify(clf, x_adv);
        auto terms = composite_loss<double>(x, x_adv, pred, twohot, cfg);
        if (want_grad) {
            ps.zero_grads();
            ag::backward(terms.total);
        }
        return double(terms.total.value()[0]);
    };
    Rng probe(4242);
    return finite_diff_check<double>(loss_fn, store, 48, 1e-4, probe);
}

double fd_pgd_inner(int64_t side, Arch arch) {
    // The PGD inner objective: cross entropy as a function of the input
    // pixels, with the model frozen. The probed store holds only the pixels.
    auto clf = Classifier<double>::init(arch, 10, side, 9);
    ScopedNoGrad<double> freeze(clf.params());
    const std::vector<int32_t> labels{1, 2, 3, 4};

    Rng rng(61);
    Tensor<double> x({4, 1, side, side});
    rng.fill_uniform(x, 0.2, 0.8);
    ParamStore<double> store;
    store.add("x", x);

    LossFn<double> loss_fn = [&](ParamStore<double>& ps, bool want_grad) {
        auto loss = smoothed_ce_loss<double>(classify(clf, ps.at("x")).logits, labels, 0.0);
        if (want_grad) {
            ps.zero_grads();
            ag::backward(loss);
        }
        return double(loss.value()[0]);
    };
    Rng probe(19);
    return finite_diff_check<double>(loss_fn, store, 32, 1e-4, probe);
}

bool gumbel_on_simplex(std::string& detail) {
    auto cfg = tiny_vae_cfg();
    auto model = JointVae<double>::init(cfg, 3);
    Rng rng(21), noise(99);
    Posterior<double> p;
    Tensor<double> mu({8, kM}), ls({8, kM}), cl({8, kN});
    rng.fill_uniform(mu, -1.0, 1.0);
    rng.fill_uniform(ls, -0.5, 0.5);
    rng.fill_uniform(cl, -3.0, 3.0);
    p.mu_z = ag::Var<double>::constant(mu);
    p.log_sigma_z = ag::Var<double>::constant(ls);
    p.c_logits = ag::Var<double>::constant(cl);
    const auto lat = model.sample_latent(p, draw_noise_tape<double>(noise, 8, cfg));
    double worst = 0;
    for (int64_t i = 0; i < 8; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < kN; ++j) {
            const double v = lat.c.value().at2(i, j);
            if (v < 0) return false;
            sum += v;
        }
        worst = std::max(worst, std::abs(sum - 1.0));
    }
    detail = "max |row sum - 1| = " + std::to_string(worst);
    return worst <= 1e-6;
}

bool kl_closed_forms(std::string& detail) {
    auto cfg = tiny_vae_cfg();
    auto model = JointVae<double>::init(cfg, 3);
    const int64_t b = 3;
    Rng rng(2);
    Tensor<double> tgt({b, kSide * kSide});
    rng.fill_uniform(tgt, 0.0, 1.0);
    auto rec = ag::Var<double>::constant(Tensor<double>({b, kSide * kSide}, 0.5));

    // mu=1, sigma=1 shifts KL by exactly 0.5 per continuous dimension.
    Posterior<double> shifted{ag::Var<double>::constant(Tensor<double>({b, kM}, 1.0)),
                              ag::Var<double>::constant(Tensor<double>({b, kM}, 0.0)),
                              ag::Var<double>::constant(Tensor<double>({b, kN}, 0.0))};
    const double kl_shifted = model.elbo_loss(tgt, shifted, rec).kl.value()[0];
    if (std::abs(kl_shifted - 0.5 * double(kM)) > 1e-9) {
        detail = "KL(N(1,1)||N(0,1)) per batch = " + std::to_string(kl_shifted);
        return false;
    }

    // Random posteriors never go negative.
    for (uint64_t seed : {11u, 12u, 13u}) {
        Rng r(seed);
        Tensor<double> m2({b, kM}), s2({b, kM}), c2({b, kN});
        r.fill_uniform(m2, -2.0, 2.0);
        r.fill_uniform(s2, -1.0, 1.0);
        r.fill_uniform(c2, -3.0, 3.0);
        Posterior<double> p{ag::Var<double>::constant(m2), ag::Var<double>::constant(s2),
                            ag::Var<double>::constant(c2)};
        if (model.elbo_loss(tgt, p, rec).kl.value()[0] < 0) {
            detail = "negative KL at seed " + std::to_string(seed);
            return false;
        }
    }
    detail = "KL(mu=1,sigma=1) = 0.5/dim exactly; random posteriors nonnegative";
    return true;
}

bool ssim_oracles(std::string& detail) {
    Rng rng(7);
    Tensor<double> x({16, 16});
    rng.fill_uniform(x, 0.0, 1.0);
    const double self = metrics::ssim(x, x);
    if (std::abs(self - 1.0) > 1e-9) {
        detail = "ssim(x,x) = " + std::to_string(self);
        return false;
    }
    // 0/1 checkerboard vs its inverse: means 0.5, variances 0.25,
    // covariance -0.25, so ssim = (-0.5 + c2) / (0.5 + c2) with c2 = 9e-4.
    Tensor<double> a({8, 8}), b({8, 8});
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j) {
            a.at2(i, j) = (i + j) % 2 ? 1.0 : 0.0;
            b.at2(i, j) = (i + j) % 2 ? 0.0 : 1.0;
        }
    const double expect = (-0.5 + 9e-4) / (0.5 + 9e-4);
    const double got = metrics::ssim(a, b);
    detail = "checkerboard ssim = " + std::to_string(got);
    return std::abs(got - expect) <= 1e-12;
}

bool gaussian_sum_checks(std::string& detail) {
    const auto s = gaussian_sum({0.0, 1.0}, {1.0, 4.0});
    if (std::abs(s.mu - 1.0) > 1e-12 || std::abs(s.var - 5.0) > 1e-12) {
        detail = "analytic sum mu=" + std::to_string(s.mu) + " var=" + std::to_string(s.var);
        return false;
    }
    Rng rng(123);
    const int64_t trials = 100000;
    double sum = 0, sumsq = 0;
    for (int64_t i = 0; i < trials; ++i) {
        const double t = rng.normal() + (1.0 + 2.0 * rng.normal());
        sum += t;
        sumsq += t * t;
    }
    const double mean = sum / double(trials);
    const double var = sumsq / double(trials) - mean * mean;
    detail = "monte carlo mean " + std::to_string(mean) + ", var " + std::to_string(var);
    return std::abs(mean - 1.0) < 0.02 && std::abs(var - 5.0) < 0.1;
}

bool stats_match_two_pass(std::string& detail) {
    auto cfg = tiny_vae_cfg();
    auto vae = JointVae<float>::init(cfg, 41);
    LabeledImageSet set;
    const int64_t count = 600;
    set.images = Tensor<float>({count, kSide, kSide});
    set.labels.assign(size_t(count), 0);
    Rng rng(3);
    rng.fill_uniform(set.images, 0.0, 1.0);
    for (int64_t i = 0; i < count; ++i) set.labels[size_t(i)] = int32_t(i % 10);

    FitStatsConfig fit;
    fit.classes = 10;
    const auto stats = fit_class_stats(vae, set, fit);

    auto post = vae.encode(ag::Var<float>::constant(set.images.reshaped({count, 1, kSide, kSide})));
    const auto& mu = post.mu_z.value();
    double worst = 0;
    for (int64_t k = 0; k < 10; ++k) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < count; ++i)
            if (set.labels[size_t(i)] == k) idx.push_back(i);
        for (int64_t d = 0; d < kM; ++d) {
            double s = 0;
            for (int64_t i : idx) s += double(mu[i * kM + d]);
            const double want_mu = s / double(idx.size());
            double ss = 0;
            for (int64_t i : idx) {
                const double dv = double(mu[i * kM + d]) - want_mu;
                ss += dv * dv;
            }
            worst = std::max(worst, std::abs(double(stats.mu_z[k * kM + d]) - want_mu));
            worst = std::max(worst, std::abs(double(stats.sigma_z[k * kM + d]) -
                                             std::sqrt(ss / double(idx.size()))));
        }
    }
    detail = "max |streaming - two-pass| = " + std::to_string(worst);
    return worst <= 1e-6;
}

bool pgd_respects_constraints(std::string& detail) {
    auto model = Classifier<float>::init(Arch::LenetSmall, 10, kSide, 9);
    Rng data_rng(4);
    Tensor<float> x({4, 1, kSide, kSide});
    data_rng.fill_uniform(x, 0.0, 1.0);
    const std::vector<int32_t> y{1, 2, 3, 4};

    double worst_ball = 0;
    for (const double eps : {0.05, 0.3}) {
        for (const int64_t steps : {0L, 5L, 20L}) {
            PgdConfig cfg;
            cfg.epsilon = eps;
            cfg.steps = steps;
            Rng r(uint64_t(steps) * 31 + 1);
            const auto adv = pgd_attack<float>(model, x, y, cfg, r);
            for (int64_t i = 0; i < x.size(); ++i) {
                if (adv[i] < 0.0f || adv[i] > 1.0f) {
                    detail = "pixel outside [0,1]";
                    return false;
                }
                const double d = std::abs(double(adv[i]) - double(x[i]));
                if (d > eps + 1e-6) {
                    detail = "ball violation " + std::to_string(d) + " at eps " +
                             std::to_string(eps);
                    return false;
                }
                worst_ball = std::max(worst_ball, d - eps);
            }
        }
    }
    detail = "box and ball hold across 6 configs; max overshoot " + std::to_string(worst_ball);
    return true;
}

bool poison_identity(std::string& detail) {
    const auto st = handmade_stats();
    Rng rng(53);
    Tensor<float> z_t({5, kM});
    rng.fill_uniform(z_t, -1.5, 1.5);
    Tensor<float> c_t({5, kN}, 1.0f / float(kN));
    const std::vector<int32_t> targets{1, 3, 0, 2, 1};

    AttackConfig cfg;
    cfg.param_budget = kBudget;
    cfg.lambda_org = 1.0;
    cfg.lambda_noised = 0.0;
    auto nets = AttackNetworks<float>::init(kM, kN, kClasses, kBudget, 7);
    const auto code = poison_latents<float>(ag::Var<float>::constant(z_t),
                                            ag::Var<float>::constant(c_t), st, targets, nets, cfg);
    for (int64_t i = 0; i < z_t.size(); ++i)
        if (code.z.value()[i] != z_t[i]) {
            detail = "continuous latent changed";
            return false;
        }
    double worst = 0;
    for (int64_t i = 0; i < c_t.size(); ++i)
        worst = std::max(worst, std::abs(double(code.c.value()[i]) - double(c_t[i])));
    detail = "z bit-identical; max categorical drift " + std::to_string(worst);
    return worst <= 1e-5;
}

}  // namespace

// ------------------------------------------------------------ the criteria --

TEST_CASE("criterion 1: inference classifier accuracy and training budget") {
    const std::string label = "inference classifier: MNIST test accuracy >= 96.5%, trained <= 15 min";
    if (!bootstrap_ok(1, label)) return;
    const World& w = world();
    const double acc = w.summary.at("eval").at("accuracy").at("inference_test_acc").get<double>();
    const int64_t n = w.summary.at("eval").at("accuracy").at("evaluated_on").get<int64_t>();
    const double wall = w.manifest.at("inference").wall_seconds;
    const bool ok = acc >= 0.965 && n == 10000 && wall <= 900.0;
    verdict(1, ok, label, pct(acc) + " on " + std::to_string(n) + " images, trained in " + secs(wall));
}

TEST_CASE("criterion 2: robust classifier accuracy, clean and under PGD-20") {
    const std::string label =
        "robust classifier: standard accuracy >= 97%, PGD-20(eps=0.3) accuracy >= 80%";
    if (!bootstrap_ok(2, label)) return;
    const World& w = world();
    const double std_acc = w.summary.at("eval").at("accuracy").at("robust_standard_acc").get<double>();
    const double pgd_acc = w.summary.at("pgd").at("robust").at("acc_under_pgd").get<double>();
    const double wall = w.manifest.at("robust").wall_seconds;
    const bool ok = std_acc >= 0.97 && pgd_acc >= 0.80 && wall <= 7200.0;
    verdict(2, ok, label,
            "standard " + pct(std_acc) + ", under PGD " + pct(pgd_acc) + ", trained in " +
                secs(wall));
}

TEST_CASE("criterion 3: the same PGD flattens an undefended classifier") {
    const std::string label = "PGD sanity: undefended classifier accuracy under PGD-20(eps=0.3) < 10%";
    if (!bootstrap_ok(3, label)) return;
    const World& w = world();
    const json& st = w.summary.at("pgd").at("standard");
    if (st.is_null()) {
        verdict(3, false, label, "baseline run recorded no standard classifier");
        return;
    }
    const double acc = st.at("acc_under_pgd").get<double>();
    verdict(3, acc < 0.10, label, "undefended accuracy under PGD " + pct(acc));
}

TEST_CASE("criterion 4: latent-poisoning headline success rate") {
    const std::string label =
        "latent poisoning at (0,1), 12K budget: success >= 30% on >= 1000 test images";
    if (!bootstrap_ok(4, label)) return;
    const json& s = world().summary.at("eval");
    const int64_t count = s.at("count").get<int64_t>();
    const double rate = s.at("success").at("rate").get<double>();
    const double mean_ssim = s.at("mean_ssim").get<double>();
    const double recon_ssim = s.at("mean_reconstruction_ssim").get<double>();
    const bool lambdas_ok = s.at("lambda_org").get<double>() == 0.0 &&
                            s.at("lambda_noised").get<double>() == 1.0 &&
                            s.at("param_budget").get<int64_t>() == 12000;
    const bool ok = count >= 1000 && rate >= 0.30 && lambdas_ok;
    verdict(4, ok, label,
            pct(rate) + " on " + std::to_string(count) + " images; mean ssim " +
                std::to_string(mean_ssim) + " vs reconstruction floor " +
                std::to_string(recon_ssim));
}

TEST_CASE("criterion 5: ablation accuracy is monotone along the mixing grid") {
    const std::string label =
        "robust accuracy under attack is non-increasing along alpha 0.6 -> 0 (2-point slack)";
    if (!bootstrap_ok(5, label)) return;
    const json& rows = world().summary.at("ablate").at("rows");
    bool ok = rows.size() == 5;
    std::string seq;
    double prev = 1.0;
    for (size_t i = 0; i < rows.size(); ++i) {
        const double acc = rows[i].at("accuracy_under_attack").get<double>();
        if (!seq.empty()) seq += " -> ";
        seq += pct(acc);
        if (i > 0 && acc > prev + 0.02) ok = false;
        prev = acc;
    }
    verdict(5, ok, label, seq);
}

TEST_CASE("criterion 6: the test classifier is only ever queried as a black box") {
    const std::string label = "gradient queries against the test classifier == 0 in every attack run";
    if (!bootstrap_ok(6, label)) return;
    const World& w = world();
    const int64_t g1 = w.summary.at("eval").at("black_box").at("gradient_queries").get<int64_t>();
    const int64_t g2 =
        w.summary.at("eval-rerun").at("black_box").at("gradient_queries").get<int64_t>();
    const int64_t preds = w.summary.at("eval").at("black_box").at("prediction_queries").get<int64_t>();
    // The ablation runner enforces the same invariant internally and would
    // have failed its run otherwise.
    const bool ok = g1 == 0 && g2 == 0 && preds > 0;
    verdict(6, ok, label,
            "evaluate recorded " + std::to_string(g1) + " gradient / " + std::to_string(preds) +
                " prediction queries");
}

TEST_CASE("criterion 7: numerical property suite") {
    const std::string label = "finite differences, simplex, KL, ssim, gaussian sum, stats, pgd, identity";
    // Self-contained numerics; no pipeline needed.
    struct Prop {
        std::string name;
        bool ok;
        std::string detail;
        double seconds;
    };
    std::vector<Prop> props;
    auto run_prop = [&](const std::string& name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = fn(detail);
        } catch (const std::exception& e) {
            detail = std::string("threw: ") + e.what();
        }
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (dt > 60.0) {
            ok = false;
            detail += " [exceeded 60 s]";
        }
        props.push_back({name, ok, detail, dt});
    };

    run_prop("fd-elbo", [](std::string& d) {
        const double err = fd_elbo();
        d = "rel err " + std::to_string(err);
        return err <= 1e-4;
    });
    run_prop("fd-composite", [](std::string& d) {
        const double err = fd_composite();
        d = "rel err " + std::to_string(err);
        return err <= 1e-4;
    });
    run_prop("fd-pgd-inner-12", [](std::string& d) {
        const double err = fd_pgd_inner(12, Arch::LenetSmall);
        d = "rel err " + std::to_string(err);
        return err <= 1e-4;
    });
    run_prop("fd-pgd-inner-28", [](std::string& d) {
        const double err = fd_pgd_inner(28, Arch::LenetSmall);
        d = "rel err " + std::to_string(err);
        return err <= 1e-4;
    });
    run_prop("gumbel-simplex", [](std::string& d) { return gumbel_on_simplex(d); });
    run_prop("kl-closed-form", [](std::string& d) { return kl_closed_forms(d); });
    run_prop("ssim-oracles", [](std::string& d) { return ssim_oracles(d); });
    run_prop("gaussian-sum", [](std::string& d) { return gaussian_sum_checks(d); });
    run_prop("stats-two-pass", [](std::string& d) { return stats_match_two_pass(d); });
    run_prop("pgd-constraints", [](std::string& d) { return pgd_respects_constraints(d); });
    run_prop("poison-identity", [](std::string& d) { return poison_identity(d); });

    bool all_ok = true;
    std::string detail;
    for (const Prop& p : props) {
        if (!p.ok) {
            all_ok = false;
            if (!detail.empty()) detail += "; ";
            detail += p.name + ": " + p.detail;
        }
        std::printf("  property %-16s %s (%.2f s) %s\n", p.name.c_str(),
                    p.ok ? "ok" : "FAIL", p.seconds, p.detail.c_str());
    }
    if (all_ok) detail = std::to_string(props.size()) + " properties, all within tolerance";
    verdict(7, all_ok, label, detail);
}

TEST_CASE("criterion 8: bit-exact round trips and reproducible reruns") {
    const std::string label = "IDX, checkpoint, and PGM round trips byte-identical; rerun reproduces summary.json";
    if (!bootstrap_ok(8, label)) return;
    const World& w = world();
    const fs::path scratch = w.root / "roundtrip";
    fs::create_directories(scratch);
    std::vector<std::string> problems;

    {  // IDX: parse + serialize reproduces the canonical file.
        const fs::path lbl = fs::path(w.data) / "t10k-labels-idx1-ubyte";
        const std::string raw = slurp(lbl);
        const std::vector<uint8_t> bytes(raw.begin(), raw.end());
        if (serialize_idx(parse_idx(bytes)) != bytes) problems.push_back("idx");
    }
    {  // Checkpoint: load + save reproduces the trained artifact bitwise.
        const fs::path src = w.root / "vae" / "vae.ckpt";
        const fs::path dst = scratch / "vae-copy.ckpt";
        save_vae_checkpoint(load_vae_checkpoint(src.string()), dst.string());
        if (slurp(src) != slurp(dst)) problems.push_back("checkpoint");
        if (slurp(src.string() + ".meta") != slurp(dst.string() + ".meta"))
            problems.push_back("checkpoint-meta");
    }
    {  // PGM: read + re-emit reproduces the file.
        const fs::path src = w.root / "eval" / "grids" / "pairs.pgm";
        const cli::PgmImage img = cli::read_pgm(src.string());
        Tensor<float> t({1, img.height, img.width});
        for (int64_t i = 0; i < t.size(); ++i)
            t[i] = float(img.bytes[size_t(i)]) / 255.0f;
        const fs::path dst = scratch / "pairs-copy.pgm";
        cli::emit_grid(t, {}, dst.string());
        if (slurp(src) != slurp(dst)) problems.push_back("pgm");
    }
    // Seed-fixed rerun: the independent eval-rerun stage must match byte for
    // byte on every result artifact (manifests differ only in wall time).
    for (const char* rel : {"summary.json", "results.jsonl", "grids/pairs.pgm",
                            "grids/interpolation.pgm"}) {
        if (slurp(w.root / "eval" / rel) != slurp(w.root / "eval-rerun" / rel))
            problems.push_back(std::string("rerun:") + rel);
    }

    std::string detail = "4 round trips byte-identical";
    if (!problems.empty()) {
        detail = "mismatch in:";
        for (const auto& p : problems) detail += " " + p;
    }
    verdict(8, problems.empty(), label, detail);
}

TEST_CASE("criterion 9: qualitative grids are emitted and well-formed") {
    const std::string label = "evaluate writes the pair grid and the latent-interpolation strip";
    if (!bootstrap_ok(9, label)) return;
    const World& w = world();
    const fs::path grids = w.root / "eval" / "grids";
    std::vector<std::string> problems;

    try {  // 8 original|adversarial rows, 2 columns.
        const cli::PgmImage pairs = cli::read_pgm((grids / "pairs.pgm").string());
        if (pairs.width != 2 * 28 + 1 || pairs.height != 8 * 28 + 7)
            problems.push_back("pair grid dimensions");
        std::istringstream caps(slurp(grids / "pairs.txt"));
        std::string line;
        int64_t lines = 0, arrows = 0;
        while (std::getline(caps, line)) {
            ++lines;
            if (line.find("->") != std::string::npos) ++arrows;
        }
        if (lines != 16 || arrows != 8) problems.push_back("pair captions");
    } catch (const Error& e) {
        problems.push_back(std::string("pairs.pgm: ") + e.what());
    }

    try {  // endpoints plus 9 interpolation frames in one strip.
        const cli::PgmImage strip = cli::read_pgm((grids / "interpolation.pgm").string());
        if (strip.width != 11 * 28 + 10 || strip.height != 28)
            problems.push_back("interpolation dimensions");
        std::istringstream caps(slurp(grids / "interpolation.txt"));
        std::string line;
        int64_t lines = 0, mixes = 0;
        while (std::getline(caps, line)) {
            ++lines;
            if (line.find("a=") != std::string::npos) ++mixes;
        }
        if (lines != 11 || mixes != 9) problems.push_back("interpolation captions");
    } catch (const Error& e) {
        problems.push_back(std::string("interpolation.pgm: ") + e.what());
    }

    std::string detail = "pair grid 57x231 with 8 caption arrows; strip 318x28 with 9 mixes";
    if (!problems.empty()) {
        detail.clear();
        for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
    }
    verdict(9, problems.empty(), label, detail);
}
