#include "lsp/cli.hpp"

#include "lsp/attack.hpp"
#include "lsp/classifiers.hpp"
#include "lsp/dataio.hpp"
#include "lsp/latentstats.hpp"
#include "lsp/metrics.hpp"
#include "lsp/rng.hpp"
#include "lsp/vae.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace lsp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------ small utils ---

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string num_str(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) fail(ErrorCode::IoError, "could not format a number");
    return std::string(buf, end);
}

std::string num_str(int64_t v) { return std::to_string(v); }
std::string bool_str(bool v) { return v ? "true" : "false"; }

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

uint8_t quantize_pixel(float v) {
    const double c = std::min(1.0, std::max(0.0, double(v)));
    return uint8_t(std::llround(c * 255.0));
}

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * fraction);
    return std::string(buf);
}

// ------------------------------------------------------- schema rendering ---

const char* kSubcommands[] = {"train-vae",  "train-inference", "train-robust",
                              "fit-stats",  "train-attack",    "evaluate",
                              "baseline-pgd", "ablate",        "report"};

std::map<std::string, std::map<std::string, std::string>> build_schema() {
    std::map<std::string, std::map<std::string, std::string>> s;

    VaeConfig v;
    s["train-vae"] = {{"m", num_str(v.m)},
                      {"n", num_str(v.n)},
                      {"beta", num_str(v.beta)},
                      {"gumbel-tau", num_str(v.gumbel_tau)},
                      {"epochs", num_str(v.epochs)},
                      {"batch-size", num_str(v.batch_size)},
                      {"lr", num_str(v.lr)},
                      {"capacity-annealing", bool_str(v.capacity_annealing)},
                      {"cap-gamma", num_str(v.cap_gamma)},
                      {"cap-z-max", num_str(v.cap_z_max)},
                      {"cap-c-max", num_str(v.cap_c_max)},
                      {"cap-steps", num_str(v.cap_steps)},
                      {"image-side", num_str(v.image_side)},
                      {"train-count", "0"},
                      {"val-count", "0"},
                      {"checkpoint", "vae.ckpt"}};

    ClassifierConfig ci;
    s["train-inference"] = {{"arch", "lenet-small"},
                            {"classes", num_str(ci.classes)},
                            {"label-smoothing", "0.1"},
                            {"epochs", num_str(ci.epochs)},
                            {"batch-size", num_str(ci.batch_size)},
                            {"lr", num_str(ci.lr)},
                            {"image-side", num_str(ci.image_side)},
                            {"train-count", "0"},
                            {"val-count", "0"},
                            {"checkpoint", "inference.ckpt"}};

    PgdConfig p7;
    p7.steps = 7;
    s["train-robust"] = {{"arch", "madry-mnist"},
                         {"classes", num_str(ci.classes)},
                         {"label-smoothing", "0"},
                         {"epochs", num_str(ci.epochs)},
                         {"batch-size", num_str(ci.batch_size)},
                         {"lr", num_str(ci.lr)},
                         {"image-side", num_str(ci.image_side)},
                         {"pgd-epsilon", num_str(p7.epsilon)},
                         {"pgd-steps", num_str(p7.steps)},
                         {"pgd-step-size", num_str(p7.step_size)},
                         {"pgd-random-start", bool_str(p7.random_start)},
                         {"train-count", "0"},
                         {"val-count", "0"},
                         {"checkpoint", "robust.ckpt"}};

    FitStatsConfig f;
    s["fit-stats"] = {{"vae-checkpoint", ""},
                      {"classes", num_str(f.classes)},
                      {"batch-size", num_str(f.batch_size)},
                      {"sampled-latents", bool_str(f.sampled_latents)},
                      {"train-count", "0"},
                      {"stats", "stats.json"}};

    AttackConfig a;
    s["train-attack"] = {{"vae-checkpoint", ""},
                         {"inference-checkpoint", ""},
                         {"stats", ""},
                         {"lambda-org", num_str(a.lambda_org)},
                         {"lambda-noised", num_str(a.lambda_noised)},
                         {"learned-coefficient", bool_str(a.learned_coefficient)},
                         {"lambda0", num_str(a.lambda0)},
                         {"lambda1", num_str(a.lambda1)},
                         {"lambda2", num_str(a.lambda2)},
                         {"norm", attack_norm_name(a.norm_choice)},
                         {"target-mode", target_mode_name(a.target_mode)},
                         {"smoothmax-temp", num_str(a.smoothmax_temp)},
                         {"param-budget", num_str(a.param_budget)},
                         {"epochs", num_str(a.epochs)},
                         {"batch-size", num_str(a.batch_size)},
                         {"lr", num_str(a.lr)},
                         {"train-count", "0"},
                         {"checkpoint", "attack.ckpt"}};

    s["evaluate"] = {{"vae-checkpoint", ""},
                     {"inference-checkpoint", ""},
                     {"robust-checkpoint", ""},
                     {"attack-checkpoint", ""},
                     {"stats", ""},
                     {"lambda-org", num_str(a.lambda_org)},
                     {"lambda-noised", num_str(a.lambda_noised)},
                     {"learned-coefficient", bool_str(a.learned_coefficient)},
                     {"count", "1000"},
                     {"accuracy-count", "0"},
                     {"grid-pairs", "8"},
                     {"interp-steps", "9"},
                     {"jsonl-pixels", "false"}};

    PgdConfig p20;
    s["baseline-pgd"] = {{"robust-checkpoint", ""},
                         {"standard-checkpoint", ""},
                         {"epsilon", num_str(p20.epsilon)},
                         {"steps", num_str(p20.steps)},
                         {"step-size", num_str(p20.step_size)},
                         {"random-start", bool_str(p20.random_start)},
                         {"count", "1000"},
                         {"batch-size", "128"}};

    s["ablate"] = {{"vae-checkpoint", ""},
                   {"inference-checkpoint", ""},
                   {"robust-checkpoint", ""},
                   {"stats", ""},
                   {"grid", "0.6:0.8,0.5:0.8,0.3:0.8,0.1:0.8,0:1"},
                   {"learned-coefficient", "false"},
                   {"lambda0", num_str(a.lambda0)},
                   {"lambda1", num_str(a.lambda1)},
                   {"lambda2", num_str(a.lambda2)},
                   {"norm", attack_norm_name(a.norm_choice)},
                   {"target-mode", target_mode_name(a.target_mode)},
                   {"smoothmax-temp", num_str(a.smoothmax_temp)},
                   {"param-budget", num_str(a.param_budget)},
                   {"epochs", num_str(a.epochs)},
                   {"batch-size", num_str(a.batch_size)},
                   {"lr", num_str(a.lr)},
                   {"train-count", "0"},
                   {"eval-count", "1000"}};

    s["report"] = {{"runs", ""}};
    return s;
}

// ----------------------------------------------------------- run scaffold ---

struct RunCtx {
    Invocation inv;
    std::map<std::string, std::string> cfg;
    RunManifest manifest;
    fs::path out;

    fs::path artifact(const std::string& rel) const { return out / rel; }

    void add_input(const std::string& path) {
        manifest.inputs.push_back({path, file_crc32(path)});
    }
    void add_output(const std::string& rel) {
        manifest.outputs.push_back({rel, file_crc32((out / rel).string())});
    }
};

// Checkpoints come as a weights file plus a .meta text sidecar.
void add_checkpoint_outputs(RunCtx& ctx, const std::string& rel) {
    ctx.add_output(rel);
    ctx.add_output(rel + ".meta");
}

void require_checkpoint(const std::string& key, const std::string& path) {
    if (path.empty())
        fail(ErrorCode::ConfigError, "config key '" + key + "' must name a file");
    if (!fs::exists(path))
        fail(ErrorCode::MissingCheckpoint, key + " does not exist: " + path);
}

// The MNIST files a split reads, with .gz fallbacks resolved, for digesting.
std::vector<std::string> split_files(const std::string& root, Split split) {
    const char* images = split == Split::Test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte";
    const char* labels = split == Split::Test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte";
    std::vector<std::string> out;
    for (const char* name : {images, labels}) {
        fs::path p = fs::path(root) / name;
        if (!fs::exists(p)) p += ".gz";
        out.push_back(p.string());
    }
    return out;
}

LabeledImageSet load_split(RunCtx& ctx, Split split, int64_t head = 0) {
    LabeledImageSet set = load_dataset(ctx.inv.data_root, split);
    const std::vector<std::string> files = split_files(ctx.inv.data_root, split);
    bool already_recorded = false;
    for (const ArtifactRef& f : ctx.manifest.inputs)
        already_recorded = already_recorded || f.path == files[0];
    if (!already_recorded)
        for (const std::string& f : files) ctx.add_input(f);
    if (head > 0) {
        if (head > set.count())
            fail(ErrorCode::ConfigError, "requested " + std::to_string(head) + " records but the " +
                                             std::string(split_name(split)) + " split has " +
                                             std::to_string(set.count()));
        set = head_subset(set, head);
    }
    return set;
}

std::ofstream open_text(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);  // binary: identical bytes on every platform
    if (!f) fail(ErrorCode::IoError, "cannot open for writing: " + p.string());
    return f;
}

void write_json_file(const fs::path& p, const json& j) {
    auto f = open_text(p);
    f << j.dump(2) << "\n";
    if (!f) fail(ErrorCode::IoError, "failed writing " + p.string());
}

json read_json_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) fail(ErrorCode::MissingFile, "cannot open " + p.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        fail(ErrorCode::CorruptFile, p.string() + ": " + e.what());
    }
    return j;
}

// ----------------------------------------------------- config -> structs ----

VaeConfig vae_config_from(const std::map<std::string, std::string>& c, uint64_t seed) {
    VaeConfig v;
    v.m = cfg_int(c, "m");
    v.n = cfg_int(c, "n");
    v.beta = cfg_double(c, "beta");
    v.gumbel_tau = cfg_double(c, "gumbel-tau");
    v.epochs = cfg_int(c, "epochs");
    v.batch_size = cfg_int(c, "batch-size");
    v.lr = cfg_double(c, "lr");
    v.capacity_annealing = cfg_bool(c, "capacity-annealing");
    v.cap_gamma = cfg_double(c, "cap-gamma");
    v.cap_z_max = cfg_double(c, "cap-z-max");
    v.cap_c_max = cfg_double(c, "cap-c-max");
    v.cap_steps = cfg_int(c, "cap-steps");
    v.image_side = cfg_int(c, "image-side");
    v.seed = seed;
    return v;
}

ClassifierConfig classifier_config_from(const std::map<std::string, std::string>& c, bool robust,
                                        uint64_t seed) {
    ClassifierConfig cc;
    cc.arch = arch_from_name(cfg_str(c, "arch"));
    cc.classes = cfg_int(c, "classes");
    cc.image_side = cfg_int(c, "image-side");
    cc.label_smoothing = cfg_double(c, "label-smoothing");
    cc.epochs = cfg_int(c, "epochs");
    cc.batch_size = cfg_int(c, "batch-size");
    cc.lr = cfg_double(c, "lr");
    cc.seed = seed;
    if (robust) {
        cc.adversarial = true;
        cc.train_attack.epsilon = cfg_double(c, "pgd-epsilon");
        cc.train_attack.steps = cfg_int(c, "pgd-steps");
        cc.train_attack.step_size = cfg_double(c, "pgd-step-size");
        cc.train_attack.random_start = cfg_bool(c, "pgd-random-start");
    }
    return cc;
}

AttackConfig attack_config_from(const std::map<std::string, std::string>& c, uint64_t seed) {
    AttackConfig a;
    a.lambda_org = cfg_double(c, "lambda-org");
    a.lambda_noised = cfg_double(c, "lambda-noised");
    a.learned_coefficient = cfg_bool(c, "learned-coefficient");
    a.lambda0 = cfg_double(c, "lambda0");
    a.lambda1 = cfg_double(c, "lambda1");
    a.lambda2 = cfg_double(c, "lambda2");
    a.norm_choice = attack_norm_from_name(cfg_str(c, "norm"));
    a.target_mode = target_mode_from_name(cfg_str(c, "target-mode"));
    a.smoothmax_temp = cfg_double(c, "smoothmax-temp");
    a.param_budget = cfg_int(c, "param-budget");
    a.epochs = cfg_int(c, "epochs");
    a.batch_size = cfg_int(c, "batch-size");
    a.lr = cfg_double(c, "lr");
    a.seed = seed;
    return a;
}

// --------------------------------------------------------- shared helpers ---

json success_json(const metrics::SuccessStats& s) {
    return json{{"successes", s.successes},
                {"total", s.total},
                {"rate", s.rate},
                {"ci95_lo", s.lo},
                {"ci95_hi", s.hi}};
}

struct PgdEval {
    metrics::SuccessStats success;   // prediction changed away from the label
    double standard_acc = 0;         // clean accuracy on the same subset
    double acc_under_attack = 0;
};

PgdEval pgd_eval(Classifier<float>& model, const LabeledImageSet& set, const PgdConfig& pgd,
                 int64_t batch_size, uint64_t seed) {
    Rng rng(seed);
    std::vector<uint8_t> flipped;
    int64_t clean_hits = 0, adv_hits = 0;
    const int64_t n = set.count();
    const int64_t side = set.height();
    for (int64_t at = 0; at < n; at += batch_size) {
        const int64_t b = std::min(batch_size, n - at);
        Tensor<float> x({b, 1, side, side});
        std::copy(set.images.data() + at * side * side,
                  set.images.data() + (at + b) * side * side, x.data());
        std::vector<int32_t> labels(set.labels.begin() + at, set.labels.begin() + at + b);
        const auto clean = model.predict(x);
        const Tensor<float> adv = pgd_attack<float>(model, x, labels, pgd, rng);
        const auto hit = model.predict(adv);
        for (int64_t i = 0; i < b; ++i) {
            clean_hits += clean[size_t(i)] == labels[size_t(i)];
            adv_hits += hit[size_t(i)] == labels[size_t(i)];
            flipped.push_back(hit[size_t(i)] != labels[size_t(i)] ? 1 : 0);
        }
    }
    PgdEval out;
    out.success = metrics::success_rate(flipped);
    out.standard_acc = double(clean_hits) / double(n);
    out.acc_under_attack = double(adv_hits) / double(n);
    return out;
}

// Mean whole-image structural similarity between each image and its
// deterministic reconstruction: the quality floor any poisoned decode is
// compared against.
double mean_reconstruction_ssim(const JointVae<float>& vae, const LabeledImageSet& set) {
    const int64_t n = set.count();
    const int64_t pix = set.height() * set.width();
    double sum = 0;
    const int64_t chunk = 256;
    for (int64_t at = 0; at < n; at += chunk) {
        const int64_t b = std::min(chunk, n - at);
        Tensor<float> x({b, set.height(), set.width()});
        std::copy(set.images.data() + at * pix, set.images.data() + (at + b) * pix, x.data());
        const Tensor<float> recon = reconstruct_deterministic(vae, x);
        for (int64_t i = 0; i < b; ++i) {
            Tensor<float> xi({pix}), ri({pix});
            std::copy(x.data() + i * pix, x.data() + (i + 1) * pix, xi.data());
            std::copy(recon.data() + i * pix, recon.data() + (i + 1) * pix, ri.data());
            sum += metrics::ssim(xi, ri);
        }
    }
    return sum / double(n);
}

uint32_t bytes_crc32(const std::vector<uint8_t>& bytes) {
    uLong c = crc32(0L, Z_NULL, 0);
    c = crc32(c, bytes.data(), uInt(bytes.size()));
    return uint32_t(c);
}

std::string hex32(uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", v);
    return std::string(buf);
}

std::string quantized_crc(const Tensor<float>& pixels) {
    std::vector<uint8_t> q(size_t(pixels.size()));
    for (int64_t i = 0; i < pixels.size(); ++i) q[size_t(i)] = quantize_pixel(pixels[i]);
    return hex32(bytes_crc32(q));
}

// --------------------------------------------------------------- runners ----

void run_train_vae(RunCtx& ctx) {
    const uint64_t seed = hash_seed(ctx.inv.seed, "train-vae");
    VaeConfig cfg = vae_config_from(ctx.cfg, seed);
    LabeledImageSet train = load_split(ctx, Split::Train, cfg_int(ctx.cfg, "train-count"));
    LabeledImageSet val = load_split(ctx, Split::Val, cfg_int(ctx.cfg, "val-count"));

    auto log = open_text(ctx.artifact("log.jsonl"));
    VaeTrainResult res = train_vae(train, val, cfg, &log);
    log.close();

    const std::string ckpt = cfg_str(ctx.cfg, "checkpoint");
    save_vae_checkpoint(res.model, ctx.artifact(ckpt).string());

    json summary{{"epochs", int64_t(res.log.size())}};
    if (!res.log.empty()) {
        summary["final_val_total"] = res.log.back().val_total;
        summary["final_val_recon"] = res.log.back().val_recon;
        summary["final_val_kl"] = res.log.back().val_kl;
    }
    write_json_file(ctx.artifact("summary.json"), summary);

    ctx.add_output("log.jsonl");
    add_checkpoint_outputs(ctx, ckpt);
    ctx.add_output("summary.json");
}

void run_train_classifier(RunCtx& ctx, bool robust) {
    const uint64_t seed = hash_seed(ctx.inv.seed, ctx.inv.subcommand);
    ClassifierConfig cfg = classifier_config_from(ctx.cfg, robust, seed);
    LabeledImageSet train = load_split(ctx, Split::Train, cfg_int(ctx.cfg, "train-count"));
    LabeledImageSet val = load_split(ctx, Split::Val, cfg_int(ctx.cfg, "val-count"));

    auto log = open_text(ctx.artifact("log.jsonl"));
    ClassifierTrainResult res = train_classifier(train, val, cfg, &log);
    log.close();

    const std::string ckpt = cfg_str(ctx.cfg, "checkpoint");
    save_classifier_checkpoint(res.model, ctx.artifact(ckpt).string());

    json summary{{"epochs", int64_t(res.log.size())},
                 {"arch", arch_name(cfg.arch)},
                 {"adversarial_training", cfg.adversarial}};
    if (!res.log.empty()) summary["final_val_acc"] = res.log.back().val_acc;
    write_json_file(ctx.artifact("summary.json"), summary);

    ctx.add_output("log.jsonl");
    add_checkpoint_outputs(ctx, ckpt);
    ctx.add_output("summary.json");
}

void run_fit_stats(RunCtx& ctx) {
    const std::string vae_path = cfg_str(ctx.cfg, "vae-checkpoint");
    require_checkpoint("vae-checkpoint", vae_path);
    ctx.add_input(vae_path);
    JointVae<float> vae = load_vae_checkpoint(vae_path);

    FitStatsConfig cfg;
    cfg.classes = cfg_int(ctx.cfg, "classes");
    cfg.batch_size = cfg_int(ctx.cfg, "batch-size");
    cfg.sampled_latents = cfg_bool(ctx.cfg, "sampled-latents");
    cfg.seed = hash_seed(ctx.inv.seed, "fit-stats");

    LabeledImageSet train = load_split(ctx, Split::Train, cfg_int(ctx.cfg, "train-count"));
    ClassLatentStats stats = fit_class_stats(vae, train, cfg);

    const std::string out_name = cfg_str(ctx.cfg, "stats");
    save_stats_json(stats, ctx.artifact(out_name).string());
    ctx.add_output(out_name);
}

void run_train_attack(RunCtx& ctx) {
    const std::string vae_path = cfg_str(ctx.cfg, "vae-checkpoint");
    const std::string inf_path = cfg_str(ctx.cfg, "inference-checkpoint");
    const std::string stats_path = cfg_str(ctx.cfg, "stats");
    require_checkpoint("vae-checkpoint", vae_path);
    require_checkpoint("inference-checkpoint", inf_path);
    require_checkpoint("stats", stats_path);
    ctx.add_input(vae_path);
    ctx.add_input(inf_path);
    ctx.add_input(stats_path);

    JointVae<float> vae = load_vae_checkpoint(vae_path);
    Classifier<float> inference = load_classifier_checkpoint(inf_path);
    ClassLatentStats stats = load_stats_json(stats_path);

    AttackConfig cfg = attack_config_from(ctx.cfg, hash_seed(ctx.inv.seed, "train-attack"));
    LabeledImageSet train = load_split(ctx, Split::Train, cfg_int(ctx.cfg, "train-count"));

    auto log = open_text(ctx.artifact("log.jsonl"));
    AttackTrainResult res = attack_train(vae, inference, stats, train, cfg, &log);
    log.close();

    const std::string ckpt = cfg_str(ctx.cfg, "checkpoint");
    save_attack_checkpoint(res.networks, ctx.artifact(ckpt).string());

    json summary{{"epochs", int64_t(res.log.size())},
                 {"param_budget", cfg.param_budget},
                 {"lambda_org", cfg.lambda_org},
                 {"lambda_noised", cfg.lambda_noised},
                 {"learned_coefficient", cfg.learned_coefficient}};
    if (!res.log.empty()) {
        summary["final_total"] = res.log.back().total;
        summary["final_classify"] = res.log.back().classify;
        summary["final_norm"] = res.log.back().norm;
        summary["final_dssim"] = res.log.back().dssim;
    }
    write_json_file(ctx.artifact("summary.json"), summary);

    ctx.add_output("log.jsonl");
    add_checkpoint_outputs(ctx, ckpt);
    ctx.add_output("summary.json");
}

json record_json(int64_t index, const AttackRecord& r, bool with_pixels) {
    json j{{"index", index},
           {"label", r.label},
           {"top1", r.top1},
           {"top2", r.top2},
           {"top1_prob", r.top1_prob},
           {"top2_prob", r.top2_prob},
           {"ssim", r.ssim},
           {"l2", r.l2},
           {"linf", r.linf},
           {"adversarial_crc32", quantized_crc(r.adversarial)},
           {"has_test_eval", r.has_test_eval}};
    if (r.has_test_eval) {
        j["test_pred_before"] = r.test_pred_before;
        j["test_pred_after"] = r.test_pred_after;
        j["success"] = r.success;
    }
    if (with_pixels) {
        j["original"] = std::vector<float>(r.original.data(), r.original.data() + r.original.size());
        j["adversarial"] =
            std::vector<float>(r.adversarial.data(), r.adversarial.data() + r.adversarial.size());
    }
    return j;
}

// Tiles the first `pairs` records as rows of (original, adversarial) with
// "label -> prediction" captions on the adversarial tiles.
void emit_pair_grid(const std::vector<AttackRecord>& records, int64_t pairs, int64_t side,
                    const std::string& path) {
    const int64_t n = std::min<int64_t>(pairs, int64_t(records.size()));
    if (n == 0) fail(ErrorCode::EmptyInput, "no records to tile");
    Tensor<float> tiles({2 * n, side, side});
    std::vector<std::string> captions;
    for (int64_t i = 0; i < n; ++i) {
        const AttackRecord& r = records[size_t(i)];
        std::copy(r.original.data(), r.original.data() + side * side,
                  tiles.data() + (2 * i) * side * side);
        std::copy(r.adversarial.data(), r.adversarial.data() + side * side,
                  tiles.data() + (2 * i + 1) * side * side);
        captions.push_back("original " + std::to_string(r.label));
        const std::string pred =
            r.has_test_eval ? std::to_string(r.test_pred_after) : std::string("?");
        captions.push_back(std::to_string(r.label) + " -> " + pred);
    }
    emit_grid(tiles, captions, path, /*columns=*/2);
}

void run_evaluate(RunCtx& ctx) {
    const std::string vae_path = cfg_str(ctx.cfg, "vae-checkpoint");
    const std::string inf_path = cfg_str(ctx.cfg, "inference-checkpoint");
    const std::string rob_path = cfg_str(ctx.cfg, "robust-checkpoint");
    const std::string atk_path = cfg_str(ctx.cfg, "attack-checkpoint");
    const std::string stats_path = cfg_str(ctx.cfg, "stats");
    require_checkpoint("vae-checkpoint", vae_path);
    require_checkpoint("inference-checkpoint", inf_path);
    require_checkpoint("robust-checkpoint", rob_path);
    require_checkpoint("attack-checkpoint", atk_path);
    require_checkpoint("stats", stats_path);
    for (const auto& p : {vae_path, inf_path, rob_path, atk_path, stats_path}) ctx.add_input(p);

    JointVae<float> vae = load_vae_checkpoint(vae_path);
    Classifier<float> inference = load_classifier_checkpoint(inf_path);
    Classifier<float> robust = load_classifier_checkpoint(rob_path);
    AttackNetworks<float> nets = load_attack_checkpoint(atk_path);
    ClassLatentStats stats = load_stats_json(stats_path);

    AttackConfig acfg;  // only the mixing fields matter for application
    acfg.lambda_org = cfg_double(ctx.cfg, "lambda-org");
    acfg.lambda_noised = cfg_double(ctx.cfg, "lambda-noised");
    acfg.learned_coefficient = cfg_bool(ctx.cfg, "learned-coefficient");
    acfg.param_budget = nets.param_budget();
    acfg.seed = hash_seed(ctx.inv.seed, "evaluate");
    acfg.validate();

    const int64_t count = cfg_int(ctx.cfg, "count");
    LabeledImageSet test = load_split(ctx, Split::Test, count);

    std::vector<AttackRecord> records =
        attack_apply(nets, vae, inference, stats, test.images, test.labels, acfg);

    BlackBoxClassifier bb(robust);
    complete_with_test_predictions(bb, records);
    if (bb.gradient_queries() != 0)
        fail(ErrorCode::InvariantViolation, "the held-out classifier saw a gradient query");

    std::vector<uint8_t> flags;
    int64_t before_hits = 0, after_hits = 0;
    double sum_ssim = 0, sum_l2 = 0, sum_linf = 0;
    for (const AttackRecord& r : records) {
        flags.push_back(r.success ? 1 : 0);
        before_hits += r.test_pred_before == r.label;
        after_hits += r.test_pred_after == r.label;
        sum_ssim += r.ssim;
        sum_l2 += r.l2;
        sum_linf += r.linf;
    }
    const double n = double(records.size());
    const metrics::SuccessStats success = metrics::success_rate(flags);
    const double inequality = target_inequality_rate(inference, records);
    const double recon_floor = mean_reconstruction_ssim(vae, test);

    const int64_t acc_count = cfg_int(ctx.cfg, "accuracy-count");
    LabeledImageSet acc_set = load_split(ctx, Split::Test, acc_count);
    const double inference_acc = eval_accuracy(inference, acc_set, std::nullopt).standard_acc;
    const double robust_std_acc = eval_accuracy(robust, acc_set, std::nullopt).standard_acc;

    // results.jsonl: one record per line, in input order.
    const bool with_pixels = cfg_bool(ctx.cfg, "jsonl-pixels");
    {
        auto f = open_text(ctx.artifact("results.jsonl"));
        for (size_t i = 0; i < records.size(); ++i)
            f << record_json(int64_t(i), records[size_t(i)], with_pixels).dump() << "\n";
    }

    // Qualitative artifacts: paired original/adversarial tiles, plus one
    // latent interpolation strip between the first two differently-labeled
    // test images (endpoint tiles are the raw inputs).
    fs::create_directories(ctx.artifact("grids"));
    const int64_t side = test.height();
    emit_pair_grid(records, cfg_int(ctx.cfg, "grid-pairs"), side,
                   ctx.artifact("grids/pairs.pgm").string());

    const int64_t steps = cfg_int(ctx.cfg, "interp-steps");
    if (steps < 2) fail(ErrorCode::ConfigError, "interp-steps must be >= 2");
    int64_t second = -1;
    for (int64_t i = 1; i < test.count(); ++i)
        if (test.labels[size_t(i)] != test.labels[0]) {
            second = i;
            break;
        }
    if (second < 0) second = std::min<int64_t>(1, test.count() - 1);
    Tensor<float> x1({1, side, side}), x2({1, side, side});
    std::copy(test.images.data(), test.images.data() + side * side, x1.data());
    std::copy(test.images.data() + second * side * side,
              test.images.data() + (second + 1) * side * side, x2.data());
    Tensor<float> strip({steps + 2, side, side});
    std::vector<std::string> strip_captions(size_t(steps + 2));
    std::copy(x1.data(), x1.data() + side * side, strip.data());
    strip_captions[0] = "input " + std::to_string(test.labels[0]);
    for (int64_t k = 0; k < steps; ++k) {
        const double aa = 1.0 - double(k) / double(steps - 1);
        const Tensor<float> frame = interpolate(vae, x1, x2, aa, 1.0 - aa);
        std::copy(frame.data(), frame.data() + side * side,
                  strip.data() + (k + 1) * side * side);
        char cap[32];
        std::snprintf(cap, sizeof(cap), "a=%.3f", aa);
        strip_captions[size_t(k + 1)] = cap;
    }
    std::copy(x2.data(), x2.data() + side * side, strip.data() + (steps + 1) * side * side);
    strip_captions[size_t(steps + 1)] = "input " + std::to_string(test.labels[size_t(second)]);
    emit_grid(strip, strip_captions, ctx.artifact("grids/interpolation.pgm").string());

    json summary{
        {"count", int64_t(records.size())},
        {"success", success_json(success)},
        {"mean_ssim", sum_ssim / n},
        {"mean_reconstruction_ssim", recon_floor},
        {"mean_l2", sum_l2 / n},
        {"mean_linf", sum_linf / n},
        {"target_inequality_rate", inequality},
        {"lambda_org", acfg.lambda_org},
        {"lambda_noised", acfg.lambda_noised},
        {"learned_coefficient", acfg.learned_coefficient},
        {"param_budget", nets.param_budget()},
        {"accuracy",
         {{"evaluated_on", acc_set.count()},
          {"inference_test_acc", inference_acc},
          {"robust_standard_acc", robust_std_acc},
          {"robust_acc_on_attacked_before", double(before_hits) / n},
          {"robust_acc_under_attack", double(after_hits) / n}}},
        {"black_box", {{"prediction_queries", bb.prediction_queries()},
                       {"gradient_queries", bb.gradient_queries()}}}};
    write_json_file(ctx.artifact("summary.json"), summary);

    ctx.add_output("results.jsonl");
    ctx.add_output("grids/pairs.pgm");
    ctx.add_output("grids/pairs.txt");
    ctx.add_output("grids/interpolation.pgm");
    ctx.add_output("grids/interpolation.txt");
    ctx.add_output("summary.json");
}

void run_baseline_pgd(RunCtx& ctx) {
    const std::string rob_path = cfg_str(ctx.cfg, "robust-checkpoint");
    require_checkpoint("robust-checkpoint", rob_path);
    ctx.add_input(rob_path);
    Classifier<float> robust = load_classifier_checkpoint(rob_path);

    PgdConfig pgd;
    pgd.epsilon = cfg_double(ctx.cfg, "epsilon");
    pgd.steps = cfg_int(ctx.cfg, "steps");
    pgd.step_size = cfg_double(ctx.cfg, "step-size");
    pgd.random_start = cfg_bool(ctx.cfg, "random-start");
    pgd.validate();

    const int64_t batch = cfg_int(ctx.cfg, "batch-size");
    LabeledImageSet test = load_split(ctx, Split::Test, cfg_int(ctx.cfg, "count"));

    const PgdEval rob = pgd_eval(robust, test, pgd, batch, hash_seed(ctx.inv.seed, "baseline-pgd:robust"));
    json summary{{"epsilon", pgd.epsilon},
                 {"steps", pgd.steps},
                 {"count", test.count()},
                 {"robust",
                  {{"standard_acc", rob.standard_acc},
                   {"acc_under_pgd", rob.acc_under_attack},
                   {"success", success_json(rob.success)}}}};

    const std::string std_path = cfg_str(ctx.cfg, "standard-checkpoint");
    if (!std_path.empty()) {
        require_checkpoint("standard-checkpoint", std_path);
        ctx.add_input(std_path);
        Classifier<float> standard = load_classifier_checkpoint(std_path);
        const PgdEval st =
            pgd_eval(standard, test, pgd, batch, hash_seed(ctx.inv.seed, "baseline-pgd:standard"));
        summary["standard"] = {{"standard_acc", st.standard_acc},
                               {"acc_under_pgd", st.acc_under_attack},
                               {"success", success_json(st.success)}};
    } else {
        summary["standard"] = nullptr;
    }

    write_json_file(ctx.artifact("summary.json"), summary);
    ctx.add_output("summary.json");
}

std::vector<std::pair<double, double>> parse_grid(const std::string& text) {
    std::vector<std::pair<double, double>> grid;
    for (const std::string& part : split(text, ',')) {
        const std::string p = trim(part);
        if (p.empty()) continue;
        const auto ab = split(p, ':');
        if (ab.size() != 2)
            fail(ErrorCode::ConfigError, "grid point '" + p + "' is not of the form alpha:beta");
        try {
            size_t usedA = 0, usedB = 0;
            const double a = std::stod(trim(ab[0]), &usedA);
            const double b = std::stod(trim(ab[1]), &usedB);
            if (usedA != trim(ab[0]).size() || usedB != trim(ab[1]).size()) throw std::invalid_argument(p);
            grid.emplace_back(a, b);
        } catch (const std::exception&) {
            fail(ErrorCode::ConfigError, "grid point '" + p + "' is not numeric");
        }
    }
    if (grid.empty()) fail(ErrorCode::ConfigError, "grid is empty");
    return grid;
}

void run_ablate(RunCtx& ctx) {
    const std::string vae_path = cfg_str(ctx.cfg, "vae-checkpoint");
    const std::string inf_path = cfg_str(ctx.cfg, "inference-checkpoint");
    const std::string rob_path = cfg_str(ctx.cfg, "robust-checkpoint");
    const std::string stats_path = cfg_str(ctx.cfg, "stats");
    require_checkpoint("vae-checkpoint", vae_path);
    require_checkpoint("inference-checkpoint", inf_path);
    require_checkpoint("robust-checkpoint", rob_path);
    require_checkpoint("stats", stats_path);
    for (const auto& p : {vae_path, inf_path, rob_path, stats_path}) ctx.add_input(p);

    JointVae<float> vae = load_vae_checkpoint(vae_path);
    Classifier<float> inference = load_classifier_checkpoint(inf_path);
    Classifier<float> robust = load_classifier_checkpoint(rob_path);
    ClassLatentStats stats = load_stats_json(stats_path);

    const auto grid = parse_grid(cfg_str(ctx.cfg, "grid"));
    LabeledImageSet train = load_split(ctx, Split::Train, cfg_int(ctx.cfg, "train-count"));
    LabeledImageSet eval_set = load_split(ctx, Split::Test, cfg_int(ctx.cfg, "eval-count"));

    auto log = open_text(ctx.artifact("log.jsonl"));
    json rows = json::array();
    for (size_t i = 0; i < grid.size(); ++i) {
        const auto [alpha, beta] = grid[i];
        AttackConfig acfg;
        acfg.lambda_org = alpha;
        acfg.lambda_noised = beta;
        acfg.learned_coefficient = cfg_bool(ctx.cfg, "learned-coefficient");
        acfg.lambda0 = cfg_double(ctx.cfg, "lambda0");
        acfg.lambda1 = cfg_double(ctx.cfg, "lambda1");
        acfg.lambda2 = cfg_double(ctx.cfg, "lambda2");
        acfg.norm_choice = attack_norm_from_name(cfg_str(ctx.cfg, "norm"));
        acfg.target_mode = target_mode_from_name(cfg_str(ctx.cfg, "target-mode"));
        acfg.smoothmax_temp = cfg_double(ctx.cfg, "smoothmax-temp");
        acfg.param_budget = cfg_int(ctx.cfg, "param-budget");
        acfg.epochs = cfg_int(ctx.cfg, "epochs");
        acfg.batch_size = cfg_int(ctx.cfg, "batch-size");
        acfg.lr = cfg_double(ctx.cfg, "lr");
        acfg.seed = hash_seed(ctx.inv.seed, "ablate:" + std::to_string(i));

        log << json{{"event", "ablate_point"}, {"index", i}, {"alpha", alpha}, {"beta", beta}}.dump()
            << "\n";
        AttackTrainResult res = attack_train(vae, inference, stats, train, acfg, &log);

        const std::string ckpt = "point-" + std::to_string(i) + "-attack.ckpt";
        save_attack_checkpoint(res.networks, ctx.artifact(ckpt).string());
        add_checkpoint_outputs(ctx, ckpt);

        std::vector<AttackRecord> records = attack_apply(res.networks, vae, inference, stats,
                                                         eval_set.images, eval_set.labels, acfg);
        BlackBoxClassifier bb(robust);
        complete_with_test_predictions(bb, records);
        if (bb.gradient_queries() != 0)
            fail(ErrorCode::InvariantViolation, "the held-out classifier saw a gradient query");

        std::vector<uint8_t> flags;
        int64_t hits = 0;
        for (const AttackRecord& r : records) {
            flags.push_back(r.success ? 1 : 0);
            hits += r.test_pred_after == r.label;
        }
        int64_t param_count = 0;
        for (const auto& name : res.networks.params().names())
            param_count += res.networks.params().at(name).value().size();

        rows.push_back(json{{"alpha", alpha},
                            {"beta", beta},
                            {"params", param_count},
                            {"param_budget", acfg.param_budget},
                            {"success", success_json(metrics::success_rate(flags))},
                            {"accuracy_under_attack", double(hits) / double(records.size())}});
    }
    log.close();
    if (rows.size() != grid.size())
        fail(ErrorCode::InvariantViolation, "ablation produced the wrong number of rows");

    write_json_file(ctx.artifact("table.json"),
                    json{{"rows", rows}, {"eval_count", eval_set.count()}});
    ctx.add_output("log.jsonl");
    ctx.add_output("table.json");
}

// ---------------------------------------------------------------- report ----

// Reference values from the publication this toolkit reproduces; the report
// prints them beside our measurements. Percentages.
struct PublishedGridRow {
    double alpha, beta;
    const char* params;
    double accuracy, tol;
};
constexpr PublishedGridRow kPublishedGrid[] = {{0.6, 0.8, "12K", 70, 4},
                                               {0.5, 0.8, "12K", 69, 3},
                                               {0.3, 0.8, "12K", 67, 5},
                                               {0.1, 0.8, "12K", 60, 4},
                                               {0.0, 1.0, "12K", 50, 4}};
constexpr const char* kPublishedLatentSuccess = "~50% +/- 4%";
constexpr const char* kPublishedPgdSuccess = "10.4% (eps=0.3)";
constexpr const char* kPublishedRobustStandardAcc = "98.7%";
constexpr const char* kPublishedRobustRobustAcc = "98.4% (evaluation eps unstated)";
constexpr const char* kPublishedInferenceAcc = "97.5%";

struct LoadedRun {
    std::string dir;
    RunManifest manifest;
    json summary;  // summary.json or table.json, whichever the run wrote
};

void run_report(RunCtx& ctx) {
    std::vector<LoadedRun> runs;
    for (const std::string& raw : split(cfg_str(ctx.cfg, "runs"), ';')) {
        const std::string dir = trim(raw);
        if (dir.empty()) continue;
        LoadedRun run;
        run.dir = dir;
        run.manifest = read_manifest(dir);
        verify_manifest_digests(run.manifest);
        const fs::path summary = fs::path(dir) / "summary.json";
        const fs::path table = fs::path(dir) / "table.json";
        if (fs::exists(summary)) run.summary = read_json_file(summary);
        else if (fs::exists(table)) run.summary = read_json_file(table);
        ctx.add_input((fs::path(dir) / "manifest.json").string());
        runs.push_back(std::move(run));
    }

    auto find_run = [&runs](const char* subcommand) -> const LoadedRun* {
        for (const auto& r : runs)
            if (r.manifest.subcommand == subcommand) return &r;
        return nullptr;
    };
    const LoadedRun* eval_run = find_run("evaluate");
    const LoadedRun* pgd_run = find_run("baseline-pgd");
    const LoadedRun* ablate_run = find_run("ablate");

    json out{{"attack_success", json::array()},
             {"tuning_grid", json::array()},
             {"classifier_accuracy", json::array()}};
    std::ostringstream md;
    md << "# Results against the published reference values\n\n";
    md << "Every measured number is backed by the manifest of the run directory named in its "
          "row; rows whose run is missing are marked absent.\n\n";

    md << "## Attack success on MNIST (robust test classifier)\n\n";
    md << "| attack | published | measured | source |\n";
    md << "|---|---|---|---|\n";
    {
        std::string measured = "absent", source = "-";
        json jm = nullptr;
        if (eval_run) {
            const json& s = eval_run->summary.at("success");
            measured = pct(s.at("rate").get<double>()) + " [" + pct(s.at("ci95_lo").get<double>()) +
                       ", " + pct(s.at("ci95_hi").get<double>()) + "]";
            source = fs::path(eval_run->dir).filename().string();
            jm = s;
        }
        md << "| latent poisoning | " << kPublishedLatentSuccess << " | " << measured << " | "
           << source << " |\n";
        out["attack_success"].push_back(
            json{{"attack", "latent-poisoning"}, {"published", kPublishedLatentSuccess},
                 {"measured", jm}, {"source", eval_run ? eval_run->dir : ""}});
    }
    {
        std::string measured = "absent", source = "-";
        json jm = nullptr;
        if (pgd_run) {
            const json& s = pgd_run->summary.at("robust").at("success");
            measured = pct(s.at("rate").get<double>()) + " (eps=" +
                       num_str(pgd_run->summary.at("epsilon").get<double>()) + ")";
            source = fs::path(pgd_run->dir).filename().string();
            jm = s;
        }
        md << "| 20-step PGD | " << kPublishedPgdSuccess << " | " << measured << " | " << source
           << " |\n";
        out["attack_success"].push_back(json{{"attack", "pgd"}, {"published", kPublishedPgdSuccess},
                                             {"measured", jm},
                                             {"source", pgd_run ? pgd_run->dir : ""}});
    }

    md << "\n## Hyperparameter grid (12K parameter budget)\n\n";
    md << "| alpha | beta | params | published accuracy | measured accuracy | source |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const PublishedGridRow& row : kPublishedGrid) {
        std::string measured = "absent", source = "-";
        json jm = nullptr;
        if (ablate_run) {
            for (const json& r : ablate_run->summary.at("rows")) {
                if (std::abs(r.at("alpha").get<double>() - row.alpha) < 1e-9 &&
                    std::abs(r.at("beta").get<double>() - row.beta) < 1e-9) {
                    measured = pct(r.at("accuracy_under_attack").get<double>());
                    source = fs::path(ablate_run->dir).filename().string();
                    jm = r;
                    break;
                }
            }
        }
        char pub[48];
        std::snprintf(pub, sizeof(pub), "~%.0f%% +/- %.0f%%", row.accuracy, row.tol);
        md << "| " << num_str(row.alpha) << " | " << num_str(row.beta) << " | " << row.params
           << " | " << pub << " | " << measured << " | " << source << " |\n";
        out["tuning_grid"].push_back(json{{"alpha", row.alpha},
                                          {"beta", row.beta},
                                          {"params", row.params},
                                          {"published_accuracy_pct", row.accuracy},
                                          {"published_tolerance_pct", row.tol},
                                          {"measured", jm},
                                          {"source", ablate_run ? ablate_run->dir : ""}});
    }

    md << "\n## Classifier accuracies (MNIST)\n\n";
    md << "| model | published | measured | source |\n";
    md << "|---|---|---|---|\n";
    auto acc_row = [&](const char* label, const char* published, const json* value,
                       const std::string& source_dir) {
        std::string measured = "absent", source = "-";
        json jm = nullptr;
        if (value) {
            measured = pct(value->get<double>());
            source = fs::path(source_dir).filename().string();
            jm = *value;
        }
        md << "| " << label << " | " << published << " | " << measured << " | " << source
           << " |\n";
        out["classifier_accuracy"].push_back(json{{"model", label},
                                                  {"published", published},
                                                  {"measured", jm},
                                                  {"source", value ? source_dir : ""}});
    };
    json j_rob_std, j_rob_pgd, j_inf;
    const json* p_rob_std = nullptr;
    const json* p_rob_pgd = nullptr;
    const json* p_inf = nullptr;
    if (eval_run) {
        j_rob_std = eval_run->summary.at("accuracy").at("robust_standard_acc");
        j_inf = eval_run->summary.at("accuracy").at("inference_test_acc");
        p_rob_std = &j_rob_std;
        p_inf = &j_inf;
    }
    if (pgd_run) {
        j_rob_pgd = pgd_run->summary.at("robust").at("acc_under_pgd");
        p_rob_pgd = &j_rob_pgd;
    }
    acc_row("robust classifier, standard accuracy", kPublishedRobustStandardAcc, p_rob_std,
            eval_run ? eval_run->dir : "");
    acc_row("robust classifier, accuracy under PGD", kPublishedRobustRobustAcc, p_rob_pgd,
            pgd_run ? pgd_run->dir : "");
    acc_row("inference classifier, standard accuracy", kPublishedInferenceAcc, p_inf,
            eval_run ? eval_run->dir : "");

    {
        auto f = open_text(ctx.artifact("report.md"));
        f << md.str();
    }
    write_json_file(ctx.artifact("report.json"), out);
    ctx.add_output("report.md");
    ctx.add_output("report.json");
}

}  // namespace

// ----------------------------------------------------------- config impl ----

ConfigData parse_config_text(const std::string& text) {
    ConfigData data;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int64_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                fail(ErrorCode::ConfigError,
                     "line " + std::to_string(lineno) + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                fail(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": empty section name");
            if (data.sections.count(section))
                fail(ErrorCode::ConfigError,
                     "line " + std::to_string(lineno) + ": duplicate section [" + section + "]");
            data.sections[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::ConfigError,
                 "line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
        if (section.empty())
            fail(ErrorCode::ConfigError,
                 "line " + std::to_string(lineno) + ": key outside any [section]");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            fail(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": empty key");
        auto& sec = data.sections[section];
        if (sec.count(key))
            fail(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": duplicate key '" +
                                             key + "' in [" + section + "]");
        sec[key] = value;
    }
    return data;
}

ConfigData load_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::MissingFile, "config file does not exist: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

const std::map<std::string, std::map<std::string, std::string>>& config_schema() {
    static const auto schema = build_schema();
    return schema;
}

std::map<std::string, std::string> resolve_section(const ConfigData& file,
                                                   const std::string& section,
                                                   const std::vector<std::string>& overrides) {
    const auto& schema = config_schema();
    const auto sec_it = schema.find(section);
    if (sec_it == schema.end())
        fail(ErrorCode::ConfigError, "unknown subcommand section [" + section + "]");

    // The whole file must stay inside the schema, not just the active section.
    for (const auto& [name, keys] : file.sections) {
        const auto it = schema.find(name);
        if (it == schema.end())
            fail(ErrorCode::ConfigError, "unknown config section [" + name + "]");
        for (const auto& [k, v] : keys)
            if (!it->second.count(k))
                fail(ErrorCode::ConfigError, "unknown config key '" + k + "' in [" + name + "]");
    }

    std::map<std::string, std::string> out = sec_it->second;
    const auto file_it = file.sections.find(section);
    if (file_it != file.sections.end())
        for (const auto& [k, v] : file_it->second) out[k] = v;

    for (const std::string& ov : overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::ConfigError, "override '" + ov + "' is not of the form key=value");
        std::string key = trim(ov.substr(0, eq));
        const std::string value = trim(ov.substr(eq + 1));
        const size_t dot = key.find('.');
        if (dot != std::string::npos) {
            const std::string target = key.substr(0, dot);
            if (target != section)
                fail(ErrorCode::ConfigError, "override '" + ov + "' targets [" + target +
                                                 "] but the active subcommand is " + section);
            key = key.substr(dot + 1);
        }
        if (!sec_it->second.count(key))
            fail(ErrorCode::ConfigError, "unknown override key '" + key + "' for [" + section + "]");
        out[key] = value;
    }
    return out;
}

int64_t cfg_int(const std::map<std::string, std::string>& cfg, const std::string& key) {
    const std::string& v = cfg_str(cfg, key);
    int64_t out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size())
        fail(ErrorCode::ConfigError, "key '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

double cfg_double(const std::map<std::string, std::string>& cfg, const std::string& key) {
    const std::string& v = cfg_str(cfg, key);
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail(ErrorCode::ConfigError, "key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool cfg_bool(const std::map<std::string, std::string>& cfg, const std::string& key) {
    const std::string& v = cfg_str(cfg, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(ErrorCode::ConfigError, "key '" + key + "' expects true/false, got '" + v + "'");
}

const std::string& cfg_str(const std::map<std::string, std::string>& cfg, const std::string& key) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) fail(ErrorCode::ConfigError, "missing config key '" + key + "'");
    return it->second;
}

// --------------------------------------------------------- manifest impl ----

std::string file_crc32(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::MissingFile, "cannot digest missing file: " + path);
    uLong c = crc32(0L, Z_NULL, 0);
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        const std::streamsize got = f.gcount();
        if (got > 0) c = crc32(c, reinterpret_cast<const Bytef*>(buf), uInt(got));
    }
    return hex32(uint32_t(c));
}

void write_manifest(const RunManifest& m, const std::string& out_dir) {
    json refs = json::array();
    for (const ArtifactRef& r : m.inputs) refs.push_back({{"path", r.path}, {"crc32", r.crc32}});
    json outs = json::array();
    for (const ArtifactRef& r : m.outputs) outs.push_back({{"path", r.path}, {"crc32", r.crc32}});
    json j{{"subcommand", m.subcommand}, {"version", m.version},
           {"seed", m.seed},           {"data_root", m.data_root},
           {"out_dir", m.out_dir},     {"config", m.config},
           {"inputs", refs},           {"outputs", outs},
           {"wall_seconds", m.wall_seconds}};
    write_json_file(fs::path(out_dir) / "manifest.json", j);
}

RunManifest read_manifest(const std::string& out_dir) {
    const json j = read_json_file(fs::path(out_dir) / "manifest.json");
    RunManifest m;
    try {
        m.subcommand = j.at("subcommand").get<std::string>();
        m.version = j.at("version").get<std::string>();
        m.seed = j.at("seed").get<uint64_t>();
        m.data_root = j.at("data_root").get<std::string>();
        m.out_dir = out_dir;  // trust the location it was read from, not the recorded path
        m.config = j.at("config").get<std::map<std::string, std::string>>();
        for (const json& r : j.at("inputs"))
            m.inputs.push_back({r.at("path").get<std::string>(), r.at("crc32").get<std::string>()});
        for (const json& r : j.at("outputs"))
            m.outputs.push_back({r.at("path").get<std::string>(), r.at("crc32").get<std::string>()});
        m.wall_seconds = j.at("wall_seconds").get<double>();
    } catch (const json::exception& e) {
        fail(ErrorCode::CorruptFile, out_dir + "/manifest.json: " + e.what());
    }
    return m;
}

void verify_manifest_digests(const RunManifest& m) {
    for (const ArtifactRef& r : m.outputs) {
        const std::string path = (fs::path(m.out_dir) / r.path).string();
        const std::string got = file_crc32(path);
        if (got != r.crc32)
            fail(ErrorCode::CorruptFile, "artifact " + path + " digest " + got +
                                             " does not match the manifest's " + r.crc32);
    }
}

// -------------------------------------------------------------- pgm impl ----

void emit_grid(const Tensor<float>& images, const std::vector<std::string>& captions,
               const std::string& path, int64_t columns) {
    if (images.size() == 0) fail(ErrorCode::EmptyInput, "emit_grid: empty batch");
    int64_t n = 0, h = 0, w = 0;
    if (images.ndim() == 3) {
        n = images.dim(0);
        h = images.dim(1);
        w = images.dim(2);
    } else if (images.ndim() == 2) {
        n = images.dim(0);
        const auto side = int64_t(std::llround(std::sqrt(double(images.dim(1)))));
        if (side * side != images.dim(1))
            fail(ErrorCode::ShapeMismatch, "emit_grid: flattened images must be square");
        h = w = side;
    } else {
        fail(ErrorCode::ShapeMismatch, "emit_grid: expected [N,H,W] or [N,D]");
    }
    if (!captions.empty() && int64_t(captions.size()) != n)
        fail(ErrorCode::ShapeMismatch, "emit_grid: got " + std::to_string(captions.size()) +
                                           " captions for " + std::to_string(n) + " tiles");

    const int64_t cols = columns > 0 ? std::min(columns, n) : n;
    const int64_t rows = (n + cols - 1) / cols;
    const int64_t width = cols * w + (cols - 1);
    const int64_t height = rows * h + (rows - 1);
    constexpr uint8_t kSeparator = 128;

    std::vector<uint8_t> canvas(size_t(width * height), 0);
    // Horizontal and vertical 1-pixel separator lines between tiles.
    for (int64_t r = 1; r < rows; ++r)
        for (int64_t x = 0; x < width; ++x) canvas[size_t((r * (h + 1) - 1) * width + x)] = kSeparator;
    for (int64_t c = 1; c < cols; ++c)
        for (int64_t y = 0; y < height; ++y) canvas[size_t(y * width + c * (w + 1) - 1)] = kSeparator;

    for (int64_t i = 0; i < n; ++i) {
        const int64_t r = i / cols, c = i % cols;
        const int64_t y0 = r * (h + 1), x0 = c * (w + 1);
        const float* tile = images.data() + i * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                canvas[size_t((y0 + y) * width + (x0 + x))] = quantize_pixel(tile[y * w + x]);
    }

    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) fail(ErrorCode::IoError, "cannot open for writing: " + path);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(canvas.data()), std::streamsize(canvas.size()));
    if (!f) fail(ErrorCode::IoError, "failed writing " + path);
    f.close();

    if (!captions.empty()) {
        fs::path sidecar = p;
        sidecar.replace_extension(".txt");
        auto s = open_text(sidecar);
        for (int64_t i = 0; i < n; ++i) s << i << "\t" << captions[size_t(i)] << "\n";
    }
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::MissingFile, "cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5") fail(ErrorCode::BadMagic, path + " is not a binary PGM (P5)");
    auto next_int = [&f, &path]() -> int64_t {
        // Skip whitespace and '#' comment lines, then read one decimal value.
        int ch = f.get();
        while (ch != EOF && (std::isspace(ch) || ch == '#')) {
            if (ch == '#')
                while (ch != EOF && ch != '\n') ch = f.get();
            ch = f.get();
        }
        int64_t v = -1;
        if (ch == EOF || !std::isdigit(ch)) fail(ErrorCode::CorruptFile, path + ": malformed header");
        v = ch - '0';
        while (std::isdigit(f.peek())) v = v * 10 + (f.get() - '0');
        return v;
    };
    PgmImage img;
    img.width = next_int();
    img.height = next_int();
    if (img.width <= 0 || img.height <= 0)
        fail(ErrorCode::CorruptFile, path + ": zero-sized image");
    const int64_t maxval = next_int();
    if (maxval != 255) fail(ErrorCode::CorruptFile, path + ": expected maxval 255");
    const int sep = f.get();
    if (sep == EOF || !std::isspace(sep)) fail(ErrorCode::CorruptFile, path + ": malformed header");
    img.bytes.resize(size_t(img.width * img.height));
    f.read(reinterpret_cast<char*>(img.bytes.data()), std::streamsize(img.bytes.size()));
    if (f.gcount() != std::streamsize(img.bytes.size()))
        fail(ErrorCode::TruncatedPayload, path + ": payload shorter than the header promises");
    if (f.get() != EOF) fail(ErrorCode::CorruptFile, path + ": trailing bytes after the payload");
    return img;
}

// ------------------------------------------------------------- run entry ----

int run(const Invocation& inv) {
    fs::path out(inv.out_dir);
    try {
        if (inv.out_dir.empty()) fail(ErrorCode::ConfigError, "--out-dir is required");
        fs::create_directories(out);
        // A rerun into the same directory must not leave stale status behind:
        // manifest.json only ever describes the run that just finished.
        fs::remove(out / "manifest.json");
        fs::remove(out / "error.json");

        const auto t0 = std::chrono::steady_clock::now();
        RunCtx ctx;
        ctx.inv = inv;
        ctx.out = out;
        ConfigData file;
        if (!inv.config_path.empty()) file = load_config_file(inv.config_path);
        ctx.cfg = resolve_section(file, inv.subcommand, inv.overrides);
        ctx.manifest.subcommand = inv.subcommand;
        ctx.manifest.seed = inv.seed;
        ctx.manifest.data_root = inv.data_root;
        ctx.manifest.out_dir = inv.out_dir;
        ctx.manifest.config = ctx.cfg;

        if (inv.subcommand == "train-vae") run_train_vae(ctx);
        else if (inv.subcommand == "train-inference") run_train_classifier(ctx, false);
        else if (inv.subcommand == "train-robust") run_train_classifier(ctx, true);
        else if (inv.subcommand == "fit-stats") run_fit_stats(ctx);
        else if (inv.subcommand == "train-attack") run_train_attack(ctx);
        else if (inv.subcommand == "evaluate") run_evaluate(ctx);
        else if (inv.subcommand == "baseline-pgd") run_baseline_pgd(ctx);
        else if (inv.subcommand == "ablate") run_ablate(ctx);
        else if (inv.subcommand == "report") run_report(ctx);
        else fail(ErrorCode::ConfigError, "unknown subcommand: " + inv.subcommand);

        ctx.manifest.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_manifest(ctx.manifest, inv.out_dir);
        return 0;
    } catch (const Error& e) {
        const json err{{"error", error_code_name(e.code())},
                       {"message", e.what()},
                       {"subcommand", inv.subcommand}};
        std::cerr << err.dump() << "\n";
        if (!inv.out_dir.empty() && fs::exists(out)) {
            std::ofstream f(out / "error.json", std::ios::binary);
            if (f) f << err.dump(2) << "\n";
        }
        return 1;
    } catch (const std::exception& e) {
        const json err{{"error", "Unhandled"}, {"message", e.what()}, {"subcommand", inv.subcommand}};
        std::cerr << err.dump() << "\n";
        if (!inv.out_dir.empty() && fs::exists(out)) {
            std::ofstream f(out / "error.json", std::ios::binary);
            if (f) f << err.dump(2) << "\n";
        }
        return 1;
    }
}

int run_main(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_main(int(argv.size()), argv.data());
}

int run_main(int argc, const char* const* argv) {
    CLI::App app{"latent-space poisoning attack toolkit"};
    app.require_subcommand(1);

    Invocation inv;
    const char* env_root = std::getenv("LSP_DATA_ROOT");
    inv.data_root = env_root ? env_root : "data/mnist";

    const std::pair<const char*, const char*> table[] = {
        {"train-vae", "train the joint continuous/categorical autoencoder"},
        {"train-inference", "train the label-smoothed surrogate classifier"},
        {"train-robust", "adversarially train the held-out test classifier"},
        {"fit-stats", "fit per-class latent statistics with a frozen encoder"},
        {"train-attack", "train the latent-poisoning noise/coefficient networks"},
        {"evaluate", "run the attack on test images and summarize the results"},
        {"baseline-pgd", "measure the pixel-space PGD baseline"},
        {"ablate", "sweep the mixing-coefficient grid at a fixed budget"},
        {"report", "consolidate run directories into published-vs-measured tables"},
    };
    for (const auto& [name, desc] : table) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", inv.config_path, "sectioned key=value config file");
        sub->add_option("--seed", inv.seed, "root seed; every component derives from it");
        sub->add_option("--data-root", inv.data_root, "directory with the four MNIST files");
        sub->add_option("--out-dir", inv.out_dir, "run directory for artifacts")->required();
        sub->add_option("--override", inv.overrides, "key=value (repeatable)");
        const std::string name_copy = name;
        sub->callback([&inv, name_copy] { inv.subcommand = name_copy; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    return run(inv);
}

}  // namespace lsp::cli
