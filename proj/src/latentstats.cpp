#include "lsp/latentstats.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <string>

namespace lsp {

void ClassLatentStats::validate() const {
    if (classes < 1 || m < 1 || n < 1)
        fail(ErrorCode::InvariantViolation, "latent stats: empty dimension table");
    if (mu_z.shape() != Shape{classes, m} || sigma_z.shape() != Shape{classes, m} ||
        mu_c.shape() != Shape{classes, n} || sigma_c.shape() != Shape{classes, n})
        fail(ErrorCode::ShapeMismatch, "latent stats: tensor shapes disagree with table header");
    if (int64_t(counts.size()) != classes)
        fail(ErrorCode::ShapeMismatch, "latent stats: count vector length mismatch");
    for (int64_t k = 0; k < classes; ++k)
        if (counts[size_t(k)] <= 0)
            fail(ErrorCode::EmptyClass, "latent stats: class " + std::to_string(k) + " has no samples");
    for (int64_t i = 0; i < sigma_z.size(); ++i)
        if (!(sigma_z[i] >= 0))
            fail(ErrorCode::InvariantViolation, "latent stats: negative sigma_z entry");
    for (int64_t i = 0; i < sigma_c.size(); ++i)
        if (!(sigma_c[i] >= 0))
            fail(ErrorCode::InvariantViolation, "latent stats: negative sigma_c entry");
}

GaussianSpec gaussian_sum(const GaussianSpec& a, const GaussianSpec& b) {
    if (!(a.var > 0) || !(b.var > 0))
        fail(ErrorCode::PreconditionViolation, "gaussian_sum: variances must be positive");
    return {a.mu + b.mu, a.var + b.var};
}

StreamingMoments::StreamingMoments(int64_t dims)
    : dims_(dims), sum_(size_t(dims), 0.0), sum_comp_(size_t(dims), 0.0),
      sumsq_(size_t(dims), 0.0), sumsq_comp_(size_t(dims), 0.0) {
    if (dims < 1) fail(ErrorCode::PreconditionViolation, "moments: dims must be >= 1");
}

namespace {

inline void kahan_add(double& sum, double& comp, double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
}

}  // namespace

void StreamingMoments::add(const float* row) {
    for (int64_t d = 0; d < dims_; ++d) {
        const double v = double(row[d]);
        kahan_add(sum_[size_t(d)], sum_comp_[size_t(d)], v);
        kahan_add(sumsq_[size_t(d)], sumsq_comp_[size_t(d)], v * v);
    }
    ++count_;
}

void StreamingMoments::merge(const StreamingMoments& other) {
    if (other.dims_ != dims_)
        fail(ErrorCode::ShapeMismatch, "moments: merging accumulators of different widths");
    for (int64_t d = 0; d < dims_; ++d) {
        kahan_add(sum_[size_t(d)], sum_comp_[size_t(d)], other.sum_[size_t(d)]);
        kahan_add(sumsq_[size_t(d)], sumsq_comp_[size_t(d)], other.sumsq_[size_t(d)]);
    }
    count_ += other.count_;
}

void StreamingMoments::finalize(std::vector<double>& mean, std::vector<double>& stddev) const {
    if (count_ < 1) fail(ErrorCode::EmptyClass, "moments: no samples accumulated");
    mean.assign(size_t(dims_), 0.0);
    stddev.assign(size_t(dims_), 0.0);
    for (int64_t d = 0; d < dims_; ++d) {
        const double mu = sum_[size_t(d)] / double(count_);
        // E[x^2] - mu^2 can go a hair negative from rounding; clamp at zero.
        const double var = std::max(0.0, sumsq_[size_t(d)] / double(count_) - mu * mu);
        mean[size_t(d)] = mu;
        stddev[size_t(d)] = std::sqrt(var);
    }
}

ClassLatentStats fit_class_stats(const JointVae<float>& vae, const LabeledImageSet& set,
                                 const FitStatsConfig& cfg) {
    if (cfg.classes < 1) fail(ErrorCode::ConfigError, "fit_class_stats: classes must be >= 1");
    if (set.split != Split::Train)
        fail(ErrorCode::PreconditionViolation, "fit_class_stats: statistics come from the train split");
    if (set.count() == 0) fail(ErrorCode::EmptyInput, "fit_class_stats: empty dataset");
    if (int64_t(set.labels.size()) != set.count())
        fail(ErrorCode::ShapeMismatch, "fit_class_stats: dataset is missing labels");

    const VaeConfig& vc = vae.config();
    std::vector<StreamingMoments> zm(size_t(cfg.classes), StreamingMoments(vc.m));
    std::vector<StreamingMoments> cm(size_t(cfg.classes), StreamingMoments(vc.n));

    Rng noise(hash_seed(cfg.seed, "stats:noise"));
    BatchIter iter(set, cfg.batch_size, 0, /*shuffle=*/false);
    Tensor<float> images;
    std::vector<int32_t> labels;
    while (iter.next(images, labels)) {
        const int64_t b = images.dim(0);
        auto post = vae.encode(ag::Var<float>::constant(images));
        Tensor<float> zrows, crows;
        if (cfg.sampled_latents) {
            auto lat = vae.sample_latent(post, draw_noise_tape<float>(noise, b, vc));
            zrows = lat.z.value();
            crows = lat.c.value();
        } else {
            zrows = post.mu_z.value();
            crows = ops::softmax_rows<float>(post.c_logits.value());
        }
        for (int64_t i = 0; i < b; ++i) {
            const int32_t y = labels[size_t(i)];
            if (y < 0 || y >= cfg.classes)
                fail(ErrorCode::InvalidClass, "fit_class_stats: label out of range");
            zm[size_t(y)].add(&zrows[i * vc.m]);
            cm[size_t(y)].add(&crows[i * vc.n]);
        }
    }

    ClassLatentStats stats;
    stats.classes = cfg.classes;
    stats.m = vc.m;
    stats.n = vc.n;
    stats.mu_z = Tensor<float>({cfg.classes, vc.m});
    stats.sigma_z = Tensor<float>({cfg.classes, vc.m});
    stats.mu_c = Tensor<float>({cfg.classes, vc.n});
    stats.sigma_c = Tensor<float>({cfg.classes, vc.n});
    stats.counts.assign(size_t(cfg.classes), 0);
    std::vector<double> mean, stddev;
    for (int64_t k = 0; k < cfg.classes; ++k) {
        if (zm[size_t(k)].count() == 0)
            fail(ErrorCode::EmptyClass,
                 "fit_class_stats: class " + std::to_string(k) + " has no samples");
        stats.counts[size_t(k)] = zm[size_t(k)].count();
        zm[size_t(k)].finalize(mean, stddev);
        for (int64_t d = 0; d < vc.m; ++d) {
            stats.mu_z[k * vc.m + d] = float(mean[size_t(d)]);
            stats.sigma_z[k * vc.m + d] = float(stddev[size_t(d)]);
        }
        cm[size_t(k)].finalize(mean, stddev);
        for (int64_t d = 0; d < vc.n; ++d) {
            stats.mu_c[k * vc.n + d] = float(mean[size_t(d)]);
            stats.sigma_c[k * vc.n + d] = float(stddev[size_t(d)]);
        }
    }
    stats.validate();
    return stats;
}

std::pair<Tensor<float>, Tensor<float>> sample_class_latent(const ClassLatentStats& stats,
                                                            int64_t class_id,
                                                            const Tensor<float>& eta_z,
                                                            const Tensor<float>& eta_c) {
    stats.validate();
    if (class_id < 0 || class_id >= stats.classes)
        fail(ErrorCode::InvalidClass, "sample_class_latent: class " + std::to_string(class_id));
    if (eta_z.shape() != Shape{stats.m} || eta_c.shape() != Shape{stats.n})
        fail(ErrorCode::ShapeMismatch, "sample_class_latent: eta vectors must be [m] and [n]");
    Tensor<float> z({stats.m}), c({stats.n});
    for (int64_t d = 0; d < stats.m; ++d)
        z[d] = stats.mu_z[class_id * stats.m + d] + eta_z[d] * stats.sigma_z[class_id * stats.m + d];
    for (int64_t d = 0; d < stats.n; ++d)
        c[d] = stats.mu_c[class_id * stats.n + d] + eta_c[d] * stats.sigma_c[class_id * stats.n + d];
    return {std::move(z), std::move(c)};
}

std::pair<Tensor<float>, Tensor<float>> sample_class_latent_rows(
    const ClassLatentStats& stats, const std::vector<int32_t>& class_ids,
    const Tensor<float>& eta_z, const Tensor<float>& eta_c) {
    stats.validate();
    const int64_t nrows = int64_t(class_ids.size());
    if (eta_z.shape() != Shape{nrows, stats.m} || eta_c.shape() != Shape{nrows, stats.n})
        fail(ErrorCode::ShapeMismatch, "sample_class_latent_rows: eta shape mismatch");
    Tensor<float> z({nrows, stats.m}), c({nrows, stats.n});
    for (int64_t i = 0; i < nrows; ++i) {
        const int32_t k = class_ids[size_t(i)];
        if (k < 0 || k >= stats.classes)
            fail(ErrorCode::InvalidClass, "sample_class_latent_rows: class " + std::to_string(k));
        for (int64_t d = 0; d < stats.m; ++d)
            z[i * stats.m + d] =
                stats.mu_z[k * stats.m + d] + eta_z[i * stats.m + d] * stats.sigma_z[k * stats.m + d];
        for (int64_t d = 0; d < stats.n; ++d)
            c[i * stats.n + d] =
                stats.mu_c[k * stats.n + d] + eta_c[i * stats.n + d] * stats.sigma_c[k * stats.n + d];
    }
    return {std::move(z), std::move(c)};
}

namespace {

nlohmann::json tensor_rows_json(const Tensor<float>& t) {
    nlohmann::json rows = nlohmann::json::array();
    const int64_t r = t.dim(0), c = t.dim(1);
    for (int64_t i = 0; i < r; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int64_t j = 0; j < c; ++j) row.push_back(double(t[i * c + j]));
        rows.push_back(std::move(row));
    }
    return rows;
}

Tensor<float> tensor_rows_from_json(const nlohmann::json& rows, int64_t r, int64_t c,
                                    const char* field) {
    if (!rows.is_array() || int64_t(rows.size()) != r)
        fail(ErrorCode::CorruptFile, std::string("latent stats json: bad row count in ") + field);
    Tensor<float> t({r, c});
    for (int64_t i = 0; i < r; ++i) {
        const auto& row = rows[size_t(i)];
        if (!row.is_array() || int64_t(row.size()) != c)
            fail(ErrorCode::CorruptFile, std::string("latent stats json: bad row width in ") + field);
        for (int64_t j = 0; j < c; ++j) t[i * c + j] = float(row[size_t(j)].get<double>());
    }
    return t;
}

}  // namespace

void save_stats_json(const ClassLatentStats& stats, const std::string& path) {
    stats.validate();
    nlohmann::json doc;
    doc["format"] = "class-latent-stats";
    doc["version"] = 1;
    doc["classes"] = stats.classes;
    doc["m"] = stats.m;
    doc["n"] = stats.n;
    doc["counts"] = stats.counts;
    doc["mu_z"] = tensor_rows_json(stats.mu_z);
    doc["sigma_z"] = tensor_rows_json(stats.sigma_z);
    doc["mu_c"] = tensor_rows_json(stats.mu_c);
    doc["sigma_c"] = tensor_rows_json(stats.sigma_c);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot open " + path + " for writing");
    out << doc.dump(2) << "\n";
    if (!out) fail(ErrorCode::IoError, "short write to " + path);
}

ClassLatentStats load_stats_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::CorruptFile, "latent stats json: " + std::string(e.what()));
    }
    if (doc.value("format", "") != "class-latent-stats")
        fail(ErrorCode::CorruptFile, "latent stats json: wrong format tag");
    if (doc.value("version", 0) != 1)
        fail(ErrorCode::VersionMismatch, "latent stats json: unsupported version");

    ClassLatentStats stats;
    try {
        stats.classes = doc.at("classes").get<int64_t>();
        stats.m = doc.at("m").get<int64_t>();
        stats.n = doc.at("n").get<int64_t>();
        stats.counts = doc.at("counts").get<std::vector<int64_t>>();
        stats.mu_z = tensor_rows_from_json(doc.at("mu_z"), stats.classes, stats.m, "mu_z");
        stats.sigma_z = tensor_rows_from_json(doc.at("sigma_z"), stats.classes, stats.m, "sigma_z");
        stats.mu_c = tensor_rows_from_json(doc.at("mu_c"), stats.classes, stats.n, "mu_c");
        stats.sigma_c = tensor_rows_from_json(doc.at("sigma_c"), stats.classes, stats.n, "sigma_c");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::CorruptFile, "latent stats json: " + std::string(e.what()));
    }
    stats.validate();
    return stats;
}

}  // namespace lsp
