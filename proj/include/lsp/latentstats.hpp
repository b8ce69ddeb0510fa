#pragma once

#include "lsp/dataio.hpp"
#include "lsp/tensor.hpp"
#include "lsp/vae.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace lsp {

// Per-class first and second moments of the encoder's latent outputs:
// continuous statistics over posterior means, categorical statistics over
// softmax(c_logits). Sigmas are population standard deviations.
struct ClassLatentStats {
    int64_t classes = 0, m = 0, n = 0;
    Tensor<float> mu_z, sigma_z;  // [K, m]
    Tensor<float> mu_c, sigma_c;  // [K, n]
    std::vector<int64_t> counts;  // [K], all > 0

    void validate() const;
};

struct GaussianSpec {
    double mu = 0;
    double var = 1;  // > 0
};

// Sum of independent Gaussians: means add, variances add.
GaussianSpec gaussian_sum(const GaussianSpec& a, const GaussianSpec& b);

// Streaming per-dimension mean/population-std with compensated summation, so
// the result is order-invariant to well below 1e-9.
class StreamingMoments {
public:
    explicit StreamingMoments(int64_t dims);

    void add(const float* row);
    void merge(const StreamingMoments& other);
    int64_t count() const { return count_; }
    // mean and population std per dimension; count must be > 0.
    void finalize(std::vector<double>& mean, std::vector<double>& stddev) const;

private:
    int64_t dims_ = 0;
    int64_t count_ = 0;
    std::vector<double> sum_, sum_comp_;      // Kahan pair for the first moment
    std::vector<double> sumsq_, sumsq_comp_;  // Kahan pair for the second moment
};

struct FitStatsConfig {
    int64_t classes = 10;
    int64_t batch_size = 256;
    bool sampled_latents = false;  // draw one reparameterized sample per image
    uint64_t seed = 0;             // only used in sampled mode
};

// One streaming pass over the train split through a frozen encoder.
ClassLatentStats fit_class_stats(const JointVae<float>& vae, const LabeledImageSet& set,
                                 const FitStatsConfig& cfg);

// z' = mu_z[class] + eta_z * sigma_z[class], same for c'; the categorical
// vector is intentionally left off the simplex (mixing renormalizes later).
std::pair<Tensor<float>, Tensor<float>> sample_class_latent(const ClassLatentStats& stats,
                                                            int64_t class_id,
                                                            const Tensor<float>& eta_z,
                                                            const Tensor<float>& eta_c);

// Batched form: one target class per row of eta_z [N,m] / eta_c [N,n].
std::pair<Tensor<float>, Tensor<float>> sample_class_latent_rows(
    const ClassLatentStats& stats, const std::vector<int32_t>& class_ids,
    const Tensor<float>& eta_z, const Tensor<float>& eta_c);

void save_stats_json(const ClassLatentStats& stats, const std::string& path);
ClassLatentStats load_stats_json(const std::string& path);

}  // namespace lsp
