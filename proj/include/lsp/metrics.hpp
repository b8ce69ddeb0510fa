#pragma once

#include "lsp/autograd.hpp"
#include "lsp/tensor.hpp"

#include <vector>

namespace lsp::metrics {

// Structural similarity per the usual stabilized form: c1 = (k1*L)^2,
// c2 = (k2*L)^2 with L the pixel dynamic range. Global mode evaluates the
// formula once over all pixels (population statistics); windowed mode
// averages it over 7x7 Gaussian (sigma 1.5) windows and exists for reporting.
struct SsimConfig {
    double k1 = 0.01;
    double k2 = 0.03;
    double L = 1.0;
    enum class Mode { Global, Windowed };
    Mode mode = Mode::Global;
};

template <class S>
double ssim(const Tensor<S>& x, const Tensor<S>& y, const SsimConfig& cfg = {});

template <class S>
double dssim(const Tensor<S>& x, const Tensor<S>& y, const SsimConfig& cfg = {});

// Differentiable global SSIM for batches of flattened images; x, y are [N, D]
// and the result is [N]. Matches ssim() in global mode row by row.
template <class S>
ag::Var<S> ssim_global_rows(const ag::Var<S>& x, const ag::Var<S>& y, const SsimConfig& cfg = {});

enum class Norm { L2, Linf };

template <class S>
double lp_distance(const Tensor<S>& x, const Tensor<S>& y, Norm norm);

// Fraction of set flags with a Wilson 95% score interval.
struct SuccessStats {
    int64_t successes = 0;
    int64_t total = 0;
    double rate = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

SuccessStats success_rate(const std::vector<uint8_t>& flags);

}  // namespace lsp::metrics
