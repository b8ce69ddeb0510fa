#include "lsp/metrics.hpp"

#include <cmath>

namespace lsp::metrics {

namespace {

struct Moments {
    double ux = 0, uy = 0, vx = 0, vy = 0, cov = 0;
};

double ssim_from_moments(const Moments& m, double c1, double c2) {
    const double num = (2 * m.ux * m.uy + c1) * (2 * m.cov + c2);
    const double den = (m.ux * m.ux + m.uy * m.uy + c1) * (m.vx + m.vy + c2);
    return num / den;
}

template <class S>
double ssim_global(const Tensor<S>& x, const Tensor<S>& y, double c1, double c2) {
    const int64_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double a = static_cast<double>(x[i]);
        const double b = static_cast<double>(y[i]);
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    Moments m;
    m.ux = sx / n;
    m.uy = sy / n;
    m.vx = sxx / n - m.ux * m.ux;
    m.vy = syy / n - m.uy * m.uy;
    m.cov = sxy / n - m.ux * m.uy;
    return ssim_from_moments(m, c1, c2);
}

constexpr int kWin = 7;

const double* gaussian_window() {
    static double w[kWin * kWin];
    static bool built = false;
    if (!built) {
        const double sigma = 1.5;
        double sum = 0;
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                const double dy = i - kWin / 2, dx = j - kWin / 2;
                w[i * kWin + j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                sum += w[i * kWin + j];
            }
        for (double& v : w) v /= sum;
        built = true;
    }
    return w;
}

template <class S>
double ssim_windowed(const Tensor<S>& x, const Tensor<S>& y, double c1, double c2) {
    const size_t nd = x.ndim();
    if (nd < 2) fail(ErrorCode::PreconditionViolation, "windowed ssim needs a 2-d image");
    const int64_t h = x.dim(nd - 2), w = x.dim(nd - 1);
    if (x.size() != h * w)
        fail(ErrorCode::PreconditionViolation, "windowed ssim takes one image at a time");
    if (h < kWin || w < kWin)
        fail(ErrorCode::PreconditionViolation, "image smaller than the 7x7 ssim window");
    const double* win = gaussian_window();
    double total = 0;
    int64_t count = 0;
    for (int64_t oy = 0; oy + kWin <= h; ++oy)
        for (int64_t ox = 0; ox + kWin <= w; ++ox) {
            Moments m;
            double sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < kWin; ++i)
                for (int j = 0; j < kWin; ++j) {
                    const double wt = win[i * kWin + j];
                    const double a = static_cast<double>(x[(oy + i) * w + ox + j]);
                    const double b = static_cast<double>(y[(oy + i) * w + ox + j]);
                    m.ux += wt * a;
                    m.uy += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            m.vx = sxx - m.ux * m.ux;
            m.vy = syy - m.uy * m.uy;
            m.cov = sxy - m.ux * m.uy;
            total += ssim_from_moments(m, c1, c2);
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace

template <class S>
double ssim(const Tensor<S>& x, const Tensor<S>& y, const SsimConfig& cfg) {
    check_same_shape(x, y, "ssim");
    if (x.size() == 0) fail(ErrorCode::EmptyInput, "ssim of empty tensors");
    const double c1 = (cfg.k1 * cfg.L) * (cfg.k1 * cfg.L);
    const double c2 = (cfg.k2 * cfg.L) * (cfg.k2 * cfg.L);
    return cfg.mode == SsimConfig::Mode::Global ? ssim_global(x, y, c1, c2)
                                                : ssim_windowed(x, y, c1, c2);
}

template <class S>
double dssim(const Tensor<S>& x, const Tensor<S>& y, const SsimConfig& cfg) {
    return 1.0 - ssim(x, y, cfg);
}

template <class S>
ag::Var<S> ssim_global_rows(const ag::Var<S>& x, const ag::Var<S>& y, const SsimConfig& cfg) {
    check_same_shape(x.value(), y.value(), "ssim_global_rows");
    const S c1 = static_cast<S>((cfg.k1 * cfg.L) * (cfg.k1 * cfg.L));
    const S c2 = static_cast<S>((cfg.k2 * cfg.L) * (cfg.k2 * cfg.L));
    auto ux = ag::rowwise_mean(x);
    auto uy = ag::rowwise_mean(y);
    auto exx = ag::rowwise_mean(ag::mul(x, x));
    auto eyy = ag::rowwise_mean(ag::mul(y, y));
    auto exy = ag::rowwise_mean(ag::mul(x, y));
    auto vx = ag::sub(exx, ag::mul(ux, ux));
    auto vy = ag::sub(eyy, ag::mul(uy, uy));
    auto cov = ag::sub(exy, ag::mul(ux, uy));
    auto num = ag::mul(ag::add_scalar(ag::mul_scalar(ag::mul(ux, uy), S(2)), c1),
                       ag::add_scalar(ag::mul_scalar(cov, S(2)), c2));
    auto den = ag::mul(ag::add_scalar(ag::add(ag::mul(ux, ux), ag::mul(uy, uy)), c1),
                       ag::add_scalar(ag::add(vx, vy), c2));
    return ag::div(num, den);
}

template <class S>
double lp_distance(const Tensor<S>& x, const Tensor<S>& y, Norm norm) {
    check_same_shape(x, y, "lp_distance");
    if (norm == Norm::L2) {
        double acc = 0;
        for (int64_t i = 0; i < x.size(); ++i) {
            const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
            acc += d * d;
        }
        return std::sqrt(acc);
    }
    double mx = 0;
    for (int64_t i = 0; i < x.size(); ++i)
        mx = std::max(mx, std::abs(static_cast<double>(x[i]) - static_cast<double>(y[i])));
    return mx;
}

SuccessStats success_rate(const std::vector<uint8_t>& flags) {
    if (flags.empty()) fail(ErrorCode::EmptyInput, "success_rate of zero records");
    SuccessStats s;
    s.total = static_cast<int64_t>(flags.size());
    for (uint8_t f : flags) s.successes += f ? 1 : 0;
    const double n = static_cast<double>(s.total);
    const double p = static_cast<double>(s.successes) / n;
    s.rate = p;
    // Wilson score interval at 95%.
    const double z = 1.959963984540054;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2 * n)) / denom;
    const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom;
    s.lo = std::max(0.0, center - half);
    s.hi = std::min(1.0, center + half);
    return s;
}

#define LSP_INSTANTIATE_METRICS(S)                                                                \
    template double ssim<S>(const Tensor<S>&, const Tensor<S>&, const SsimConfig&);               \
    template double dssim<S>(const Tensor<S>&, const Tensor<S>&, const SsimConfig&);              \
    template ag::Var<S> ssim_global_rows<S>(const ag::Var<S>&, const ag::Var<S>&,                 \
                                            const SsimConfig&);                                   \
    template double lp_distance<S>(const Tensor<S>&, const Tensor<S>&, Norm);

LSP_INSTANTIATE_METRICS(float)
LSP_INSTANTIATE_METRICS(double)

}  // namespace lsp::metrics
