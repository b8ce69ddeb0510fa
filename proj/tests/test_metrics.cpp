#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsp/metrics.hpp"
#include "lsp/rng.hpp"

#include <cmath>
#include <numeric>

using lsp::Error;
using lsp::Rng;
using lsp::Tensor;
namespace mt = lsp::metrics;
namespace ag = lsp::ag;

namespace {

// Brute-force scalar evaluation of the stabilized similarity formula,
// independent of the library implementation.
double oracle_ssim(const std::vector<double>& x, const std::vector<double>& y, double L = 1.0) {
    const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
    const double n = static_cast<double>(x.size());
    double ux = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double uy = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double vx = 0, vy = 0, cov = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        vx += (x[i] - ux) * (x[i] - ux);
        vy += (y[i] - uy) * (y[i] - uy);
        cov += (x[i] - ux) * (y[i] - uy);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    return ((2 * ux * uy + c1) * (2 * cov + c2)) /
           ((ux * ux + uy * uy + c1) * (vx + vy + c2));
}

Tensor<double> from(const std::vector<double>& v, lsp::Shape s) { return Tensor<double>(std::move(s), v); }

}  // namespace

TEST_CASE("ssim of an image with itself is 1") {
    Rng r(1);
    Tensor<double> x({28, 28});
    r.fill_uniform(x, 0.0, 1.0);
    CHECK(mt::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(mt::dssim(x, x) == doctest::Approx(0.0).epsilon(1e-9));
    mt::SsimConfig wcfg;
    wcfg.mode = mt::SsimConfig::Mode::Windowed;
    CHECK(mt::ssim(x, x, wcfg) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("two equal constant images give 1") {
    Tensor<double> a({4, 4}, 0.37), b({4, 4}, 0.37);
    CHECK(mt::ssim(a, b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("checkerboard against its inverse: hand oracle") {
    // 0/1 checkerboard: means 0.5, variances 0.25, covariance -0.25. With
    // c1 = 1e-4, c2 = 9e-4 the formula gives
    // (0.5+1e-4)(-0.5+9e-4) / ((0.5+1e-4)(0.5+9e-4)) = -0.49910/0.50090.
    std::vector<double> x, y;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            x.push_back((i + j) % 2 ? 1.0 : 0.0);
            y.push_back((i + j) % 2 ? 0.0 : 1.0);
        }
    const double expect = (-0.5 + 9e-4) / (0.5 + 9e-4);
    CHECK(expect == doctest::Approx(-0.99640646).epsilon(1e-7));
    CHECK(oracle_ssim(x, y) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(mt::ssim(from(x, {8, 8}), from(y, {8, 8})) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("global ssim matches the brute-force oracle on random pairs") {
    Rng r(2);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(100), y(100);
        for (auto& v : x) v = r.uniform();
        for (auto& v : y) v = r.uniform();
        CHECK(mt::ssim(from(x, {10, 10}), from(y, {10, 10})) ==
              doctest::Approx(oracle_ssim(x, y)).epsilon(1e-12));
    }
}

TEST_CASE("ssim bounds, symmetry, permutation invariance") {
    Rng r(3);
    Tensor<double> x({6, 6}), y({6, 6});
    for (int trial = 0; trial < 20; ++trial) {
        r.fill_uniform(x, 0.0, 1.0);
        r.fill_uniform(y, 0.0, 1.0);
        const double s = mt::ssim(x, y);
        CHECK(std::abs(s) <= 1.0 + 1e-9);
        CHECK(mt::ssim(y, x) == doctest::Approx(s).epsilon(1e-12));
        const double d = mt::dssim(x, y);
        CHECK(d >= 0.0);
        CHECK(d <= 2.0);

        // Same permutation applied to both images leaves global stats alone.
        std::vector<int64_t> perm(36);
        std::iota(perm.begin(), perm.end(), 0);
        Rng(trial).shuffle(perm);
        Tensor<double> xp({6, 6}), yp({6, 6});
        for (int64_t i = 0; i < 36; ++i) {
            xp[i] = x[perm[static_cast<size_t>(i)]];
            yp[i] = y[perm[static_cast<size_t>(i)]];
        }
        CHECK(mt::ssim(xp, yp) == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("byte-range images use L=255") {
    // Scaling pixels and L together leaves the score invariant.
    Rng r(4);
    Tensor<double> x({5, 5}), y({5, 5});
    r.fill_uniform(x, 0.0, 1.0);
    r.fill_uniform(y, 0.0, 1.0);
    Tensor<double> xb = x, yb = y;
    for (int64_t i = 0; i < xb.size(); ++i) {
        xb[i] *= 255.0;
        yb[i] *= 255.0;
    }
    mt::SsimConfig byte_cfg;
    byte_cfg.L = 255.0;
    CHECK(mt::ssim(xb, yb, byte_cfg) == doctest::Approx(mt::ssim(x, y)).epsilon(1e-9));
}

TEST_CASE("shape mismatch and empty input rejected") {
    Tensor<double> a({2, 2}), b({2, 3});
    CHECK_THROWS_AS(mt::ssim(a, b), Error);
    Tensor<double> e1, e2;
    CHECK_THROWS_AS(mt::ssim(e1, e2), Error);
    CHECK_THROWS_AS(mt::lp_distance(a, b, mt::Norm::L2), Error);
}

TEST_CASE("differentiable row ssim matches scalar ssim and its gradient checks out") {
    Rng r(5);
    const int64_t n = 3, d = 49;
    Tensor<double> x({n, d}), y({n, d});
    r.fill_uniform(x, 0.0, 1.0);
    r.fill_uniform(y, 0.0, 1.0);
    auto vx = ag::Var<double>::leaf(x, true);
    auto vy = ag::Var<double>::constant(y);
    auto s = mt::ssim_global_rows(vx, vy);
    for (int64_t i = 0; i < n; ++i) {
        Tensor<double> xi({d}), yi({d});
        for (int64_t j = 0; j < d; ++j) {
            xi[j] = x.at2(i, j);
            yi[j] = y.at2(i, j);
        }
        CHECK(s.value()[i] == doctest::Approx(mt::ssim(xi, yi)).epsilon(1e-10));
    }

    // Central finite differences on sum of row scores.
    auto loss = ag::sum_all(s);
    ag::backward(loss);
    const double h = 1e-6;
    for (int64_t probe : {int64_t(0), int64_t(17), int64_t(100), int64_t(146)}) {
        auto eval = [&](double delta) {
            Tensor<double> xp = x;
            xp[probe] += delta;
            auto v = mt::ssim_global_rows(ag::Var<double>::constant(xp), vy);
            double acc = 0;
            for (int64_t i = 0; i < n; ++i) acc += v.value()[i];
            return acc;
        };
        const double fd = (eval(h) - eval(-h)) / (2 * h);
        const double an = vx.grad()[probe];
        CHECK(std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd)) <= 1e-6);
    }
}

TEST_CASE("lp distances") {
    Tensor<double> x({2, 3}, {0, 0, 0, 0, 0, 0});
    Tensor<double> y = x;
    CHECK(mt::lp_distance(x, y, mt::Norm::L2) == 0.0);
    CHECK(mt::lp_distance(x, y, mt::Norm::Linf) == 0.0);
    y[3] = 0.3;
    CHECK(mt::lp_distance(x, y, mt::Norm::L2) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(mt::lp_distance(x, y, mt::Norm::Linf) == doctest::Approx(0.3).epsilon(1e-12));

    // Norm axioms on random triples.
    Rng r(6);
    Tensor<double> a({8}), b({8}), c({8});
    for (int trial = 0; trial < 50; ++trial) {
        r.fill_normal(a);
        r.fill_normal(b);
        r.fill_normal(c);
        for (auto norm : {mt::Norm::L2, mt::Norm::Linf}) {
            const double ab = mt::lp_distance(a, b, norm);
            const double ba = mt::lp_distance(b, a, norm);
            const double ac = mt::lp_distance(a, c, norm);
            const double cb = mt::lp_distance(c, b, norm);
            CHECK(ab >= 0.0);
            CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
            CHECK(ab <= ac + cb + 1e-12);
        }
    }
}

TEST_CASE("success rate with Wilson interval") {
    std::vector<uint8_t> five_of_ten{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    auto s = mt::success_rate(five_of_ten);
    CHECK(s.rate == doctest::Approx(0.5));
    CHECK(s.successes == 5);
    CHECK(s.total == 10);
    CHECK(s.lo > 0.2);
    CHECK(s.hi < 0.8);
    CHECK(s.lo < s.rate);
    CHECK(s.hi > s.rate);

    auto zero = mt::success_rate(std::vector<uint8_t>(20, 0));
    CHECK(zero.rate == 0.0);
    CHECK(zero.lo == 0.0);
    CHECK(zero.hi > 0.0);

    auto all = mt::success_rate(std::vector<uint8_t>(20, 1));
    CHECK(all.rate == 1.0);
    CHECK(all.hi == 1.0);

    CHECK_THROWS_AS(mt::success_rate({}), Error);
}

TEST_CASE("windowed ssim penalizes local structure changes") {
    // Global stats can miss a localized swap; windowed mode reacts to it.
    Rng r(7);
    Tensor<double> x({16, 16});
    r.fill_uniform(x, 0.0, 1.0);
    Tensor<double> y = x;
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) y[(6 + i) * 16 + 6 + j] = 1.0 - y[(6 + i) * 16 + 6 + j];
    mt::SsimConfig wcfg;
    wcfg.mode = mt::SsimConfig::Mode::Windowed;
    CHECK(mt::ssim(x, y, wcfg) < 1.0);
    CHECK(mt::ssim(x, y, wcfg) < mt::ssim(x, x, wcfg));
    // Too-small images are refused in windowed mode.
    Tensor<double> tiny({4, 4}, 0.5);
    CHECK_THROWS_AS(mt::ssim(tiny, tiny, wcfg), Error);
}
