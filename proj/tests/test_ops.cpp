#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsp/rng.hpp"
#include "lsp/tensor_ops.hpp"

#include <cmath>

using lsp::Rng;
using lsp::Shape;
using lsp::Tensor;
namespace ops = lsp::ops;

namespace {

// Direct-summation convolution, the oracle for the im2col/GEMM path.
Tensor<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                        const ops::Conv2dGeom& g) {
    const int64_t n = x.dim(0), oh = g.out_h(), ow = g.out_w();
    Tensor<double> y({n, g.out_c, oh, ow});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t oc = 0; oc < g.out_c; ++oc)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = b ? (*b)[oc] : 0.0;
                    for (int64_t ic = 0; ic < g.in_c; ++ic)
                        for (int64_t ky = 0; ky < g.kh; ++ky)
                            for (int64_t kx = 0; kx < g.kw; ++kx) {
                                const int64_t iy = oy * g.stride - g.pad + ky;
                                const int64_t ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                acc += x[((i * g.in_c + ic) * g.in_h + iy) * g.in_w + ix] *
                                       w[((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx];
                            }
                    y[((i * g.out_c + oc) * oh + oy) * ow + ox] = acc;
                }
    return y;
}

// Transposed convolution by definition: scatter each input pixel through the
// kernel into the output.
Tensor<double> convt_ref(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                         const ops::ConvT2dGeom& g) {
    const int64_t n = x.dim(0), oh = g.out_h(), ow = g.out_w();
    Tensor<double> y({n, g.out_c, oh, ow});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ic = 0; ic < g.in_c; ++ic)
            for (int64_t iy = 0; iy < g.in_h; ++iy)
                for (int64_t ix = 0; ix < g.in_w; ++ix) {
                    const double v = x[((i * g.in_c + ic) * g.in_h + iy) * g.in_w + ix];
                    for (int64_t oc = 0; oc < g.out_c; ++oc)
                        for (int64_t ky = 0; ky < g.kh; ++ky)
                            for (int64_t kx = 0; kx < g.kw; ++kx) {
                                const int64_t oy = iy * g.stride - g.pad + ky;
                                const int64_t ox = ix * g.stride - g.pad + kx;
                                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                                y[((i * g.out_c + oc) * oh + oy) * ow + ox] +=
                                    v * w[((ic * g.out_c + oc) * g.kh + ky) * g.kw + kx];
                            }
                }
    if (b)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t oc = 0; oc < g.out_c; ++oc)
                for (int64_t p = 0; p < oh * ow; ++p) y[(i * g.out_c + oc) * oh * ow + p] += (*b)[oc];
    return y;
}

void check_close(const Tensor<double>& a, const Tensor<double>& b, double tol = 1e-12) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (int64_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst <= tol);
}

Tensor<double> randn(Rng& r, Shape s) {
    Tensor<double> t(std::move(s));
    r.fill_normal(t);
    return t;
}

}  // namespace

TEST_CASE("gemm against naive triple loop, all transpose combinations") {
    Rng r(1);
    const int64_t m = 5, k = 7, n = 4;
    auto naive = [&](const Tensor<double>& A, const Tensor<double>& B, bool ta, bool tb) {
        Tensor<double> C({m, n});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0;
                for (int64_t p = 0; p < k; ++p) {
                    double a = ta ? A[p * m + i] : A[i * k + p];
                    double b = tb ? B[j * k + p] : B[p * n + j];
                    acc += a * b;
                }
                C[i * n + j] = acc;
            }
        return C;
    };
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            auto A = randn(r, ta ? Shape{k, m} : Shape{m, k});
            auto B = randn(r, tb ? Shape{n, k} : Shape{k, n});
            Tensor<double> C({m, n});
            ops::gemm(A.data(), B.data(), C.data(), m, k, n, ta, tb, 0.0);
            check_close(C, naive(A, B, ta, tb));
            // beta accumulate
            Tensor<double> C2 = C;
            ops::gemm(A.data(), B.data(), C2.data(), m, k, n, ta, tb, 1.0);
            auto twice = naive(A, B, ta, tb);
            for (int64_t i = 0; i < twice.size(); ++i) twice[i] *= 2;
            check_close(C2, twice);
        }
}

TEST_CASE("conv2d forward matches direct summation") {
    Rng r(2);
    for (auto [stride, pad] : std::vector<std::pair<int64_t, int64_t>>{{1, 0}, {1, 2}, {2, 1}}) {
        ops::Conv2dGeom g{.in_c = 3, .in_h = 9, .in_w = 8, .out_c = 4, .kh = 3, .kw = 3,
                          .stride = stride, .pad = pad};
        auto x = randn(r, {2, g.in_c, g.in_h, g.in_w});
        auto w = randn(r, {g.out_c, g.in_c, g.kh, g.kw});
        auto b = randn(r, {g.out_c});
        check_close(ops::conv2d_fwd(x, w, &b, g), conv_ref(x, w, &b, g));
        check_close(ops::conv2d_fwd<double>(x, w, nullptr, g), conv_ref(x, w, nullptr, g));
    }
}

TEST_CASE("conv2d backward matches linearity probes") {
    // For a linear map y = conv(x), dx for cotangent G is conv_bwd_data(G);
    // verify <G, conv(x)> == <conv_bwd_data(G), x> (adjoint identity) and the
    // same for weights.
    Rng r(3);
    ops::Conv2dGeom g{.in_c = 2, .in_h = 7, .in_w = 6, .out_c = 3, .kh = 3, .kw = 3, .stride = 2,
                      .pad = 1};
    auto x = randn(r, {2, g.in_c, g.in_h, g.in_w});
    auto w = randn(r, {g.out_c, g.in_c, g.kh, g.kw});
    auto gy = randn(r, {2, g.out_c, g.out_h(), g.out_w()});

    auto dot = [](const Tensor<double>& a, const Tensor<double>& b) {
        double acc = 0;
        for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    };
    auto y = ops::conv2d_fwd<double>(x, w, nullptr, g);
    auto dx = ops::conv2d_bwd_data(gy, w, g);
    auto dw = ops::conv2d_bwd_weights(x, gy, g);
    CHECK(dot(gy, y) == doctest::Approx(dot(dx, x)).epsilon(1e-10));
    CHECK(dot(gy, y) == doctest::Approx(dot(dw, w)).epsilon(1e-10));

    auto db = ops::conv2d_bwd_bias(gy);
    Tensor<double> ones({g.out_c}, 1.0);
    auto yb = ops::conv2d_fwd(x, w, &ones, g);
    double bias_term = dot(gy, yb) - dot(gy, y);
    double s = 0;
    for (int64_t i = 0; i < db.size(); ++i) s += db[i];
    CHECK(bias_term == doctest::Approx(s).epsilon(1e-10));
}

TEST_CASE("transposed conv forward matches scatter definition") {
    Rng r(4);
    for (auto [stride, pad, k] :
         std::vector<std::tuple<int64_t, int64_t, int64_t>>{{2, 1, 4}, {1, 0, 3}, {2, 0, 2}}) {
        ops::ConvT2dGeom g{.in_c = 3, .in_h = 4, .in_w = 5, .out_c = 2, .kh = k, .kw = k,
                           .stride = stride, .pad = pad};
        auto x = randn(r, {2, g.in_c, g.in_h, g.in_w});
        auto w = randn(r, {g.in_c, g.out_c, g.kh, g.kw});
        auto b = randn(r, {g.out_c});
        check_close(ops::convt2d_fwd(x, w, &b, g), convt_ref(x, w, &b, g));
    }
}

TEST_CASE("transposed conv backward satisfies adjoint identities") {
    Rng r(5);
    ops::ConvT2dGeom g{.in_c = 4, .in_h = 3, .in_w = 3, .out_c = 2, .kh = 4, .kw = 4, .stride = 2,
                       .pad = 1};
    auto x = randn(r, {2, g.in_c, g.in_h, g.in_w});
    auto w = randn(r, {g.in_c, g.out_c, g.kh, g.kw});
    auto gy = randn(r, {2, g.out_c, g.out_h(), g.out_w()});
    auto dot = [](const Tensor<double>& a, const Tensor<double>& b) {
        double acc = 0;
        for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    };
    auto y = ops::convt2d_fwd<double>(x, w, nullptr, g);
    CHECK(dot(gy, y) == doctest::Approx(dot(ops::convt2d_bwd_data(gy, w, g), x)).epsilon(1e-10));
    CHECK(dot(gy, y) == doctest::Approx(dot(ops::convt2d_bwd_weights(x, gy, g), w)).epsilon(1e-10));
}

TEST_CASE("convT geometry inverts conv geometry") {
    ops::ConvT2dGeom g{.in_c = 1, .in_h = 7, .in_w = 7, .out_c = 1, .kh = 4, .kw = 4, .stride = 2,
                       .pad = 1};
    CHECK(g.out_h() == 14);
    CHECK(g.out_w() == 14);
}

TEST_CASE("maxpool 2x2 picks maxima and routes gradient to them") {
    Tensor<double> x({1, 1, 4, 4}, {1, 2, 5, 4,
                                    3, 0, 1, 1,
                                    9, 9, 2, 8,
                                    1, 9, 7, 2});
    std::vector<int32_t> am;
    auto y = ops::maxpool2_fwd(x, am);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y[0] == 3);
    CHECK(y[1] == 5);
    CHECK(y[2] == 9);
    CHECK(y[3] == 8);
    // Ties resolve to the first scanned position (row-major within the window).
    CHECK(am[2] == 8);

    Tensor<double> gy({1, 1, 2, 2}, {1, 2, 3, 4});
    auto dx = ops::maxpool2_bwd(gy, am, x.shape());
    double total = 0;
    for (int64_t i = 0; i < dx.size(); ++i) total += dx[i];
    CHECK(total == 10);
    CHECK(dx[4] == 1);   // the 3
    CHECK(dx[2] == 2);   // the 5
    CHECK(dx[8] == 3);   // first 9
    CHECK(dx[11] == 4);  // the 8
}

TEST_CASE("dense matches matmul plus bias") {
    Rng r(6);
    auto x = randn(r, {3, 5});
    auto w = randn(r, {5, 2});
    auto b = randn(r, {2});
    auto y = ops::dense_fwd(x, w, &b);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            double acc = b[j];
            for (int64_t p = 0; p < 5; ++p) acc += x.at2(i, p) * w.at2(p, j);
            CHECK(y.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("softmax rows: normalized, temperature sharpens, stable at large logits") {
    Tensor<double> x({2, 3}, {0, 1, 2, 1000, 1000, 999});
    auto p = ops::softmax_rows(x);
    for (int64_t i = 0; i < 2; ++i) {
        double s = p.at2(i, 0) + p.at2(i, 1) + p.at2(i, 2);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(p.all_finite());
    CHECK(p.at2(0, 2) > p.at2(0, 1));
    auto sharp = ops::softmax_rows(x, 3.0);
    CHECK(sharp.at2(0, 2) > p.at2(0, 2));
}

TEST_CASE("transpose2d and colwise_sum") {
    Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = ops::transpose2d(x);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at2(0, 1) == 4);
    CHECK(t.at2(2, 0) == 3);
    auto s = ops::colwise_sum(x);
    CHECK(s[0] == 5);
    CHECK(s[1] == 7);
    CHECK(s[2] == 9);
}

TEST_CASE("matmul shape validation") {
    Tensor<double> a({2, 3}), b({4, 2}), bt({4, 3});
    CHECK_THROWS_AS(ops::matmul(a, b), lsp::Error);
    CHECK_NOTHROW(ops::matmul(a, bt, false, true));
}
