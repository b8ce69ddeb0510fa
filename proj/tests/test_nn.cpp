#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lsp/nn.hpp"
#include "lsp/tensor_ops.hpp"

#include <cmath>
#include <cstdint>

using namespace lsp;

TEST_CASE("layer builders register the documented parameter entries") {
    ModelSpec spec;
    spec.arch = "toy";
    nn::add_conv(spec, "c", 3, 8, 5);
    nn::add_convt(spec, "t", 8, 3, 4);
    nn::add_dense(spec, "d", 7, 11);

    REQUIRE(spec.defs.size() == 6);
    CHECK(spec.defs[0].name == "c.w");
    CHECK(spec.defs[0].shape == Shape{8, 3, 5, 5});
    CHECK(spec.defs[0].fan_in == 3 * 5 * 5);
    CHECK(spec.defs[1].name == "c.b");
    CHECK(spec.defs[1].shape == Shape{8});
    CHECK(spec.defs[1].fan_in == 0);

    CHECK(spec.defs[2].name == "t.w");
    CHECK(spec.defs[2].shape == Shape{8, 3, 4, 4});
    CHECK(spec.defs[2].fan_in == 8 * 4 * 4);
    CHECK(spec.defs[3].shape == Shape{3});

    CHECK(spec.defs[4].name == "d.w");
    CHECK(spec.defs[4].shape == Shape{7, 11});
    CHECK(spec.defs[4].fan_in == 7);
    CHECK(spec.defs[5].shape == Shape{11});
}

TEST_CASE("initialization ranges: biases zero, weights inside the fan-in bound") {
    ModelSpec spec;
    spec.arch = "toy";
    nn::add_dense(spec, "d", 100, 50);
    auto ps = init_params<double>(spec, 7);

    const auto& w = ps.at("d.w").value();
    const double bound = 1.0 / std::sqrt(100.0);
    double mx = 0;
    for (int64_t i = 0; i < w.size(); ++i) {
        CHECK(std::abs(w[i]) <= bound);
        mx = std::max(mx, std::abs(w[i]));
    }
    CHECK(mx > 0.5 * bound);  // the draw actually spans the range
    const auto& b = ps.at("d.b").value();
    for (int64_t i = 0; i < b.size(); ++i) CHECK(b[i] == 0.0);
}

TEST_CASE("forward helpers match the raw kernels") {
    ModelSpec spec;
    spec.arch = "toy";
    nn::add_conv(spec, "c", 2, 3, 3);
    nn::add_convt(spec, "t", 3, 2, 4);
    nn::add_dense(spec, "d", 6, 4);
    auto ps = init_params<double>(spec, 11);
    Rng rng(5);

    ops::Conv2dGeom cg;
    cg.in_c = 2, cg.in_h = 6, cg.in_w = 6, cg.out_c = 3, cg.kh = 3, cg.kw = 3;
    cg.stride = 1, cg.pad = 1;
    Tensor<double> x({2, 2, 6, 6});
    rng.fill_uniform(x, -1.0, 1.0);
    auto xv = ag::Var<double>::constant(x);
    auto y = nn::conv(ps, "c", xv, cg);
    auto want = ops::conv2d_fwd<double>(x, ps.at("c.w").value(), &ps.at("c.b").value(), cg);
    REQUIRE(y.shape() == want.shape());
    for (int64_t i = 0; i < want.size(); ++i) CHECK(y.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));

    ops::ConvT2dGeom tg;
    tg.in_c = 3, tg.in_h = 6, tg.in_w = 6, tg.out_c = 2, tg.kh = 4, tg.kw = 4;
    tg.stride = 2, tg.pad = 1;
    Tensor<double> xt({2, 3, 6, 6});
    rng.fill_uniform(xt, -1.0, 1.0);
    auto yt = nn::convt(ps, "t", ag::Var<double>::constant(xt), tg);
    auto wantt = ops::convt2d_fwd<double>(xt, ps.at("t.w").value(), &ps.at("t.b").value(), tg);
    REQUIRE(yt.shape() == wantt.shape());
    for (int64_t i = 0; i < wantt.size(); ++i)
        CHECK(yt.value()[i] == doctest::Approx(wantt[i]).epsilon(1e-12));

    Tensor<double> xd({5, 6});
    rng.fill_uniform(xd, -1.0, 1.0);
    auto yd = nn::dense(ps, "d", ag::Var<double>::constant(xd));
    auto wantd = ops::dense_fwd<double>(xd, ps.at("d.w").value(), &ps.at("d.b").value());
    REQUIRE(yd.shape() == wantd.shape());
    for (int64_t i = 0; i < wantd.size(); ++i)
        CHECK(yd.value()[i] == doctest::Approx(wantd[i]).epsilon(1e-12));
}

TEST_CASE("gradients reach every layer parameter") {
    ModelSpec spec;
    spec.arch = "toy";
    nn::add_conv(spec, "c", 1, 2, 3);
    nn::add_dense(spec, "d", 2 * 4 * 4, 3);
    auto ps = init_params<double>(spec, 3);
    Rng rng(9);
    Tensor<double> x({2, 1, 4, 4});
    rng.fill_uniform(x, 0.0, 1.0);

    ops::Conv2dGeom cg;
    cg.in_c = 1, cg.in_h = 4, cg.in_w = 4, cg.out_c = 2, cg.kh = 3, cg.kw = 3;
    cg.stride = 1, cg.pad = 1;
    auto h = ag::relu(nn::conv(ps, "c", ag::Var<double>::constant(x), cg));
    auto out = nn::dense(ps, "d", ag::reshape(h, {2, 2 * 4 * 4}));
    auto loss = ag::mean_all(ag::square(out));
    ps.zero_grads();
    ag::backward(loss);

    for (const auto& name : ps.names()) {
        INFO("param ", name);
        REQUIRE(ps.at(name).has_grad());
        const auto& g = ps.at(name).grad();
        CHECK(g.all_finite());
        double norm = 0;
        for (int64_t i = 0; i < g.size(); ++i) norm += g[i] * g[i];
        CHECK(norm > 0.0);
    }
}
