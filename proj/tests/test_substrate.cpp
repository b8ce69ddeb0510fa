#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lsp/substrate.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using lsp::AdamState;
using lsp::Error;
using lsp::ErrorCode;
using lsp::MetaMap;
using lsp::ModelSpec;
using lsp::ParamStore;
using lsp::Rng;
using lsp::Shape;
using lsp::Tensor;
namespace ag = lsp::ag;
namespace fs = std::filesystem;

namespace {

ModelSpec tiny_spec() {
    return ModelSpec{"tiny",
                     {{"w1", {3, 4}, 3}, {"b1", {4}, 0}, {"w2", {4, 2}, 4}, {"b2", {2}, 0}}};
}

fs::path tmpfile(const char* stem) {
    return fs::temp_directory_path() / (std::string("lsp_substrate_") + stem);
}

}  // namespace

TEST_CASE("param store: names, lookup, duplicates") {
    ParamStore<float> s;
    s.add("a", Tensor<float>({2, 2}, 1.0f));
    s.add("b", Tensor<float>({3}));
    CHECK(s.size() == 2);
    CHECK(s.names() == std::vector<std::string>{"a", "b"});
    CHECK(s.at("a").value()[0] == 1.0f);
    CHECK(s.has("b"));
    CHECK_FALSE(s.has("c"));
    CHECK_THROWS_AS(s.add("a", Tensor<float>({1})), Error);
    CHECK_THROWS_AS(s.at("missing"), Error);
    CHECK(s.count_params() == 7);
}

TEST_CASE("count_params additive over disjoint stores") {
    auto full = lsp::init_params<float>(tiny_spec(), 1);
    ModelSpec half1{"h1", {tiny_spec().defs[0], tiny_spec().defs[1]}};
    ModelSpec half2{"h2", {tiny_spec().defs[2], tiny_spec().defs[3]}};
    auto a = lsp::init_params<float>(half1, 1);
    auto b = lsp::init_params<float>(half2, 1);
    CHECK(full.count_params() == a.count_params() + b.count_params());
    CHECK(lsp::init_params<float>(ModelSpec{"empty", {}}, 1).count_params() == 0);
}

TEST_CASE("init: deterministic, fan-in bounded weights, zero biases") {
    auto a = lsp::init_params<float>(tiny_spec(), 42);
    auto b = lsp::init_params<float>(tiny_spec(), 42);
    auto c = lsp::init_params<float>(tiny_spec(), 43);
    bool all_eq = true, any_diff = false;
    for (const auto& n : a.names())
        for (int64_t i = 0; i < a.at(n).value().size(); ++i) {
            all_eq = all_eq && a.at(n).value()[i] == b.at(n).value()[i];
            any_diff = any_diff || a.at(n).value()[i] != c.at(n).value()[i];
        }
    CHECK(all_eq);
    CHECK(any_diff);

    const float bound1 = 1.0f / std::sqrt(3.0f);
    for (int64_t i = 0; i < a.at("w1").value().size(); ++i) {
        CHECK(a.at("w1").value()[i] >= -bound1);
        CHECK(a.at("w1").value()[i] <= bound1);
    }
    for (int64_t i = 0; i < a.at("b1").value().size(); ++i) CHECK(a.at("b1").value()[i] == 0.0f);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    auto s = lsp::init_params<double>(tiny_spec(), 7);
    auto before = s.cast<double>();
    AdamState<double> st;
    for (const auto& n : s.names()) s.at(n).node()->grad = Tensor<double>(s.at(n).shape());
    lsp::adam_step(s, st);
    for (const auto& n : s.names())
        for (int64_t i = 0; i < s.at(n).value().size(); ++i)
            CHECK(s.at(n).value()[i] == before.at(n).value()[i]);
    CHECK(st.step == 1);
    CHECK(s.step == 1);
}

TEST_CASE("adam: first step moves each coordinate by about lr") {
    ParamStore<double> s;
    s.add("w", Tensor<double>({4}, {1.0, -2.0, 0.5, 3.0}));
    s.at("w").node()->grad = Tensor<double>({4}, {0.3, -0.7, 2.0, -0.002});
    AdamState<double> st;
    st.lr = 1e-3;
    lsp::adam_step(s, st);
    const double expect[4] = {1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3, 3.0 + 1e-3};
    for (int i = 0; i < 4; ++i)
        CHECK(s.at("w").value()[i] == doctest::Approx(expect[i]).epsilon(1e-4));
}

TEST_CASE("adam: missing or non-finite gradients rejected") {
    auto s = lsp::init_params<double>(tiny_spec(), 7);
    AdamState<double> st;
    CHECK_THROWS_AS(lsp::adam_step(s, st), Error);

    for (const auto& n : s.names()) s.at(n).node()->grad = Tensor<double>(s.at(n).shape());
    s.at("w1").node()->grad[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        lsp::adam_step(s, st);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NonFiniteGradient);
    }
}

TEST_CASE("adam: identical runs give identical trajectories") {
    auto run = [] {
        auto s = lsp::init_params<double>(tiny_spec(), 3);
        AdamState<double> st;
        Rng r(5);
        for (int step = 0; step < 20; ++step) {
            for (const auto& n : s.names()) {
                Tensor<double> g(s.at(n).shape());
                r.fill_normal(g);
                s.at(n).node()->grad = g;
            }
            lsp::adam_step(s, st);
        }
        return s;
    };
    auto a = run(), b = run();
    for (const auto& n : a.names())
        for (int64_t i = 0; i < a.at(n).value().size(); ++i)
            CHECK(a.at(n).value()[i] == b.at(n).value()[i]);
}

TEST_CASE("finite differences: quadratic loss is exact, constant loss is zero") {
    ParamStore<double> s;
    s.add("w", Tensor<double>({8}, {0.3, -1.2, 0.9, 2.0, -0.4, 0.1, 1.1, -0.6}));
    lsp::LossFn<double> quad = [](ParamStore<double>& st, bool want_grad) {
        auto& w = st.at("w");
        auto loss = ag::mul_scalar(ag::sum_all(ag::square(w)), 0.5);
        if (want_grad) ag::backward(loss);
        return static_cast<double>(loss.value()[0]);
    };
    Rng r(11);
    CHECK(lsp::finite_diff_check(quad, s, 8, 1e-6, r) <= 1e-8);

    lsp::LossFn<double> constant = [](ParamStore<double>&, bool) { return 3.5; };
    ParamStore<double> s2;
    s2.add("w", Tensor<double>({3}, 1.0));
    Rng r2(12);
    CHECK(lsp::finite_diff_check(constant, s2, 3, 1e-6, r2) == 0.0);
}

TEST_CASE("finite differences: composite nonlinear loss under 1e-4") {
    auto s = lsp::init_params<double>(tiny_spec(), 9);
    Tensor<double> x({5, 3});
    Rng rx(1);
    rx.fill_normal(x);
    lsp::LossFn<double> net = [&x](ParamStore<double>& st, bool want_grad) {
        st.zero_grads();
        auto h = ag::relu(ag::dense(ag::Var<double>::constant(x), st.at("w1"), st.at("b1")));
        auto out = ag::sigmoid(ag::dense(h, st.at("w2"), st.at("b2")));
        auto loss = ag::mean_all(ag::square(out));
        if (want_grad) ag::backward(loss);
        return static_cast<double>(loss.value()[0]);
    };
    Rng r(13);
    CHECK(lsp::finite_diff_check(net, s, 20, 1e-5, r) <= 1e-4);
}

TEST_CASE("checkpoint: bit-exact round trip with metadata") {
    auto s = lsp::init_params<float>(tiny_spec(), 21);
    s.step = 1234;
    MetaMap meta{{"seed", "21"}, {"epochs", "5"}, {"val_acc", "0.98"}};
    auto path = tmpfile("rt.bin");
    lsp::save_checkpoint(s, meta, path.string());
    auto [loaded, meta2] = lsp::load_checkpoint<float>(path.string());
    CHECK(loaded.step == 1234);
    CHECK(meta2 == meta);
    REQUIRE(loaded.names() == s.names());
    for (const auto& n : s.names()) {
        REQUIRE(loaded.at(n).shape() == s.at(n).shape());
        for (int64_t i = 0; i < s.at(n).value().size(); ++i)
            CHECK(loaded.at(n).value()[i] == s.at(n).value()[i]);
    }
    // Saving the loaded store reproduces the file byte-for-byte.
    auto path2 = tmpfile("rt2.bin");
    lsp::save_checkpoint(loaded, meta2, path2.string());
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), {});
    std::string c2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(c1 == c2);
}

TEST_CASE("checkpoint: truncation, corruption, version and width mismatches") {
    auto s = lsp::init_params<float>(tiny_spec(), 2);
    auto path = tmpfile("bad.bin");
    lsp::save_checkpoint(s, {}, path.string());

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();

    auto write_variant = [&](std::string data, const char* stem) {
        auto p = tmpfile(stem);
        std::ofstream o(p, std::ios::binary | std::ios::trunc);
        o.write(data.data(), static_cast<std::streamsize>(data.size()));
        return p;
    };

    auto truncated = write_variant(bytes.substr(0, bytes.size() / 2), "trunc.bin");
    CHECK_THROWS_AS(lsp::load_checkpoint<float>(truncated.string()), Error);
    try {
        lsp::load_checkpoint<float>(truncated.string());
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CorruptFile);
    }

    std::string flipped = bytes;
    flipped[20] = static_cast<char>(flipped[20] ^ 0x5a);
    auto corrupt = write_variant(flipped, "corrupt.bin");
    try {
        lsp::load_checkpoint<float>(corrupt.string());
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CorruptFile);
    }

    // Future version: patch the version field and recompute the checksum.
    std::string future = bytes;
    future[4] = 99;
    uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const unsigned char*>(future.data()),
              static_cast<uInt>(future.size() - 4)));
    std::memcpy(future.data() + future.size() - 4, &crc, 4);
    auto vfile = write_variant(future, "future.bin");
    try {
        lsp::load_checkpoint<float>(vfile.string());
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::VersionMismatch);
    }

    // Width mismatch: a float checkpoint read as double.
    try {
        lsp::load_checkpoint<double>(path.string());
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::VersionMismatch);
    }

    CHECK_THROWS_AS(lsp::load_checkpoint<float>("/nonexistent/nowhere.bin"), Error);
}

TEST_CASE("checkpoint: non-finite parameters refused on save") {
    ParamStore<float> s;
    s.add("w", Tensor<float>({2}, {1.0f, std::numeric_limits<float>::infinity()}));
    try {
        lsp::save_checkpoint(s, {}, tmpfile("inf.bin").string());
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvariantViolation);
    }
}

TEST_CASE("store cast preserves values across element types") {
    auto s = lsp::init_params<float>(tiny_spec(), 33);
    auto d = s.cast<double>();
    for (const auto& n : s.names())
        for (int64_t i = 0; i < s.at(n).value().size(); ++i)
            CHECK(d.at(n).value()[i] == static_cast<double>(s.at(n).value()[i]));
}
