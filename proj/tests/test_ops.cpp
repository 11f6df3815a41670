#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "memmamba/gradcheck.hpp"
#include "memmamba/ops.hpp"
#include "memmamba/threading.hpp"

using namespace memmamba;
namespace o = memmamba::ops;

namespace {

Tensor<double> randn64(Shape s, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor<double>::randn(std::move(s), rng);
}

}  // namespace

// ------------------------------------------------------------------ matmul

TEST_CASE("matmul: identity times vector") {
    Tensor<float> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor<float> v(Shape{3, 1}, {2.f, -3.f, 5.f});
    auto r = o::matmul(eye, v);
    CHECK(r.values()[0] == 2.f);
    CHECK(r.values()[1] == -3.f);
    CHECK(r.values()[2] == 5.f);
}

TEST_CASE("matmul: anything times zero is zero") {
    Tensor<float> a(Shape{2, 2}, {1, 2, 3, 4});
    auto z = Tensor<float>::zeros({2, 2});
    auto r = o::matmul(a, z);
    for (auto v : r.values()) CHECK(v == 0.f);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
    Tensor<float> a(Shape{2, 3});
    Tensor<float> b(Shape{4, 2});
    try {
        o::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences (both operands)") {
    auto b0 = randn64({4, 2}, 11);
    auto err_a = finite_diff_check(
        [&](const Tensor<double>& a) { return o::sum_all(o::silu(o::matmul(a, b0))); },
        randn64({3, 4}, 10), 1e-6);
    CHECK(err_a <= 1e-6);

    auto a0 = randn64({3, 4}, 12);
    auto err_b = finite_diff_check(
        [&](const Tensor<double>& b) { return o::sum_all(o::silu(o::matmul(a0, b))); },
        randn64({4, 2}, 13), 1e-6);
    CHECK(err_b <= 1e-6);
}

TEST_CASE("matmul with folded leading dims matches per-row matmul") {
    auto x = randn64({2, 3, 4}, 20);
    auto w = randn64({4, 5}, 21);
    auto y = o::matmul(x, w);
    CHECK(y.shape() == Shape{2, 3, 5});
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < 4; ++k)
                    acc += x.values()[(b * 3 + i) * 4 + k] * w.values()[k * 5 + j];
                CHECK(y.values()[(b * 3 + i) * 5 + j] == doctest::Approx(acc).epsilon(1e-12));
            }
}

// ------------------------------------------------------------------ conv2d

TEST_CASE("conv2d: 1x1 unit kernel is identity") {
    Rng rng(3);
    auto x = Tensor<float>::randn({1, 1, 4, 4}, rng);
    Tensor<float> w(Shape{1, 1, 1, 1}, {1.f});
    auto y = o::conv2d(x, w, Tensor<float>{}, 1, 0);
    CHECK(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]));
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones 5x5 gives 9") {
    auto x = Tensor<float>::ones({1, 1, 5, 5});
    auto w = Tensor<float>::ones({1, 1, 3, 3});
    auto y = o::conv2d(x, w, Tensor<float>{}, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (auto v : y.values()) CHECK(v == doctest::Approx(9.f));
}

TEST_CASE("conv2d: kernel larger than padded input is a dimension error") {
    auto x = Tensor<float>::ones({1, 1, 2, 2});
    auto w = Tensor<float>::ones({1, 1, 5, 5});
    CHECK_THROWS_AS(o::conv2d(x, w, Tensor<float>{}, 1, 0), ShapeError);
}

// Direct six-loop cross-correlation oracle in NCHW.
static std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                       int64_t stride, int64_t pad, int64_t Ho, int64_t Wo) {
    const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    std::vector<double> out(static_cast<std::size_t>(B * Co * Ho * Wo), 0.0);
    for (int64_t n = 0; n < B; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    double acc = 0;
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t r = 0; r < kh; ++r)
                            for (int64_t s = 0; s < kw; ++s) {
                                const int64_t hi = ho * stride - pad + r;
                                const int64_t wi = wo * stride - pad + s;
                                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                                acc += x.values()[((n * Ci + ci) * H + hi) * W + wi] *
                                       w.values()[((co * Ci + ci) * kh + r) * kw + s];
                            }
                    out[static_cast<std::size_t>(((n * Co + co) * Ho + ho) * Wo + wo)] = acc;
                }
    return out;
}

TEST_CASE("conv2d matches the loop oracle, with stride and padding") {
    auto x = randn64({2, 3, 7, 6}, 31);
    auto w = randn64({4, 3, 3, 3}, 32);
    for (int64_t stride : {1, 2}) {
        for (int64_t pad : {0, 1}) {
            const int64_t Ho = (7 + 2 * pad - 3) / stride + 1;
            const int64_t Wo = (6 + 2 * pad - 3) / stride + 1;
            auto y = o::conv2d(x, w, Tensor<double>{}, stride, pad);
            auto expect = conv_oracle(x, w, stride, pad, Ho, Wo);
            REQUIRE(y.numel() == static_cast<int64_t>(expect.size()));
            for (std::size_t i = 0; i < expect.size(); ++i)
                CHECK(std::abs(y.values()[i] - expect[i]) <= 1e-6);
        }
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    auto w0 = randn64({2, 3, 3, 3}, 41);
    auto b0 = randn64({2}, 42);
    auto err_x = finite_diff_check(
        [&](const Tensor<double>& x) {
            return o::sum_all(o::silu(o::conv2d(x, w0, b0, 2, 1)));
        },
        randn64({2, 3, 5, 5}, 40), 1e-6);
    CHECK(err_x <= 1e-6);

    auto x0 = randn64({2, 3, 5, 5}, 43);
    auto err_w = finite_diff_check(
        [&](const Tensor<double>& w) {
            return o::sum_all(o::silu(o::conv2d(x0, w, b0, 1, 1)));
        },
        w0, 1e-6);
    CHECK(err_w <= 1e-6);

    auto err_b = finite_diff_check(
        [&](const Tensor<double>& b) {
            return o::sum_all(o::silu(o::conv2d(x0, w0, b, 1, 0)));
        },
        b0, 1e-6);
    CHECK(err_b <= 1e-6);
}

// ----------------------------------------------------------------- softmax

TEST_CASE("softmax: zeros give the uniform distribution") {
    auto y = o::softmax(Tensor<float>::zeros({4}), 0);
    for (auto v : y.values()) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("softmax: large equal inputs do not overflow") {
    Tensor<float> x(Shape{2}, {1000.f, 1000.f});
    auto y = o::softmax(x, 0);
    CHECK(y.values()[0] == doctest::Approx(0.5f));
    CHECK(y.values()[1] == doctest::Approx(0.5f));
}

TEST_CASE("softmax: [0, ln 3] -> [0.25, 0.75]") {
    Tensor<double> x(Shape{2}, {0.0, std::log(3.0)});
    auto y = o::softmax(x, 0);
    CHECK(y.values()[0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(y.values()[1] == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("softmax: rows sum to 1 for random input") {
    auto x = randn64({5, 7}, 50);
    auto y = o::softmax(x, 1);
    for (int64_t r = 0; r < 5; ++r) {
        double s = 0;
        for (int64_t j = 0; j < 7; ++j) s += y.values()[r * 7 + j];
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("softmax: non-finite input is a numeric error") {
    Tensor<double> x(Shape{2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(o::softmax(x, 0), NumericError);
}

TEST_CASE("softmax over a middle axis matches lane-wise evaluation") {
    auto x = randn64({2, 3, 4}, 51);
    auto y = o::softmax(x, 1);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 4; ++i) {
            double s = 0;
            for (int64_t l = 0; l < 3; ++l) s += y.values()[(b * 3 + l) * 4 + i];
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
}

TEST_CASE("softmax gradient matches finite differences") {
    auto probe = randn64({3, 5}, 52);
    auto err = finite_diff_check(
        [&](const Tensor<double>& x) {
            auto y = o::softmax(x, 1);
            return o::sum_all(o::mul(y, probe));
        },
        randn64({3, 5}, 53), 1e-6);
    CHECK(err <= 1e-6);
}

// --------------------------------------------------------------- layernorm

TEST_CASE("layernorm: constant vector maps to zero") {
    auto x = Tensor<float>::full({1, 6}, 3.5f);
    auto y = o::layernorm(x, Tensor<float>::ones({6}), Tensor<float>::zeros({6}), 1e-5f);
    for (auto v : y.values()) CHECK(std::abs(v) <= 1e-6f);
}

TEST_CASE("layernorm: zero gamma gives constant beta") {
    Rng rng(5);
    auto x = Tensor<float>::randn({2, 4}, rng);
    auto y = o::layernorm(x, Tensor<float>::zeros({4}), Tensor<float>::full({4}, 2.5f), 1e-5f);
    for (auto v : y.values()) CHECK(v == doctest::Approx(2.5f));
}

TEST_CASE("layernorm: output statistics are standardized") {
    auto x = randn64({3, 32}, 60);
    auto y = o::layernorm(x, Tensor<double>::ones({32}), Tensor<double>::zeros({32}), 1e-5);
    for (int64_t r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (int64_t i = 0; i < 32; ++i) mean += y.values()[r * 32 + i];
        mean /= 32;
        for (int64_t i = 0; i < 32; ++i) {
            const double d = y.values()[r * 32 + i] - mean;
            var += d * d;
        }
        var /= 32;
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("layernorm gradients match finite differences") {
    auto gamma = randn64({8}, 61);
    auto beta = randn64({8}, 62);
    auto x0 = randn64({4, 8}, 63);
    auto err_x = finite_diff_check(
        [&](const Tensor<double>& x) {
            return o::sum_all(o::silu(o::layernorm(x, gamma, beta, 1e-5)));
        },
        x0, 1e-6);
    CHECK(err_x <= 1e-6);
    auto err_g = finite_diff_check(
        [&](const Tensor<double>& g) {
            return o::sum_all(o::silu(o::layernorm(x0, g, beta, 1e-5)));
        },
        gamma, 1e-6);
    CHECK(err_g <= 1e-6);
    auto err_b = finite_diff_check(
        [&](const Tensor<double>& b) {
            return o::sum_all(o::silu(o::layernorm(x0, gamma, b, 1e-5)));
        },
        beta, 1e-6);
    CHECK(err_b <= 1e-6);
}

// ------------------------------------------------------------- elementwise

TEST_CASE("add with zeros is identity") {
    auto x = randn64({3, 4}, 70);
    auto y = o::add(x, Tensor<double>::zeros({3, 4}));
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("silu(0) == 0") {
    auto y = o::silu(Tensor<double>::zeros({1}));
    CHECK(y.values()[0] == 0.0);
}

TEST_CASE("exp/log round-trip on positives") {
    Rng rng(8);
    Tensor<double> x(Shape{64});
    for (auto& v : x.values()) v = 0.01 + rng.uniform() * 5.0;
    auto y = o::exp(o::log(x));
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double rel = std::abs(y.values()[i] - x.values()[i]) / x.values()[i];
        CHECK(rel <= 1e-7);
    }
}

TEST_CASE("broadcast add over leading axes") {
    Tensor<double> a(Shape{2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor<double> b(Shape{2}, {10, 20});
    auto y = o::add(a, b);
    CHECK(y.values()[0] == 11);
    CHECK(y.values()[1] == 22);
    CHECK(y.values()[7] == 28);
}

TEST_CASE("incompatible broadcast is a dimension error") {
    CHECK_THROWS_AS(o::add(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{2, 2})),
                    ShapeError);
}

TEST_CASE("broadcast gradients reduce over broadcast axes") {
    auto err = finite_diff_check(
        [&](const Tensor<double>& b) {
            auto a = Tensor<double>(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
            return o::sum_all(o::silu(o::mul(a, b)));
        },
        randn64({2}, 71), 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("elementwise suite gradients match finite differences") {
    auto x0 = randn64({4, 3}, 72);
    auto pos = Tensor<double>(Shape{5});
    {
        Rng rng(73);
        for (auto& v : pos.values()) v = 0.5 + rng.uniform();
    }
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) { return o::sum_all(o::silu(x)); }, x0, 1e-6) <= 1e-6);
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) { return o::sum_all(o::exp(x)); }, x0, 1e-6) <= 1e-6);
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) { return o::sum_all(o::log(x)); }, pos, 1e-6) <= 1e-6);
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) { return o::sum_all(o::sqrt(x)); }, pos, 1e-6) <= 1e-6);
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) { return o::sum_all(o::softplus_op(x)); }, x0,
              1e-6) <= 1e-6);
    CHECK(finite_diff_check(
              [](const Tensor<double>& x) {
                  return o::sum_all(o::divide(Tensor<double>::ones({5}), x));
              },
              pos, 1e-6) <= 1e-6);
}

// ----------------------------------------------------------------- pooling

TEST_CASE("global_avg_pool: constant map pools to the constant") {
    auto x = Tensor<float>::full({2, 3, 3, 4}, 1.25f);
    auto y = o::global_avg_pool(x);
    CHECK(y.shape() == Shape{2, 4});
    for (auto v : y.values()) CHECK(v == doctest::Approx(1.25f));
}

TEST_CASE("global_avg_pool: 2x2 map [1,2,3,4] -> 2.5") {
    Tensor<float> x(Shape{1, 2, 2, 1}, {1, 2, 3, 4});
    auto y = o::global_avg_pool(x);
    CHECK(y.values()[0] == doctest::Approx(2.5f));
}

TEST_CASE("global_avg_pool matches the loop mean") {
    auto x = randn64({2, 3, 5, 4}, 80);
    auto y = o::global_avg_pool(x);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 4; ++c) {
            double acc = 0;
            for (int64_t h = 0; h < 3; ++h)
                for (int64_t w = 0; w < 5; ++w)
                    acc += x.values()[((b * 3 + h) * 5 + w) * 4 + c];
            acc /= 15.0;
            CHECK(std::abs(y.values()[b * 4 + c] - acc) <= 1e-6);
        }
}

// ------------------------------------------------------------------ cosine

TEST_CASE("cosine_sim basics") {
    Tensor<double> v(Shape{3}, {1, 2, 3});
    CHECK(o::cosine_sim(v, v).item() == doctest::Approx(1.0));
    Tensor<double> e1(Shape{2}, {1, 0});
    Tensor<double> e2(Shape{2}, {0, 1});
    CHECK(o::cosine_sim(e1, e2).item() == doctest::Approx(0.0));
    Tensor<double> a(Shape{2}, {1, 1});
    CHECK(o::cosine_sim(a, e1).item() == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-9));
}

TEST_CASE("cosine_sim rejects zero norms") {
    Tensor<double> z(Shape{2}, {0, 0});
    Tensor<double> v(Shape{2}, {1, 0});
    CHECK_THROWS_AS(o::cosine_sim(z, v), NumericError);
    CHECK_THROWS_AS(o::cosine_sim(v, z), NumericError);
}

TEST_CASE("cosine_sim gradient matches finite differences") {
    auto b0 = randn64({6}, 90);
    auto err = finite_diff_check(
        [&](const Tensor<double>& a) { return o::cosine_sim(a, b0); }, randn64({6}, 91), 1e-6);
    CHECK(err <= 1e-6);
}

// -------------------------------------------------------- shape ops & misc

TEST_CASE("transpose round-trips and has exact gradients") {
    auto x = randn64({2, 3, 4}, 100);
    auto y = o::transpose(x, {2, 0, 1});
    CHECK(y.shape() == Shape{4, 2, 3});
    auto back = o::transpose(y, {1, 2, 0});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);

    auto err = finite_diff_check(
        [](const Tensor<double>& t) {
            return o::sum_all(o::silu(o::transpose(t, {1, 0})));
        },
        randn64({3, 5}, 101), 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("reduce_sum over each axis agrees with explicit loops") {
    auto x = randn64({2, 3, 4}, 102);
    auto s1 = o::reduce_sum(x, 1);
    CHECK(s1.shape() == Shape{2, 4});
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 4; ++i) {
            double acc = 0;
            for (int64_t l = 0; l < 3; ++l) acc += x.values()[(b * 3 + l) * 4 + i];
            CHECK(s1.values()[b * 4 + i] == doctest::Approx(acc).epsilon(1e-12));
        }
    auto err = finite_diff_check(
        [](const Tensor<double>& t) {
            return o::sum_all(o::silu(o::reduce_sum(t, 1, true)));
        },
        x, 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("cross_entropy_logits gradient matches finite differences") {
    std::vector<int64_t> labels{1, 0, 2};
    auto err = finite_diff_check(
        [&](const Tensor<double>& l) { return o::cross_entropy_logits(l, labels); },
        randn64({3, 4}, 110), 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("finite_diff_check: linear function is near-exact") {
    auto probe = randn64({7}, 120);
    auto err = finite_diff_check(
        [&](const Tensor<double>& x) { return o::sum_all(o::mul(x, probe)); },
        randn64({7}, 121), 1e-5);
    CHECK(err <= 1e-9);
}

TEST_CASE("finite_diff_check: softmax cross-entropy composite") {
    std::vector<int64_t> labels{2, 0};
    auto err = finite_diff_check(
        [&](const Tensor<double>& x) { return o::cross_entropy_logits(x, labels); },
        randn64({2, 5}, 122), 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("forward evaluation is bit-identical across runs and thread modes") {
    auto run = [](int threads) {
        threading::set_threads(threads);
        Rng rng(999);
        auto x = Tensor<float>::randn({4, 33, 17}, rng);
        auto w = Tensor<float>::randn({17, 29}, rng);
        auto y = o::silu(o::matmul(x, w));
        threading::set_threads(1);
        return std::vector<float>(y.values().begin(), y.values().end());
    };
    auto a = run(1);
    auto b = run(1);
    auto c = run(4);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("serial and OpenMP kernels agree bit-exactly") {
    Rng rng(7);
    const int64_t m = 37, k = 19, n = 23;
    auto a = Tensor<float>::randn({m, k}, rng);
    auto b = Tensor<float>::randn({k, n}, rng);
    std::vector<float> c1(static_cast<std::size_t>(m * n)), c2(c1.size());
    kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n);
    kernels::matmul_omp(a.data(), b.data(), c2.data(), m, k, n);
    CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(float)) == 0);

    auto x = Tensor<float>::randn({2, 9, 8, 5}, rng);
    auto w = Tensor<float>::randn({3, 3, 5, 6}, rng);
    const int64_t Ho = 9, Wo = 8;
    std::vector<float> y1(static_cast<std::size_t>(2 * Ho * Wo * 6)), y2(y1.size());
    kernels::conv2d_nhwc_serial(x.data(), w.data(), static_cast<const float*>(nullptr), y1.data(), 2, 9, 8, 5, 6, 3, 3, Ho,
                                Wo, 1, 1);
    kernels::conv2d_nhwc_omp(x.data(), w.data(), static_cast<const float*>(nullptr), y2.data(), 2, 9, 8, 5, 6, 3, 3, Ho, Wo,
                             1, 1);
    CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(float)) == 0);
}
