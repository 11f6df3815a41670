#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "memmamba/fusion.hpp"
#include "memmamba/gradcheck.hpp"

using namespace memmamba;
namespace o = memmamba::ops;

TEST_CASE("similarity kinds parse from their config names") {
    CHECK(parse_similarity("cosine") == SimilarityKind::cosine);
    CHECK(parse_similarity("l1") == SimilarityKind::neg_l1);
    CHECK(parse_similarity("l2") == SimilarityKind::neg_l2);
    CHECK_THROWS_AS(parse_similarity("dot"), ConfigError);
    CHECK(similarity_name(SimilarityKind::neg_l2) == "l2");
}

TEST_CASE("pool_inputs: constant feature map pools to the constant; vectors pass through") {
    Rng rng(1);
    auto m_c = Tensor<float>::randn({2, 3}, rng);
    auto m_f = Tensor<float>::randn({2, 3}, rng);
    auto Z = Tensor<float>::full({2, 4, 5, 3}, 2.25f);
    auto [v_c, v_f, z] = pool_inputs(m_c, m_f, Z);
    for (auto v : z.values()) CHECK(v == doctest::Approx(2.25f));
    for (std::int64_t i = 0; i < m_c.numel(); ++i) CHECK(v_c.values()[i] == m_c.values()[i]);
    for (std::int64_t i = 0; i < m_f.numel(); ++i) CHECK(v_f.values()[i] == m_f.values()[i]);
}

TEST_CASE("pool_inputs rejects width mismatch") {
    auto m = Tensor<float>::ones({1, 4});
    auto Z = Tensor<float>::ones({1, 2, 2, 3});
    CHECK_THROWS_AS(pool_inputs(m, Tensor<float>{}, Z), ConfigError);
}

TEST_CASE("gate: cosine of a vector with itself is 1, neg_l2 is 0") {
    Rng rng(2);
    auto v = Tensor<float>::randn({3, 4}, rng);
    auto b_cos = gate(v, v, SimilarityKind::cosine);
    auto b_l2 = gate(v, v, SimilarityKind::neg_l2);
    for (auto x : b_cos.values()) CHECK(x == doctest::Approx(1.0f));
    for (auto x : b_l2.values()) CHECK(x == 0.0f);
}

TEST_CASE("gate hand case: v=[1,1], z=[1,0]") {
    Tensor<float> v(Shape{1, 2}, {1, 1});
    Tensor<float> z(Shape{1, 2}, {1, 0});
    CHECK(gate(v, z, SimilarityKind::cosine).values()[0] ==
          doctest::Approx(0.70711f).epsilon(1e-4));
    CHECK(gate(v, z, SimilarityKind::neg_l1).values()[0] == doctest::Approx(-1.0f));
    CHECK(gate(v, z, SimilarityKind::neg_l2).values()[0] == doctest::Approx(-1.0f));
}

TEST_CASE("gate: cosine stays in [-1,1]; distances stay <= 0") {
    Rng rng(3);
    auto v = Tensor<float>::randn({16, 5}, rng);
    auto z = Tensor<float>::randn({16, 5}, rng);
    auto bc = gate(v, z, SimilarityKind::cosine);
    for (auto x : bc.values()) {
        CHECK(x >= -1.0f - 1e-6f);
        CHECK(x <= 1.0f + 1e-6f);
    }
    for (auto kind : {SimilarityKind::neg_l1, SimilarityKind::neg_l2}) {
        auto b = gate(v, z, kind);
        for (auto x : b.values()) CHECK(x <= 0.0f);
    }
}

TEST_CASE("gate: zero-norm row under cosine is a numeric error") {
    Tensor<float> v(Shape{2, 2}, {1, 1, 0, 0});
    Tensor<float> z(Shape{2, 2}, {1, 0, 1, 0});
    CHECK_THROWS_AS(gate(v, z, SimilarityKind::cosine), NumericError);
    CHECK_THROWS_AS(gate(z, v, SimilarityKind::cosine), NumericError);
    // distances do not care
    CHECK_NOTHROW(gate(v, z, SimilarityKind::neg_l1));
}

TEST_CASE("fuse: beta = 0 leaves the features untouched") {
    Rng rng(4);
    auto Z = Tensor<float>::randn({2, 3, 3, 4}, rng);
    // neg_l1 similarity of v with pooled Z is zero exactly when v == pooled Z
    auto z = o::global_avg_pool(Z);
    auto out = fuse(z, z, Z, SimilarityKind::neg_l1);
    for (std::int64_t i = 0; i < Z.numel(); ++i) CHECK(out.values()[i] == Z.values()[i]);
}

TEST_CASE("fuse: spatially constant input stays spatially constant") {
    Rng rng(5);
    auto m_c = Tensor<float>::randn({1, 3}, rng);
    auto m_f = Tensor<float>::randn({1, 3}, rng);
    auto Z = Tensor<float>::full({1, 4, 4, 3}, 0.75f);
    auto out = fuse(m_c, m_f, Z, SimilarityKind::cosine);
    for (std::int64_t c = 0; c < 3; ++c) {
        const float ref = out.values()[c];
        for (std::int64_t p = 0; p < 16; ++p) CHECK(out.values()[p * 3 + c] == ref);
    }
}

TEST_CASE("fuse: all-zero memory vectors leave Z unchanged under every kind") {
    Rng rng(6);
    auto Z = Tensor<float>::randn({2, 2, 2, 3}, rng);
    auto zero = Tensor<float>::zeros({2, 3});
    for (auto kind : {SimilarityKind::cosine, SimilarityKind::neg_l1, SimilarityKind::neg_l2}) {
        auto out = fuse(zero, zero, Z, kind);
        for (std::int64_t i = 0; i < Z.numel(); ++i) CHECK(out.values()[i] == Z.values()[i]);
    }
}

TEST_CASE("fuse minus Z is spatially constant per sample") {
    Rng rng(7);
    auto m_c = Tensor<float>::randn({2, 4}, rng);
    auto m_f = Tensor<float>::randn({2, 4}, rng);
    auto Z = Tensor<float>::randn({2, 3, 5, 4}, rng);
    auto out = fuse(m_c, m_f, Z, SimilarityKind::neg_l2);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t c = 0; c < 4; ++c) {
            const float ref = out.values()[(b * 15) * 4 + c] - Z.values()[(b * 15) * 4 + c];
            for (std::int64_t p = 1; p < 15; ++p) {
                const float d =
                    out.values()[(b * 15 + p) * 4 + c] - Z.values()[(b * 15 + p) * 4 + c];
                CHECK(d == doctest::Approx(ref).epsilon(1e-5));
            }
        }
}

TEST_CASE("fuse matches a loop reimplementation") {
    Rng rng(8);
    const std::int64_t B = 2, H = 3, W = 2, C = 4;
    auto m_c = Tensor<double>::randn({B, C}, rng);
    auto m_f = Tensor<double>::randn({B, C}, rng);
    auto Z = Tensor<double>::randn({B, H, W, C}, rng);
    auto out = fuse(m_c, m_f, Z, SimilarityKind::cosine);

    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<double> zp(C, 0.0);
        for (std::int64_t p = 0; p < H * W; ++p)
            for (std::int64_t c = 0; c < C; ++c)
                zp[c] += Z.values()[(b * H * W + p) * C + c] / (H * W);
        auto beta = [&](const Tensor<double>& m) {
            double dot = 0, nv = 0, nz = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double v = m.values()[b * C + c];
                dot += v * zp[c];
                nv += v * v;
                nz += zp[c] * zp[c];
            }
            return dot / (std::sqrt(nv) * std::sqrt(nz));
        };
        const double bc = beta(m_c), bf = beta(m_f);
        for (std::int64_t p = 0; p < H * W; ++p)
            for (std::int64_t c = 0; c < C; ++c) {
                const double expect = Z.values()[(b * H * W + p) * C + c] +
                                      bc * m_c.values()[b * C + c] +
                                      bf * m_f.values()[b * C + c];
                CHECK(std::abs(out.values()[(b * H * W + p) * C + c] - expect) <= 1e-6);
            }
    }
}

TEST_CASE("fusion gradients match finite differences for every kind") {
    Rng rng(9);
    const std::int64_t B = 2, C = 3;
    auto Z = Tensor<double>::randn({B, 2, 2, C}, rng);
    auto m_f = Tensor<double>::randn({B, C}, rng);
    auto probe = Tensor<double>::randn({B, 2, 2, C}, rng);
    for (auto kind : {SimilarityKind::cosine, SimilarityKind::neg_l1, SimilarityKind::neg_l2}) {
        auto err = finite_diff_check(
            [&](const Tensor<double>& m) {
                return o::sum_all(o::mul(fuse(m, m_f, Z, kind), probe));
            },
            Tensor<double>::randn({B, C}, rng), 1e-6);
        INFO(similarity_name(kind));
        CHECK(err <= 1e-6);
    }
}
