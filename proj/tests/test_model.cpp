#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "memmamba/gradcheck.hpp"
#include "memmamba/losses.hpp"
#include "memmamba/model.hpp"

using namespace memmamba;
namespace o = memmamba::ops;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.in_channels = 3;
    cfg.num_classes = 2;
    cfg.stage_depths = {1};
    cfg.stage_dims = {8};
    cfg.state_dim = 2;
    cfg.mem_coarse_size = 2;
    cfg.mem_fine_size = 4;
    cfg.head_hidden = 8;
    return cfg;
}

ModelConfig desk_config() {
    return ModelConfig{};
}

}  // namespace

TEST_CASE("config validation") {
    auto cfg = desk_config();
    CHECK_NOTHROW(cfg.validate());

    auto bad = cfg;
    bad.stage_dims = {48, 48};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.image_size = 60;  // not divisible by 8
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.stage_depths = {2};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("patch_embed: 64px image with width 48 gives 16x16x48") {
    auto model = Model<float>::init(desk_config(), {}, 1);
    Rng rng(2);
    auto img = Tensor<float>::randn({2, 64, 64, 3}, rng);
    auto f0 = model.patch_embed(img);
    CHECK(f0.shape() == Shape{2, 16, 16, 48});
}

TEST_CASE("patch_embed: zero image gives zero features") {
    auto model = Model<float>::init(desk_config(), {}, 1);
    auto f0 = model.patch_embed(Tensor<float>::zeros({1, 64, 64, 3}));
    for (auto v : f0.values()) CHECK(v == 0.0f);
}

TEST_CASE("patch_embed: indivisible size is a configuration error") {
    auto cfg = micro_config();
    auto model = Model<float>::init(cfg, {}, 1);
    CHECK_THROWS_AS(model.patch_embed(Tensor<float>::zeros({1, 6, 6, 3})), ConfigError);
}

TEST_CASE("patch_embed matches a loop conv oracle before the norm") {
    auto cfg = micro_config();
    auto model = Model<double>::init(cfg, {}, 3);
    Rng rng(4);
    auto img = Tensor<double>::randn({1, 8, 8, 3}, rng);
    auto conv_out = model.patch_conv(img, 4, 0);
    for (std::int64_t ho = 0; ho < 2; ++ho)
        for (std::int64_t wo = 0; wo < 2; ++wo)
            for (std::int64_t co = 0; co < 8; ++co) {
                double acc = model.patch_conv.bias.values()[co];
                for (std::int64_t r = 0; r < 4; ++r)
                    for (std::int64_t s = 0; s < 4; ++s)
                        for (std::int64_t ci = 0; ci < 3; ++ci)
                            acc += img.values()[((4 * ho + r) * 8 + 4 * wo + s) * 3 + ci] *
                                   model.patch_conv.weight.values()[((r * 4 + s) * 3 + ci) * 8 + co];
                CHECK(conv_out.values()[(ho * 2 + wo) * 8 + co] ==
                      doctest::Approx(acc).epsilon(1e-10));
            }
}

TEST_CASE("mem_ssm_block preserves shape") {
    auto model = Model<float>::init(desk_config(), {}, 5);
    Rng rng(6);
    auto x = Tensor<float>::randn({2, 16, 16, 48}, rng);
    auto y = model.block_forward(model.blocks[0], x, nullptr);
    CHECK(y.shape() == x.shape());
}

TEST_CASE("block with zero memory and identity out-linear reduces to the plain pipeline") {
    auto cfg = micro_config();
    auto model = Model<float>::init(cfg, {}, 7);
    auto& blk = model.blocks[0];
    for (auto& v : blk.mem_coarse->slots.values()) v = 0.f;
    for (auto& v : blk.mem_fine->slots.values()) v = 0.f;
    for (std::int64_t i = 0; i < 8; ++i)
        for (std::int64_t j = 0; j < 8; ++j)
            blk.linear_out->weight.values()[i * 8 + j] = (i == j) ? 1.f : 0.f;
    for (auto& v : blk.linear_out->bias.values()) v = 0.f;

    Rng rng(8);
    auto x = Tensor<float>::randn({2, 2, 2, 8}, rng);
    auto got = model.block_forward(blk, x, nullptr);
    auto z = blk.linear_in(x);
    auto expect = o::add(x, blk.norm(ss2d(z, blk.scan)));
    for (std::int64_t i = 0; i < got.numel(); ++i)
        CHECK(got.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-6));
}

TEST_CASE("downsample halves space and doubles width") {
    auto model = Model<float>::init(desk_config(), {}, 9);
    Rng rng(10);
    auto x = Tensor<float>::randn({2, 16, 16, 48}, rng);
    auto y = model.downsample(x, 0);
    CHECK(y.shape() == Shape{2, 8, 8, 96});
}

TEST_CASE("downsample of a constant map is a constant map") {
    auto model = Model<float>::init(desk_config(), {}, 11);
    auto x = Tensor<float>::full({1, 4, 4, 48}, 0.6f);
    auto y = model.downsample(x, 0);
    for (std::int64_t c = 0; c < 96; ++c) {
        const float ref = y.values()[c];
        for (std::int64_t p = 0; p < 4; ++p) CHECK(y.values()[p * 96 + c] == ref);
    }
}

TEST_CASE("downsample matches a loop reimplementation") {
    auto cfg = micro_config();
    cfg.image_size = 16;
    cfg.stage_depths = {1, 1};
    cfg.stage_dims = {8, 12};
    auto model = Model<double>::init(cfg, {}, 12);
    Rng rng(13);
    const std::int64_t H = 4, W = 4, C = 8, C2 = 12;
    auto x = Tensor<double>::randn({1, H, W, C}, rng);
    auto y = model.downsample(x, 0);

    const auto& ds = model.downsamples[0];
    for (std::int64_t i = 0; i < H / 2; ++i)
        for (std::int64_t j = 0; j < W / 2; ++j) {
            std::vector<double> merged(4 * C);
            for (std::int64_t q = 0; q < 4; ++q)
                for (std::int64_t c = 0; c < C; ++c)
                    merged[q * C + c] =
                        x.values()[((2 * i + q / 2) * W + 2 * j + q % 2) * C + c];
            std::vector<double> lin(C2);
            for (std::int64_t c2 = 0; c2 < C2; ++c2) {
                double acc = ds.linear.bias.values()[c2];
                for (std::int64_t k = 0; k < 4 * C; ++k)
                    acc += merged[k] * ds.linear.weight.values()[k * C2 + c2];
                lin[c2] = acc;
            }
            double mean = 0, var = 0;
            for (auto v : lin) mean += v;
            mean /= C2;
            for (auto v : lin) var += (v - mean) * (v - mean);
            var /= C2;
            for (std::int64_t c2 = 0; c2 < C2; ++c2) {
                const double expect = (lin[c2] - mean) / std::sqrt(var + 1e-5) *
                                          ds.norm.gamma.values()[c2] +
                                      ds.norm.beta.values()[c2];
                CHECK(y.values()[(i * (W / 2) + j) * C2 + c2] ==
                      doctest::Approx(expect).epsilon(1e-8));
            }
        }
}

TEST_CASE("classifier output is a distribution and shift-invariant") {
    auto model = Model<float>::init(micro_config(), {}, 14);
    Rng rng(15);
    auto img = Tensor<float>::randn({3, 8, 8, 3}, rng);
    auto out = model.forward(img);
    CHECK(out.logits.shape() == Shape{3, 2});
    for (std::int64_t b = 0; b < 3; ++b) {
        float s = 0;
        for (std::int64_t k = 0; k < 2; ++k) s += out.probs.values()[b * 2 + k];
        CHECK(std::abs(s - 1.0f) <= 1e-6f);
    }
    auto shifted = o::add_scalar(out.logits, 3.25f);
    auto p2 = o::softmax(shifted, 1);
    for (std::int64_t i = 0; i < p2.numel(); ++i)
        CHECK(std::abs(p2.values()[i] - out.probs.values()[i]) <= 1e-6f);

    auto zero_probs = o::softmax(Tensor<float>::zeros({1, 4}), 1);
    for (auto v : zero_probs.values()) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("desk-config forward produces [8,4] logits and stage-wise shapes hold") {
    auto model = Model<float>::init(desk_config(), {}, 16);
    Rng rng(17);
    auto img = Tensor<float>::randn({8, 64, 64, 3}, rng);
    auto out = model.forward(img);
    CHECK(out.logits.shape() == Shape{8, 4});
    CHECK(out.probs.shape() == Shape{8, 4});
    CHECK(out.aux.size() == 4);
    CHECK(out.aux[0].pooled_z.shape() == Shape{8, 48});
    CHECK(out.aux[3].pooled_z.shape() == Shape{8, 96});
    CHECK(out.aux[0].h_c.shape() == Shape{8, 4});
    CHECK(out.aux[0].m_bar_f.shape() == Shape{8, 48});
}

TEST_CASE("identical samples in a batch produce identical rows") {
    auto model = Model<float>::init(micro_config(), {}, 18);
    Rng rng(19);
    auto one = Tensor<float>::randn({1, 8, 8, 3}, rng);
    Tensor<float> both({2, 8, 8, 3});
    const auto n = static_cast<std::size_t>(one.numel());
    for (std::size_t i = 0; i < n; ++i) {
        both.values()[i] = one.values()[i];
        both.values()[n + i] = one.values()[i];
    }
    auto out = model.forward(both);
    for (std::int64_t k = 0; k < 2; ++k)
        CHECK(out.logits.values()[k] == out.logits.values()[2 + k]);
}

TEST_CASE("forward is deterministic") {
    auto model = Model<float>::init(micro_config(), {}, 20);
    Rng rng(21);
    auto img = Tensor<float>::randn({2, 8, 8, 3}, rng);
    auto a = model.forward(img);
    auto b = model.forward(img);
    CHECK(std::memcmp(a.logits.data(), b.logits.data(),
                      sizeof(float) * a.logits.numel()) == 0);
}

TEST_CASE("variant flags control the parameter-name set") {
    auto full = Model<float>::init(micro_config(), {}, 22);
    std::set<std::string> full_names;
    full.visit_params([&](const std::string& n, Tensor<float>&) { full_names.insert(n); });
    CHECK(full_names.count("block0.mem_coarse.slots") == 1);
    CHECK(full_names.count("block0.mem_fine.slots") == 1);

    auto no_cmn = Model<float>::init(micro_config(), {false, true, true}, 22);
    std::set<std::string> names;
    no_cmn.visit_params([&](const std::string& n, Tensor<float>&) { names.insert(n); });
    for (const auto& n : names) CHECK(n.find("mem_coarse") == std::string::npos);
    CHECK(names.count("block0.mem_fine.slots") == 1);
    for (const auto& n : names) CHECK(n.find("mlp_c") == std::string::npos);

    auto bare = Model<float>::init(micro_config(), {false, false, true}, 22);
    std::size_t bare_count = 0;
    bare.visit_params([&](const std::string& n, Tensor<float>&) {
        CHECK(n.find("mem_") == std::string::npos);
        CHECK(n.find("query") == std::string::npos);
        CHECK(n.find("nce_proj") == std::string::npos);
        ++bare_count;
    });
    CHECK(bare_count < full_names.size());
}

TEST_CASE("every parameter receives a gradient on a generic batch") {
    auto model = Model<float>::init(micro_config(), {}, 23);
    Rng rng(24);
    auto img = Tensor<float>::randn({4, 8, 8, 3}, rng);
    std::vector<std::int64_t> labels{0, 1, 0, 1};

    auto tape = Tape<float>::create();
    auto params = model.parameters();
    for (auto& [name, p] : params) tape->watch(*p);
    auto out = model.forward(img);
    auto losses = compute_losses(model, out, labels, LossConfig{});
    tape->backward(losses.total);
    for (auto& [name, p] : params) {
        INFO(name);
        REQUIRE(tape->has_grad(*p));
        auto g = tape->grad(*p);
        double norm = 0;
        for (auto v : g.values()) norm += static_cast<double>(v) * v;
        CHECK(norm > 0.0);
    }
    for (auto& [name, p] : params) p->unlink();
}

TEST_CASE("micro-model end-to-end gradients match finite differences") {
    auto model = Model<double>::init(micro_config(), {}, 25);
    Rng rng(26);
    auto img = Tensor<double>::randn({2, 8, 8, 3}, rng);
    std::vector<std::int64_t> labels{0, 1};
    LossConfig loss_cfg;

    auto loss_fn = [&]() {
        auto out = model.forward(img);
        return compute_losses(model, out, labels, loss_cfg).total;
    };
    auto params = model.parameters();
    // spot-check a representative subset here; the acceptance suite sweeps all
    std::vector<std::pair<std::string, Tensor<double>*>> subset;
    for (auto& [name, p] : params) {
        if (name == "block0.scan.A_log" || name == "block0.mem_coarse.slots" ||
            name == "block0.mem_fine.slots" || name == "block0.norm.gamma" ||
            name == "patch_embed.conv.weight" || name == "head.fc2.bias" ||
            name == "block0.scan.proj_delta.bias" || name == "block0.linear_out.weight") {
            subset.push_back({name, p});
        }
    }
    REQUIRE(subset.size() == 8);
    auto results = finite_diff_check_params(loss_fn, subset, 1e-5);
    for (const auto& r : results) {
        INFO(r.name, " rel err ", r.max_rel_err);
        CHECK(r.max_rel_err <= 1e-4);
    }
}
