#include <doctest.h>

#include <cmath>

#include "lcmae/errors.hpp"
#include "lcmae/grad_check.hpp"
#include "lcmae/lcmae.hpp"
#include "lcmae/vit.hpp"
#include "test_util.hpp"

using namespace lcmae;
using testutil::randn;
using testutil::to_vec;

namespace {

ViTConfig small_vit() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 2;
    c.dim = 8;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2.0;
    c.decoder_dim = 8;
    c.decoder_depth = 1;
    c.decoder_heads = 2;
    return c;
}

IndexLists all_positions(std::size_t b, std::size_t n) {
    return full_plan(n, b).visible;
}

}  // namespace

TEST_CASE("config validation") {
    ViTConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.n_tokens() == 64);
    c.patch_size = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ViTConfig{};
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("patchify ordering") {
    std::vector<double> px(16);
    for (std::size_t i = 0; i < 16; ++i) px[i] = static_cast<double>(i);
    Tensor img = Tensor::from_data({1, 1, 4, 4}, px);
    auto p = patchify(img, 2);
    CHECK(p.shape() == Shape{1, 4, 4});
    // Patch 0 covers rows 0..1, cols 0..1.
    CHECK(to_vec(p).at(0) == 0.0);
    CHECK(to_vec(p).at(1) == 1.0);
    CHECK(to_vec(p).at(2) == 4.0);
    CHECK(to_vec(p).at(3) == 5.0);
    // Patch 1 is to the right of patch 0.
    CHECK(to_vec(p).at(4) == 2.0);

    auto single = patchify(img, 4);
    CHECK(single.shape() == Shape{1, 1, 16});
    CHECK(to_vec(single) == px);
    CHECK_THROWS_AS(patchify(img, 3), DimensionError);
}

TEST_CASE("patchify round trip is exact") {
    Rng rng(1);
    Tensor img = randn(rng, {2, 3, 32, 32});
    CHECK(to_vec(unpatchify(patchify(img, 4), 3, 32, 32, 4)) == to_vec(img));
}

TEST_CASE("patch embed") {
    Rng rng(2);
    const ViTConfig c = small_vit();
    Encoder enc = Encoder::create(c, rng);
    Linear zero{Tensor::zeros({c.patch_dim(), c.dim}), Tensor::zeros({c.dim})};
    Tensor patches = randn(rng, {1, 2, c.patch_dim()});
    auto out = patch_embed(patches, zero, enc.pos, {{2, 0}});
    for (std::size_t j = 0; j < c.dim; ++j) {
        CHECK(out[j] == enc.pos[2 * c.dim + j]);
        CHECK(out[c.dim + j] == enc.pos[j]);
    }
    CHECK_THROWS_AS(patch_embed(patches, zero, enc.pos, {{2}}), ContractError);

    Tensor small = randn(rng, {1, 2, c.patch_dim()});
    CHECK(grad_check([&](const Tensor& x) { return sum(square(patch_embed(x, enc.patch_embed, enc.pos, {{1, 3}}))); },
                     small, 1e-5) < 1e-5);
}

TEST_CASE("attention examples") {
    Rng rng(3);
    Tensor x = randn(rng, {1, 1, 4});
    auto one = multi_head_attention(x, x, x, 2, true);
    CHECK(one.weights[0] == 1.0);
    CHECK(one.weights[1] == 1.0);
    CHECK(to_vec(one.out) == to_vec(x));

    Tensor row = randn(rng, {1, 1, 4});
    Tensor two = concat_tokens(row, row);
    auto sym = multi_head_attention(two, two, two, 2, true);
    for (double w : sym.weights.data()) CHECK(w == 0.5);

    Tensor q = randn(rng, {1, 3, 4}), k = randn(rng, {1, 3, 4}), v = randn(rng, {1, 3, 4});
    CHECK(grad_check([&](const Tensor& t) { return sum(square(multi_head_attention(t, k, v, 2, false).out)); }, q,
                     1e-5) < 1e-4);
}

TEST_CASE("encoder shapes, attention rows and depth zero") {
    Rng rng(4);
    ViTConfig c = small_vit();
    Encoder enc = Encoder::create(c, rng);
    Tensor patches = randn(rng, {2, 5, c.patch_dim()});
    const IndexLists pos = {{0, 3, 4, 9, 15}, {1, 2, 7, 8, 11}};
    EncodeOptions opts;
    opts.capture_attention = true;
    auto out = encoder_forward(enc, patches, pos, opts);
    CHECK(out.tokens.shape() == Shape{2, 5, c.dim});
    CHECK(out.attention.size() == c.depth);
    for (const auto& a : out.attention) {
        const std::size_t n = a.dim(-1);
        for (std::size_t r = 0; r < a.numel() / n; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a[r * n + j];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
    CHECK_THROWS_AS(encoder_forward(enc, Tensor::zeros({1, 0, c.patch_dim()}), {{}}), ContractError);

    c.depth = 0;
    Rng r0(5);
    Encoder flat = Encoder::create(c, r0);
    auto o0 = encoder_forward(flat, patches, pos);
    CHECK(to_vec(o0.tokens) == to_vec(flat.norm(patch_embed(patches, flat.patch_embed, flat.pos, pos))));
}

TEST_CASE("encoder is permutation equivariant") {
    Rng rng(6);
    const ViTConfig c = small_vit();
    Encoder enc = Encoder::create(c, rng);
    Tensor patches = randn(rng, {1, 6, c.patch_dim()});
    const IndexLists pos = {{1, 4, 5, 8, 10, 13}};
    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    IndexLists ppos = {{}};
    for (auto i : perm) ppos[0].push_back(pos[0][i]);
    Tensor pp = gather_rows(patches, {perm});
    auto a = encoder_forward(enc, patches, pos).tokens;
    auto b = encoder_forward(enc, pp, ppos).tokens;
    auto a_perm = gather_rows(a, {perm});
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(std::abs(a_perm[i] - b[i]) < 1e-9);
}

TEST_CASE("decoder shapes and reachability") {
    Rng rng(7);
    ViTConfig c;
    ModelConfig mc;
    mc.vit = c;
    Encoder enc = Encoder::create(c, rng);
    Decoder dec = Decoder::create(c, rng);
    const auto plan = sample_mask(64, 0.75, 2, 3);
    Tensor patches = randn(rng, {2, 64, c.patch_dim()});
    auto split = split_tokens(patches, plan);
    auto t = encoder_forward(enc, split.visible, plan.visible);
    auto d = decoder_forward(dec, t.tokens, plan);
    CHECK(d.prediction.shape() == Shape{2, 48, 48});
    mim_loss(d.prediction, split.targets, true).backward();
    bool nonzero = false;
    for (double g : enc.patch_embed.weight.grad()) nonzero = nonzero || g != 0.0;
    CHECK(nonzero);

    const auto none = full_plan(64, 1);
    Tensor all = randn(rng, {1, 64, c.patch_dim()});
    auto full = encoder_forward(enc, all, none.visible);
    auto empty = decoder_forward(dec, full.tokens, none);
    CHECK(empty.prediction.shape() == Shape{1, 0, 48});
    CHECK(mim_loss(empty.prediction, Tensor::zeros({1, 0, 48}), true).item() == 0.0);
}

TEST_CASE("full-token output does not depend on any plan") {
    Rng rng(8);
    const ViTConfig c = small_vit();
    Encoder enc = Encoder::create(c, rng);
    Tensor patches = randn(rng, {1, 16, c.patch_dim()});
    auto a = encoder_forward(enc, patches, all_positions(1, 16)).tokens;
    (void)sample_mask(16, 0.5, 1, 99);
    auto b = encoder_forward(enc, patches, all_positions(1, 16)).tokens;
    CHECK(to_vec(a) == to_vec(b));
}
