#include <doctest.h>

#include <cmath>

#include "lcmae/dataset.hpp"
#include "lcmae/errors.hpp"
#include "lcmae/grad_suite.hpp"
#include "lcmae/lcmae.hpp"
#include "lcmae/trainer.hpp"
#include "test_util.hpp"

using namespace lcmae;
using testutil::randn;
using testutil::to_vec;

namespace {

AugmentConfig tiny_augment() {
    AugmentConfig a;
    a.out_size = 8;
    return a;
}

bool all_zero(std::span<const double> v) {
    for (double x : v) {
        if (x != 0.0) return false;
    }
    return true;
}

bool any_nonzero(std::span<const double> v) { return !v.empty() && !all_zero(v); }

}  // namespace

TEST_CASE("mim loss examples") {
    Rng rng(1);
    Tensor t = randn(rng, {2, 3, 48});
    CHECK(mim_loss(t, t, false).item() == 0.0);

    std::vector<double> off(48, 0.0);
    off[0] = 1.0;
    Tensor pred = Tensor::from_data({1, 1, 48}, off);
    CHECK(mim_loss(pred, Tensor::zeros({1, 1, 48}), false).item() == doctest::Approx(1.0 / 48.0).epsilon(1e-15));

    Tensor flat = Tensor::full({1, 2, 48}, 0.7);
    const Tensor std_flat = normalize_patch_targets(flat);
    for (double v : std_flat.data()) CHECK(std::abs(v) < 1e-9);
    CHECK(mim_loss(Tensor::zeros({1, 2, 48}), flat, true).item() < 1e-18);

    CHECK(mim_loss(Tensor::zeros({2, 0, 48}), Tensor::zeros({2, 0, 48}), true).item() == 0.0);
    CHECK_THROWS_AS(mim_loss(Tensor::zeros({1, 2, 48}), Tensor::zeros({1, 3, 48}), true), DimensionError);

    // Per-row standardization with unbiased variance.
    Tensor row = Tensor::from_data({1, 1, 2}, {1.0, 3.0});
    auto n = normalize_patch_targets(row);
    CHECK(n[0] == doctest::Approx(-1.0 / std::sqrt(2.0 + 1e-6)).epsilon(1e-14));
    CHECK(n[1] == doctest::Approx(1.0 / std::sqrt(2.0 + 1e-6)).epsilon(1e-14));
}

TEST_CASE("cosine guidance examples and bounds") {
    Tensor a = Tensor::from_data({1, 2}, {1, 0});
    Tensor b = Tensor::from_data({1, 2}, {0, 1});
    CHECK(global_guidance_loss(a, a, Distance::cosine).item() == 0.0);
    CHECK(global_guidance_loss(a, b, Distance::cosine).item() == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(global_guidance_loss(a, scale(a, -1.0), Distance::cosine).item() == doctest::Approx(4.0).epsilon(1e-15));

    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        Tensor u = randn(rng, {3, 5});
        Tensor v = randn(rng, {3, 5});
        const double l = global_guidance_loss(u, v, Distance::cosine).item();
        CHECK(l >= 0.0);
        CHECK(l <= 4.0);
        const double c = std::exp(rng.uniform(-3.0, 3.0));
        CHECK(std::abs(global_guidance_loss(scale(u, c), v, Distance::cosine).item() - l) < 1e-9);
        CHECK(std::abs(global_guidance_loss(u, scale(v, c), Distance::cosine).item() - l) < 1e-9);
    }
    CHECK(global_guidance_loss(a, b, Distance::none).item() == 0.0);
    CHECK_THROWS_AS(global_guidance_loss(a, Tensor::zeros({1, 3}), Distance::cosine), DimensionError);
}

TEST_CASE("infonce and smooth l1 guidance") {
    Tensor u = Tensor::from_data({1, 2}, {1, 0});
    CHECK_THROWS_AS(global_guidance_loss(u, u, Distance::infonce), DegenerateError);

    // Two orthogonal pairs matched to themselves: logits diag 1/T, off-diag 0.
    Tensor e = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    const double t = 0.2;
    const double oracle = -std::log(std::exp(1.0 / t) / (std::exp(1.0 / t) + 1.0));
    CHECK(global_guidance_loss(e, e, Distance::infonce, t).item() == doctest::Approx(oracle).epsilon(1e-12));

    // Huber with beta 1: 0.5 d^2 inside, |d| - 0.5 outside, averaged.
    Tensor p = Tensor::from_data({1, 2}, {0.5, 2.0});
    CHECK(global_guidance_loss(p, Tensor::zeros({1, 2}), Distance::smooth_l1).item() ==
          doctest::Approx((0.125 + 1.5) / 2.0).epsilon(1e-15));
}

TEST_CASE("token-wise guidance") {
    Rng rng(3);
    Tensor x = randn(rng, {2, 3, 4});
    CHECK(token_wise_guidance_loss(x, x, Distance::cosine).item() == doctest::Approx(0.0).epsilon(1e-15));

    Tensor on = Tensor::from_data({1, 3, 2}, {1, 0, 0, 1, 1, 0});
    Tensor tg = Tensor::from_data({1, 3, 2}, {1, 0, 0, 1, 0, 1});
    CHECK(token_wise_guidance_loss(on, tg, Distance::cosine).item() == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(token_wise_guidance_loss(on, Tensor::zeros({1, 2, 2}), Distance::cosine), ContractError);
}

TEST_CASE("ema update examples") {
    auto make = [](double v) { return ParamList{{"w", Tensor::full({3}, v)}}; };
    ParamList t = make(1.0), o = make(0.0);
    ema_update(t, o, 1.0);
    CHECK(to_vec(t[0].tensor) == std::vector<double>{1, 1, 1});
    ema_update(t, o, 0.996);
    for (double v : t[0].tensor.data()) CHECK(v == doctest::Approx(0.996).epsilon(1e-15));
    ema_update(t, o, 0.0);
    CHECK(to_vec(t[0].tensor) == to_vec(o[0].tensor));

    Rng rng(4);
    ParamList a{{"w", randn(rng, {5})}}, b{{"w", a[0].tensor.clone()}};
    ParamList snap{{"w", randn(rng, {5})}};
    const double tau = 0.9;
    ema_update(a, snap, tau);
    ema_update(a, snap, tau);
    ema_update(b, snap, tau * tau);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a[0].tensor[i] - b[0].tensor[i]) < 1e-12);

    ParamList wrong{{"w", Tensor::zeros({4})}};
    CHECK_THROWS_AS(ema_update(a, wrong, 0.5), ContractError);
    CHECK_THROWS_AS(ema_update(a, ParamList{}, 0.5), ContractError);
}

TEST_CASE("pooling") {
    Rng rng(5);
    Tensor t = randn(rng, {1, 1, 4});
    Tensor pair = concat_tokens(t, scale(t, -1.0));
    const Tensor pooled = mean_tokens(pair);
    for (double v : pooled.data()) CHECK(v == 0.0);
    CHECK(to_vec(mean_tokens(t)) == to_vec(t));

    ModelState s = ModelState::create(tiny_model_config(), 1);
    CHECK_THROWS_AS(pooled_online_repr(s, Tensor::zeros({2, 0, 8})), ContractError);
    CHECK(pooled_online_repr(s, randn(rng, {2, 3, 8})).shape() == Shape{2, 8});
}

TEST_CASE("configuration checks") {
    ModelConfig c = tiny_model_config();
    c.guidance.guidance_source = GuidanceSource::cls_token;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.vit.use_cls = true;
    CHECK_NOTHROW(c.validate());
    c = tiny_model_config();
    c.guidance.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.guidance.tau = 1.0;
    c.guidance.target_mask_ratio = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.guidance.target_mask_ratio = 0.5;
    c.guidance.guidance_type = GuidanceType::token_wise;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(parse_distance("infonce") == Distance::infonce);
    CHECK(to_string(GuidedTokens::visible_and_mask) == "visible_and_mask");
    CHECK_THROWS_AS(parse_mim_mode("beit"), ConfigError);
}

TEST_CASE("target side receives no gradient") {
    const Dataset data = generate_synthetic({4, 8, 2}, 3);
    for (Distance d : {Distance::cosine, Distance::infonce, Distance::smooth_l1}) {
        for (GuidanceType gt : {GuidanceType::global, GuidanceType::token_wise}) {
            ModelConfig cfg = tiny_model_config();
            cfg.guidance.distance = d;
            cfg.guidance.guidance_type = gt;
            ModelState s = ModelState::create(cfg, 9);
            const auto batch = prepare_batch(data.pointers(), cfg, tiny_augment(), 11);
            compute_losses(s, batch).total.backward();
            for (const auto& p : s.target_params()) {
                INFO(p.name);
                CHECK(all_zero(p.tensor.grad()));
            }
            bool reached = false;
            for (const auto& p : s.online_params()) reached = reached || (p.name.rfind("encoder.patch_embed", 0) == 0 && any_nonzero(p.tensor.grad()));
            CHECK(reached);
        }
    }
}

TEST_CASE("mask token gradient depends on the guided set") {
    const Dataset data = generate_synthetic({4, 8, 2}, 4);
    ModelConfig cfg = tiny_model_config();
    {
        ModelState s = ModelState::create(cfg, 2);
        const auto batch = prepare_batch(data.pointers(), cfg, tiny_augment(), 5);
        const LossTerms l = compute_losses(s, batch);
        l.guidance.backward();
        CHECK(all_zero(s.decoder.mask_token.grad()));
        s.decoder.mask_token.zero_grad();
        l.mim.backward();
        CHECK(any_nonzero(s.decoder.mask_token.grad()));
    }
    cfg.guidance.guided_tokens = GuidedTokens::visible_and_mask;
    ModelState s = ModelState::create(cfg, 2);
    const auto batch = prepare_batch(data.pointers(), cfg, tiny_augment(), 5);
    compute_losses(s, batch).guidance.backward();
    CHECK(any_nonzero(s.decoder.mask_token.grad()));
}

TEST_CASE("cls source reaches the cls embedding") {
    const Dataset data = generate_synthetic({4, 8, 2}, 6);
    ModelConfig cfg = tiny_model_config();
    cfg.vit.use_cls = true;
    cfg.guidance.guidance_source = GuidanceSource::cls_token;
    ModelState s = ModelState::create(cfg, 3);
    compute_losses(s, prepare_batch(data.pointers(), cfg, tiny_augment(), 1)).guidance.backward();
    CHECK(any_nonzero(s.online.cls_token.grad()));
}

TEST_CASE("total combines the two terms") {
    const Dataset data = generate_synthetic({4, 8, 2}, 7);
    ModelConfig cfg = tiny_model_config();
    ModelState s = ModelState::create(cfg, 4);
    const LossTerms l = compute_losses(s, prepare_batch(data.pointers(), cfg, tiny_augment(), 2));
    CHECK(l.total.item() == l.mim.item() + 0.25 * l.guidance.item());
    CHECK(l.guidance.item() > 0.0);
}

TEST_CASE("target masking consumes a subset") {
    const Dataset data = generate_synthetic({2, 32, 2}, 8);
    ModelConfig cfg;
    cfg.guidance.target_mask_ratio = 0.75;
    const auto batch = prepare_batch(data.pointers(), cfg, AugmentConfig{}, 3);
    REQUIRE(batch.target_plan.has_value());
    CHECK(batch.target_plan->n_visible() == 16);
    CHECK(batch.plan.n_masked() == 48);
}

TEST_CASE("distance none matches the plain autoencoder path") {
    const Dataset data = generate_synthetic({8, 8, 2}, 9);
    ModelConfig cfg = tiny_model_config();
    cfg.guidance.distance = Distance::none;
    cfg.guidance.alpha = 0.0;
    TrainConfig tc;
    tc.model = cfg;

    ModelState a = ModelState::create(cfg, 5);
    ModelState b = ModelState::create(cfg, 5);
    AdamW opt_a = make_optimizer(a, tc);
    ParamList mae_params;
    b.online.collect("encoder", mae_params);
    b.decoder.collect("decoder", mae_params);
    AdamW opt_b(make_optim_params(mae_params, cfg.vit.depth, tc.layer_decay),
                {tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay});
    const auto aug = tiny_augment();
    for (std::uint64_t step = 0; step < 5; ++step) {
        const auto ra = lcmae_step(a, opt_a, data.pointers(), aug, 1e-3, step);
        const auto rb = mae_step(b.online, b.decoder, opt_b, data.pointers(), aug, cfg.mask_ratio,
                                 cfg.guidance.norm_pix_targets, 1e-3, step);
        CHECK(ra.total == rb.total);
        CHECK(ra.guidance == 0.0);
    }
    for (std::size_t i = 0; i < mae_params.size(); ++i) {
        INFO(mae_params[i].name);
        CHECK(to_vec(a.online_params()[i].tensor) == to_vec(mae_params[i].tensor));
    }
}

TEST_CASE("simmim mode") {
    const Dataset data = generate_synthetic({2, 32, 2}, 10);
    ModelConfig cfg;
    cfg.mim_mode = MimMode::simmim;
    ModelState s = ModelState::create(cfg, 6);
    const auto batch = prepare_batch(data.pointers(), cfg, AugmentConfig{}, 4);
    const auto split = split_tokens(batch.online_patches, batch.plan);
    const auto enc = encoder_forward_substituted(s.online, split.visible, batch.plan);
    CHECK(enc.tokens.dim(1) == 64);
    CHECK(batch.plan.n_masked() == 48);

    ModelState plain = ModelState::create(tiny_model_config(), 1);
    TrainConfig tc;
    AdamW opt = make_optimizer(plain, tc);
    CHECK_THROWS_AS(simmim_mode_step(plain, opt, data.pointers(), AugmentConfig{}, 1e-3, 1), ConfigError);

    // Reconstruction-only SimMIM objective when alpha is zero.
    cfg.guidance.alpha = 0.0;
    ModelState z = ModelState::create(cfg, 6);
    const LossTerms l = compute_losses(z, batch);
    CHECK(l.total.item() == l.mim.item());
}
