#include <doctest.h>

#include <cmath>

#include "lcmae/errors.hpp"
#include "lcmae/grad_suite.hpp"
#include "lcmae/trainer.hpp"
#include "test_util.hpp"

using namespace lcmae;
using testutil::to_vec;

namespace {

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig c;
    c.model = tiny_model_config();
    c.augment.out_size = 8;
    c.epochs = epochs;
    c.warmup_epochs = 0;
    c.batch_size = 4;
    c.seed = 3;
    return c;
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params) out.push_back(to_vec(p.tensor));
    return out;
}

}  // namespace

TEST_CASE("adamw examples") {
    std::vector<double> theta{1.0}, g{1.0}, m{0.0}, v{0.0};
    adamw_update(theta, g, m, v, 1, 0.1, 0.0, 0.9, 0.999, 0.0);
    CHECK(theta[0] == doctest::Approx(0.9).epsilon(1e-12));

    theta = {2.0};
    g = {0.0};
    m = {0.0};
    v = {0.0};
    adamw_update(theta, g, m, v, 1, 0.1, 0.05, 0.9, 0.999, 1e-8);
    CHECK(theta[0] == doctest::Approx(2.0 - 0.1 * 0.05 * 2.0).epsilon(1e-15));

    // Zero gradients: the norm shrinks under decay and stays put without it.
    std::vector<double> a{3.0, -4.0}, z{0.0, 0.0}, ma{0, 0}, va{0, 0};
    double prev = 5.0;
    for (std::uint64_t t = 1; t <= 5; ++t) {
        adamw_update(a, z, ma, va, t, 0.1, 0.1, 0.9, 0.999, 1e-8);
        const double norm = std::hypot(a[0], a[1]);
        CHECK(norm < prev);
        prev = norm;
    }
    std::vector<double> b{3.0, -4.0}, mb{0, 0}, vb{0, 0};
    adamw_update(b, z, mb, vb, 1, 0.1, 0.0, 0.9, 0.999, 1e-8);
    CHECK(b == std::vector<double>{3.0, -4.0});

    std::vector<double> p1{0.5}, p2{0.5}, gg{0.3}, m1{0}, v1{0}, m2{0}, v2{0};
    adamw_update(p1, gg, m1, v1, 1, 0.01, 0.05, 0.9, 0.999, 1e-8);
    adamw_update(p2, gg, m2, v2, 1, 0.01, 0.05, 0.9, 0.999, 1e-8);
    CHECK(p1 == p2);
}

TEST_CASE("learning rate schedule") {
    const double base = 1.5e-3, lo = 1e-5;
    CHECK(lr_at(0, 100, 10, base, lo) == 0.0);
    CHECK(lr_at(5, 100, 10, base, lo) == doctest::Approx(base / 2.0).epsilon(1e-15));
    CHECK(lr_at(10, 100, 10, base, lo) == base);
    CHECK(lr_at(100, 100, 10, base, lo) == lo);
    CHECK(lr_at(55, 100, 10, base, lo) == doctest::Approx((base + lo) / 2.0).epsilon(1e-12));
    // Continuity at the junction.
    CHECK(std::abs(lr_at(11, 1000000, 10, base, lo) - lr_at(10, 1000000, 10, base, lo)) < 1e-9);
    CHECK(std::abs(lr_at(10, 1000, 10, base, lo) - lr_at(9, 1000, 10, base, lo)) <= base / 10.0 + 1e-15);
    double prev = base;
    for (std::size_t s = 11; s <= 100; ++s) {
        const double lr = lr_at(s, 100, 10, base, lo);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK(lr_at(0, 10, 0, base, lo) == base);
}

TEST_CASE("layer-wise decay") {
    CHECK(layer_lr_scale(4, 4, 0.65) == 1.0);
    CHECK(layer_lr_scale(3, 4, 0.65) == doctest::Approx(0.65).epsilon(1e-15));
    CHECK(layer_lr_scale(0, 4, 0.65) == doctest::Approx(0.17850625).epsilon(1e-14));

    CHECK(layer_group("encoder.patch_embed.weight", 4) == 0);
    CHECK(layer_group("encoder.pos", 4) == 0);
    CHECK(layer_group("encoder.blocks.0.q.weight", 4) == 1);
    CHECK(layer_group("encoder.blocks.3.fc2.bias", 4) == 4);
    CHECK(layer_group("decoder.mask_token", 4) == 5);
    CHECK(layer_group("projector.fc1.weight", 4) == 5);

    CHECK(uses_weight_decay({"encoder.blocks.0.q.weight", Tensor::zeros({2, 2})}));
    CHECK_FALSE(uses_weight_decay({"encoder.blocks.0.q.bias", Tensor::zeros({2})}));
    CHECK_FALSE(uses_weight_decay({"encoder.pos", Tensor::zeros({4, 2})}));
}

TEST_CASE("config validation") {
    TrainConfig c = tiny_train(2);
    CHECK_NOTHROW(c.validate());
    c.warmup_epochs = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train(2);
    c.layer_decay = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train(2);
    c.augment.out_size = 32;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_train(2);
    c.scale_lr_by_batch = true;
    CHECK(c.effective_lr() == doctest::Approx(c.base_lr * 4.0 / 256.0).epsilon(1e-15));
}

TEST_CASE("zero epochs returns the initial state") {
    const Dataset data = generate_synthetic({8, 8, 2}, 1);
    const TrainConfig c = tiny_train(0);
    const PretrainResult r = pretrain(c, data);
    CHECK(r.log.empty());
    const ModelState fresh = ModelState::create(c.model, model_seed(c.seed));
    CHECK(snapshot(r.state.online_params()) == snapshot(fresh.online_params()));
}

TEST_CASE("pretraining is deterministic and logs every step") {
    const Dataset data = generate_synthetic({10, 8, 2}, 2);
    const TrainConfig c = tiny_train(2);
    std::size_t seen = 0;
    PretrainHooks hooks;
    hooks.on_step = [&](const LogRecord&) { ++seen; };
    const PretrainResult a = pretrain(c, data, hooks);
    const PretrainResult b = pretrain(c, data);
    // 10 images at batch 4: the incomplete third batch is dropped.
    CHECK(a.log.size() == 4);
    CHECK(seen == 4);
    CHECK(a.log.front().step == 1);
    CHECK(a.log.back().epoch == 1);
    CHECK(snapshot(a.state.online_params()) == snapshot(b.state.online_params()));
    CHECK(snapshot(a.state.target_params()) == snapshot(b.state.target_params()));
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].total == b.log[i].total);
        CHECK(a.log[i].total == doctest::Approx(a.log[i].l_mim + 0.25 * a.log[i].l_gg).epsilon(1e-15));
    }

    PretrainHooks stop;
    stop.on_epoch = [](std::size_t, double) { return false; };
    CHECK(pretrain(c, data, stop).epochs_run == 1);
    CHECK_THROWS_AS(pretrain(c, Dataset{}), InputError);
}

TEST_CASE("alpha zero and the baseline give identical logs") {
    const Dataset data = generate_synthetic({8, 8, 2}, 5);
    TrainConfig a = tiny_train(1);
    a.model.guidance.alpha = 0.0;
    TrainConfig b = a;
    b.model.guidance.distance = Distance::none;
    const auto la = pretrain(a, data).log;
    const auto lb = pretrain(b, data).log;
    REQUIRE(la.size() == lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) {
        CHECK(la[i].l_mim == lb[i].l_mim);
        CHECK(la[i].total == lb[i].total);
    }
}

TEST_CASE("probe on separable features") {
    Rng rng(7);
    const std::size_t n = 200, d = 6;
    std::vector<double> f(n * d);
    std::vector<std::uint16_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<std::uint16_t>(i % 2);
        for (std::size_t j = 0; j < d; ++j) f[i * d + j] = rng.normal();
        f[i * d] += labels[i] == 0 ? -3.0 : 3.0;
    }
    ProbeConfig pc;
    pc.epochs = 50;
    pc.batch_size = 32;
    const ProbeResult r = linear_probe_features(Tensor::from_data({n, d}, f), labels, pc);
    CHECK(r.test_accuracy > 0.9);
    CHECK(r.n_test == 40);
    CHECK(r.n_train == 160);

    std::vector<std::uint16_t> one(n, 0);
    CHECK_THROWS_AS(linear_probe_features(Tensor::from_data({n, d}, f), one, pc), DegenerateError);
}

TEST_CASE("probe on a frozen random encoder") {
    // Two classes that differ in global brightness; a random encoder keeps
    // them separable.
    Dataset data;
    data.height = data.width = 8;
    data.has_labels = true;
    Rng rng(8);
    for (std::size_t i = 0; i < 80; ++i) {
        const std::uint16_t label = static_cast<std::uint16_t>(i % 2);
        Image img = Image::blank(3, 8, 8);
        for (std::size_t k = 0; k < img.pixels.size(); ++k) {
            const bool red = k < 64;
            const double base = red ? (label == 0 ? 0.15 : 0.85) : 0.5;
            img.pixels[k] = std::clamp(base + 0.1 * rng.normal(), 0.0, 1.0);
        }
        data.images.push_back(std::move(img));
        data.labels.push_back(label);
    }
    Rng init(9);
    ModelConfig mc = tiny_model_config();
    const Encoder enc = Encoder::create(mc.vit, init);
    ParamList params;
    enc.collect("encoder", params);
    const auto before = snapshot(params);

    ProbeConfig pc;
    pc.epochs = 200;
    pc.batch_size = 16;
    pc.lr = 0.05;
    const ProbeResult r = linear_probe(enc, data, pc);
    CHECK(r.test_accuracy > 0.9);
    CHECK(r.train_accuracy >= r.test_accuracy);
    CHECK(snapshot(params) == before);

    data.has_labels = false;
    CHECK_THROWS_AS(linear_probe(enc, data, pc), InputError);
}
