#include "lcmae/grad_suite.hpp"

#include <functional>
#include <memory>

#include "lcmae/dataset.hpp"
#include "lcmae/grad_check.hpp"

namespace lcmae {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = scale * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Values bounded away from zero, for kinks at the origin (abs, relu).
Tensor away_from_zero(Rng& rng, Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& e : v) e = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.5);
    return Tensor::from_data(std::move(shape), std::move(v));
}

class OpSuite {
public:
    OpSuite(std::uint64_t seed, double h) : rng_(seed), h_(h) {}

    void check(const std::string& name, const std::function<Tensor(const std::vector<Tensor>&)>& op,
               std::vector<Tensor> inputs) {
        auto weights = std::make_shared<Tensor>();
        Rng wrng = rng_.fork(results_.size() + 1);
        auto f = [&, weights]() {
            Tensor out = op(inputs);
            if (out.numel() == 1) return reshape(out, {});
            if (!weights->defined()) *weights = random_tensor(wrng, out.shape());
            return sum(mul(out, *weights));
        };
        for (auto& t : inputs) t.set_requires_grad(true);
        GradCheckOptions opts;
        opts.h = h_;
        std::size_t n = 0;
        for (const auto& t : inputs) n += t.numel();
        const auto rep = grad_check_report(f, inputs, opts);
        results_.push_back({name, rep.max_rel_error, n, "input " + std::to_string(rep.leaf), rep.analytic,
                            rep.numeric});
    }

    Rng& rng() { return rng_; }
    std::vector<GradCaseResult> take() { return std::move(results_); }

private:
    Rng rng_;
    double h_;
    std::vector<GradCaseResult> results_;
};

}  // namespace

ModelConfig tiny_model_config() {
    ModelConfig c;
    c.vit.image_size = 8;
    c.vit.patch_size = 4;
    c.vit.dim = 8;
    c.vit.depth = 1;
    c.vit.heads = 2;
    c.vit.mlp_ratio = 2.0;
    c.vit.decoder_dim = 8;
    c.vit.decoder_depth = 1;
    c.vit.decoder_heads = 2;
    c.guidance.head_hidden = 16;
    c.guidance.head_out = 8;
    return c;
}

std::vector<GradCaseResult> op_grad_checks(std::uint64_t seed, double h) {
    OpSuite s(seed, h);
    Rng& r = s.rng();
    using In = std::vector<Tensor>;

    s.check("add", [](const In& t) { return add(t[0], t[1]); }, {random_tensor(r, {2, 3, 4}), random_tensor(r, {2, 3, 4})});
    s.check("add_broadcast", [](const In& t) { return add(t[0], t[1]); }, {random_tensor(r, {2, 3, 4}), random_tensor(r, {4})});
    s.check("sub", [](const In& t) { return sub(t[0], t[1]); }, {random_tensor(r, {3, 4}), random_tensor(r, {3, 4})});
    s.check("mul_broadcast", [](const In& t) { return mul(t[0], t[1]); }, {random_tensor(r, {2, 3, 4}), random_tensor(r, {3, 4})});
    s.check("scale", [](const In& t) { return scale(t[0], -1.7); }, {random_tensor(r, {5})});
    s.check("square", [](const In& t) { return square(t[0]); }, {random_tensor(r, {2, 5})});
    s.check("absolute", [](const In& t) { return absolute(t[0]); }, {away_from_zero(r, {2, 5})});
    s.check("sum", [](const In& t) { return sum(t[0]); }, {random_tensor(r, {3, 4})});
    s.check("mean", [](const In& t) { return mean(t[0]); }, {random_tensor(r, {3, 4})});
    s.check("mean_tokens", [](const In& t) { return mean_tokens(t[0]); }, {random_tensor(r, {2, 5, 3})});
    s.check("reshape", [](const In& t) { return reshape(t[0], {4, 3}); }, {random_tensor(r, {2, 6})});
    s.check("transpose_last2", [](const In& t) { return transpose_last2(t[0]); }, {random_tensor(r, {2, 3, 4})});
    s.check("matmul", [](const In& t) { return matmul(t[0], t[1]); }, {random_tensor(r, {3, 4}), random_tensor(r, {4, 5})});
    s.check("matmul_batched", [](const In& t) { return matmul(t[0], t[1]); },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {2, 4, 2})});
    s.check("matmul_shared_rhs", [](const In& t) { return matmul(t[0], t[1]); },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {4, 2})});
    s.check("matmul_shared_lhs", [](const In& t) { return matmul(t[0], t[1]); },
            {random_tensor(r, {3, 4}), random_tensor(r, {2, 4, 2})});
    s.check("linear", [](const In& t) { return linear(t[0], t[1], t[2]); },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {4, 5}), random_tensor(r, {5})});
    s.check("softmax_lastdim", [](const In& t) { return softmax_lastdim(t[0]); }, {random_tensor(r, {3, 6})});
    s.check("layer_norm", [](const In& t) { return layer_norm(t[0], t[1], t[2], 1e-6); },
            {random_tensor(r, {2, 3, 6}), random_tensor(r, {6}), random_tensor(r, {6})});
    s.check("batch_norm_train", [](const In& t) {
                BatchNormState st = BatchNormState::create(4);
                st.gamma = t[1];
                st.beta = t[2];
                return batch_norm(t[0], st);
            },
            {random_tensor(r, {5, 4}), random_tensor(r, {4}), random_tensor(r, {4})});
    s.check("batch_norm_eval", [](const In& t) {
                BatchNormState st = BatchNormState::create(4);
                st.gamma = t[1];
                st.beta = t[2];
                st.running_mean = {0.1, -0.2, 0.3, 0.0};
                st.running_var = {0.5, 1.5, 2.0, 0.9};
                st.training = false;
                return batch_norm(t[0], st);
            },
            {random_tensor(r, {5, 4}), random_tensor(r, {4}), random_tensor(r, {4})});
    s.check("gelu", [](const In& t) { return gelu(t[0]); }, {random_tensor(r, {3, 7}, 2.0)});
    s.check("relu", [](const In& t) { return relu(t[0]); }, {away_from_zero(r, {3, 7})});
    s.check("l2_normalize", [](const In& t) { return l2_normalize(t[0], 1e-12); }, {random_tensor(r, {3, 5})});
    const IndexLists idx = {{2, 0}, {1, 3}};
    s.check("gather_rows", [&](const In& t) { return gather_rows(t[0], idx); }, {random_tensor(r, {2, 4, 3})});
    s.check("lookup_rows", [&](const In& t) { return lookup_rows(t[0], idx); }, {random_tensor(r, {4, 3})});
    s.check("scatter_rows", [&](const In& t) { return scatter_rows(t[0], t[1], idx, 5); },
            {random_tensor(r, {2, 2, 3}), random_tensor(r, {3})});
    s.check("prepend_token", [](const In& t) { return prepend_token(t[0], t[1]); },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {4})});
    s.check("concat_tokens", [](const In& t) { return concat_tokens(t[0], t[1]); },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {2, 2, 4})});
    s.check("slice_tokens", [](const In& t) { return slice_tokens(t[0], 1, 2); }, {random_tensor(r, {2, 4, 3})});
    const std::vector<std::size_t> labels = {0, 3, 1, 3};
    s.check("cross_entropy", [&](const In& t) { return cross_entropy(t[0], labels); }, {random_tensor(r, {4, 5})});
    {
        // Differences kept away from the Huber transition at |d| = beta.
        Tensor a = random_tensor(r, {3, 4});
        std::vector<double> bv(a.data().begin(), a.data().end());
        for (std::size_t i = 0; i < bv.size(); ++i) bv[i] += (i % 2 ? 1.0 : -1.0) * (i % 3 ? 0.4 : 2.2);
        s.check("smooth_l1_loss", [](const In& t) { return smooth_l1_loss(t[0], t[1], 1.0); },
                {a, Tensor::from_data({3, 4}, std::move(bv))});
    }
    s.check("multi_head_attention", [](const In& t) { return multi_head_attention(t[0], t[1], t[2], 2, false).out; },
            {random_tensor(r, {2, 3, 4}), random_tensor(r, {2, 5, 4}), random_tensor(r, {2, 5, 4})});
    {
        Rng br = r.fork(77);
        const Block block = Block::create(8, 2, 16, br);
        ParamList params;
        block.collect("block", params);
        In inputs = {random_tensor(r, {2, 3, 8})};
        for (const auto& p : params) inputs.push_back(p.tensor);
        s.check("transformer_block", [&](const In& t) { return block.forward(t[0], nullptr); }, inputs);
    }
    {
        Rng er = r.fork(78);
        ViTConfig vc = tiny_model_config().vit;
        const Encoder enc = Encoder::create(vc, er);
        const IndexLists pos = {{0, 3}, {2, 1}};
        s.check("patch_embed", [&](const In& t) { return patch_embed(t[0], enc.patch_embed, enc.pos, pos); },
                {random_tensor(r, {2, 2, vc.patch_dim()}), enc.patch_embed.weight, enc.patch_embed.bias, enc.pos});
        s.check("patchify", [&](const In& t) { return patchify(t[0], 4); }, {random_tensor(r, {2, 3, 8, 8})});
        s.check("unpatchify", [&](const In& t) { return unpatchify(t[0], 3, 8, 8, 4); },
                {random_tensor(r, {2, 4, 48})});
    }
    return s.take();
}

std::vector<GradCaseResult> objective_grad_checks(std::uint64_t seed, double h) {
    struct Variant {
        std::string name;
        std::function<void(ModelConfig&)> apply;
    };
    const std::vector<Variant> variants = {
        {"objective_cosine_global", [](ModelConfig&) {}},
        {"objective_infonce", [](ModelConfig& c) { c.guidance.distance = Distance::infonce; }},
        {"objective_smooth_l1", [](ModelConfig& c) { c.guidance.distance = Distance::smooth_l1; }},
        {"objective_token_wise", [](ModelConfig& c) { c.guidance.guidance_type = GuidanceType::token_wise; }},
        {"objective_global_plus_token_wise",
         [](ModelConfig& c) { c.guidance.guidance_type = GuidanceType::global_plus_token_wise; }},
        {"objective_visible_and_mask", [](ModelConfig& c) {
             c.guidance.guidance_type = GuidanceType::token_wise;
             c.guidance.guided_tokens = GuidedTokens::visible_and_mask;
         }},
        {"objective_cls_source", [](ModelConfig& c) {
             c.vit.use_cls = true;
             c.guidance.guidance_source = GuidanceSource::cls_token;
         }},
        {"objective_target_mask", [](ModelConfig& c) { c.guidance.target_mask_ratio = 0.5; }},
        {"objective_simmim", [](ModelConfig& c) { c.mim_mode = MimMode::simmim; }},
        {"objective_mim_only", [](ModelConfig& c) { c.guidance.distance = Distance::none; }},
    };

    const Dataset data = generate_synthetic({2, 8, 2}, seed);
    const auto images = data.pointers();
    std::vector<GradCaseResult> results;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        ModelConfig cfg = tiny_model_config();
        variants[i].apply(cfg);
        ModelState state = ModelState::create(cfg, mix_seed(seed, i));
        AugmentConfig aug;
        aug.out_size = cfg.vit.image_size;
        const PreparedBatch batch = prepare_batch(images, cfg, aug, mix_seed(seed, 100 + i));
        std::vector<Tensor> leaves;
        std::size_t n = 0;
        const ParamList params = state.online_params();
        for (const auto& p : params) {
            leaves.push_back(p.tensor);
            n += p.tensor.numel();
        }
        GradCheckOptions opts;
        opts.h = h;
        const auto rep = grad_check_report([&] { return compute_losses(state, batch).total; }, leaves, opts);
        results.push_back({variants[i].name, rep.max_rel_error, n, params[rep.leaf].name, rep.analytic, rep.numeric});
    }
    return results;
}

}  // namespace lcmae
