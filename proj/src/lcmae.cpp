#include "lcmae/lcmae.hpp"

#include <algorithm>
#include <cmath>

#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

constexpr std::uint64_t kMaskTag = 0x6d61736bULL;
constexpr std::uint64_t kTargetMaskTag = 0x746d736bULL;
constexpr double kNormEps = 1e-12;

template <typename E>
E parse_enum(const std::string& text, std::initializer_list<E> values, const char* what) {
    std::string options;
    for (E v : values) {
        if (to_string(v) == text) return v;
        options += (options.empty() ? "" : ", ") + to_string(v);
    }
    throw ConfigError(std::string("unknown ") + what + " '" + text + "' (expected one of " + options + ")");
}

Linear clone_linear(const Linear& l) {
    return {l.weight.clone(), l.bias.defined() ? l.bias.clone() : Tensor()};
}

LayerNorm clone_norm(const LayerNorm& n) { return {n.gamma.clone(), n.beta.clone(), n.eps}; }

Block clone_block(const Block& b) {
    Block c;
    c.norm1 = clone_norm(b.norm1);
    c.q = clone_linear(b.q);
    c.k = clone_linear(b.k);
    c.v = clone_linear(b.v);
    c.proj = clone_linear(b.proj);
    c.norm2 = clone_norm(b.norm2);
    c.fc1 = clone_linear(b.fc1);
    c.fc2 = clone_linear(b.fc2);
    c.heads = b.heads;
    return c;
}

Encoder clone_encoder(const Encoder& e) {
    Encoder c;
    c.config = e.config;
    c.patch_embed = clone_linear(e.patch_embed);
    c.pos = e.pos.clone();
    if (e.cls_token.defined()) c.cls_token = e.cls_token.clone();
    c.mask_token = e.mask_token.clone();
    for (const auto& b : e.blocks) c.blocks.push_back(clone_block(b));
    c.norm = clone_norm(e.norm);
    return c;
}

// [b, k, w] -> [b*k, w]
Tensor flatten_tokens(const Tensor& t) { return reshape(t, {t.dim(0) * t.dim(1), t.dim(2)}); }

Tensor project_tokens(Mlp& head, const Tensor& tokens) {
    const Tensor flat = head.forward(flatten_tokens(tokens));
    return reshape(flat, {tokens.dim(0), tokens.dim(1), flat.dim(1)});
}

// Row of each online grid position inside the target token sequence.
IndexLists align_rows(const IndexLists& online_positions, const IndexLists& target_positions) {
    IndexLists rows(online_positions.size());
    for (std::size_t i = 0; i < online_positions.size(); ++i) {
        const auto& tp = target_positions.at(i);
        for (auto p : online_positions[i]) {
            const auto it = std::lower_bound(tp.begin(), tp.end(), p);
            if (it == tp.end() || *it != p) {
                throw ContractError("token-wise guidance: grid position " + std::to_string(p) +
                                    " has no target token to align with");
            }
            rows[i].push_back(static_cast<std::size_t>(it - tp.begin()));
        }
    }
    return rows;
}

IndexLists concat_lists(const IndexLists& a, const IndexLists& b) {
    IndexLists out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i].insert(out[i].end(), b[i].begin(), b[i].end());
    return out;
}

struct TargetSide {
    EncoderOutput encoded;
    IndexLists positions;  // grid index of each patch token row
};

TargetSide encode_target(ModelState& state, const Tensor& target_patches, const MaskPlan* target_plan) {
    TargetSide side;
    if (target_plan) {
        side.positions = target_plan->visible;
        side.encoded = encoder_forward(state.target, gather_rows(target_patches, target_plan->visible),
                                       target_plan->visible);
    } else {
        side.positions = full_plan(target_patches.dim(1), target_patches.dim(0)).visible;
        side.encoded = encoder_forward(state.target, target_patches, side.positions);
    }
    return side;
}

Tensor target_global(ModelState& state, const EncoderOutput& encoded) {
    const auto& g = state.config.guidance;
    const Tensor pooled =
        g.guidance_source == GuidanceSource::cls_token ? encoded.cls() : mean_tokens(encoded.patch_tokens());
    return state.target_projector.forward(pooled).detach();
}

std::vector<const Image*> as_pointers(const std::vector<Image>& images) {
    std::vector<const Image*> out;
    for (const auto& im : images) out.push_back(&im);
    return out;
}

}  // namespace

std::string to_string(Distance v) {
    switch (v) {
        case Distance::cosine: return "cosine";
        case Distance::infonce: return "infonce";
        case Distance::smooth_l1: return "smooth_l1";
        case Distance::none: return "none";
    }
    return "?";
}

std::string to_string(GuidanceType v) {
    switch (v) {
        case GuidanceType::global: return "global";
        case GuidanceType::token_wise: return "token_wise";
        case GuidanceType::global_plus_token_wise: return "global_plus_token_wise";
    }
    return "?";
}

std::string to_string(GuidanceSource v) {
    return v == GuidanceSource::cls_token ? "cls_token" : "visible_tokens_pooled";
}

std::string to_string(GuidedTokens v) { return v == GuidedTokens::visible_and_mask ? "visible_and_mask" : "visible_only"; }

std::string to_string(MimMode v) { return v == MimMode::simmim ? "simmim" : "mae"; }

Distance parse_distance(const std::string& text) {
    return parse_enum(text, {Distance::cosine, Distance::infonce, Distance::smooth_l1, Distance::none}, "distance");
}

GuidanceType parse_guidance_type(const std::string& text) {
    return parse_enum(text, {GuidanceType::global, GuidanceType::token_wise, GuidanceType::global_plus_token_wise},
                      "guidance type");
}

GuidanceSource parse_guidance_source(const std::string& text) {
    return parse_enum(text, {GuidanceSource::visible_tokens_pooled, GuidanceSource::cls_token}, "guidance source");
}

GuidedTokens parse_guided_tokens(const std::string& text) {
    return parse_enum(text, {GuidedTokens::visible_only, GuidedTokens::visible_and_mask}, "guided tokens");
}

MimMode parse_mim_mode(const std::string& text) { return parse_enum(text, {MimMode::mae, MimMode::simmim}, "mim mode"); }

void GuidanceConfig::validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("guidance.alpha must be non-negative");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("guidance.tau must lie in (0, 1]");
    if (!(target_mask_ratio >= 0.0 && target_mask_ratio < 1.0)) {
        throw ConfigError("guidance.target_mask_ratio must lie in [0, 1)");
    }
    if (head_hidden == 0 || head_out == 0) throw ConfigError("guidance head widths must be positive");
    if (!(infonce_temperature > 0.0)) throw ConfigError("guidance.infonce_temperature must be positive");
}

void ModelConfig::validate() const {
    vit.validate();
    guidance.validate();
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
    if (guidance.distance != Distance::none && guidance.guidance_source == GuidanceSource::cls_token &&
        !vit.use_cls) {
        throw ConfigError("guidance_source = cls_token needs vit.use_cls = true");
    }
    // A masked target view has no token for some online positions.
    if (guidance.distance != Distance::none && guidance.guidance_type != GuidanceType::global &&
        guidance.target_mask_ratio > 0.0) {
        throw ConfigError("token-wise guidance needs guidance.target_mask_ratio = 0");
    }
}

Mlp Mlp::create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool out_bias) {
    Mlp m;
    // No bias ahead of batch norm: the batch mean subtraction removes it.
    m.fc1 = Linear::create(in, hidden, rng, false);
    m.bn = BatchNormState::create(hidden);
    m.fc2 = Linear::create(hidden, out, rng, out_bias);
    return m;
}

Tensor Mlp::forward(const Tensor& x) { return fc2(relu(batch_norm(fc1(x), bn))); }

void Mlp::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    out.push_back({prefix + ".bn.gamma", bn.gamma});
    out.push_back({prefix + ".bn.beta", bn.beta});
    fc2.collect(prefix + ".fc2", out);
}

Mlp Mlp::clone() const {
    Mlp c;
    c.fc1 = clone_linear(fc1);
    c.bn = bn;
    c.bn.gamma = bn.gamma.clone();
    c.bn.beta = bn.beta.clone();
    c.fc2 = clone_linear(fc2);
    return c;
}

ModelState ModelState::create(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const Rng root(seed);
    const auto& v = config.vit;
    const auto& g = config.guidance;
    ModelState s;
    s.config = config;
    Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4), r5 = root.fork(5),
        r6 = root.fork(6);
    s.online = Encoder::create(v, r1);
    s.decoder = Decoder::create(v, r2);
    s.simmim_head = Linear::create(v.dim, v.patch_dim(), r3);
    // The online projector always feeds the predictor's bias-free fc1 and
    // batch norm, so an output bias there would be dead.
    s.projector = Mlp::create(v.dim, g.head_hidden, g.head_out, r4, false);
    s.predictor = Mlp::create(g.head_out, g.head_hidden, g.head_out, r5);
    s.mask_adapter = Linear::create(v.decoder_dim, v.dim, r6);
    s.target = clone_encoder(s.online);
    s.target_projector = s.projector.clone();
    return s;
}

ParamList ModelState::online_params() const {
    ParamList out;
    online.collect("encoder", out);
    decoder.collect("decoder", out);
    simmim_head.collect("simmim_head", out);
    projector.collect("projector", out);
    predictor.collect("predictor", out);
    mask_adapter.collect("mask_adapter", out);
    return out;
}

ParamList ModelState::target_params() const {
    ParamList out;
    target.collect("target_encoder", out);
    target_projector.collect("target_projector", out);
    return out;
}

ParamList ModelState::ema_sources() const {
    ParamList out;
    online.collect("encoder", out);
    projector.collect("projector", out);
    return out;
}

std::vector<BufferRef> ModelState::buffers() {
    std::vector<BufferRef> out;
    for (auto [name, mlp] : {std::pair<const char*, Mlp*>{"projector", &projector},
                             {"predictor", &predictor},
                             {"target_projector", &target_projector}}) {
        out.push_back({std::string(name) + ".bn.running_mean", &mlp->bn.running_mean});
        out.push_back({std::string(name) + ".bn.running_var", &mlp->bn.running_var});
    }
    return out;
}

Tensor normalize_patch_targets(const Tensor& targets) {
    const std::size_t d = targets.dim(-1);
    if (d < 2) throw ContractError("per-patch normalization needs at least 2 values per patch");
    const auto src = targets.data();
    std::vector<double> out(src.size());
    for (std::size_t r = 0; r < src.size() / d; ++r) {
        const double* row = src.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += (row[j] - mu) * (row[j] - mu);
        const double denom = std::sqrt(ss / static_cast<double>(d - 1) + 1e-6);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) / denom;
    }
    return Tensor::from_data(targets.shape(), std::move(out));
}

Tensor mim_loss(const Tensor& pred, const Tensor& targets, bool norm_pix) {
    if (pred.shape() != targets.shape()) {
        throw DimensionError("mim_loss: prediction " + shape_str(pred.shape()) + " vs targets " +
                             shape_str(targets.shape()));
    }
    if (pred.numel() == 0) return Tensor::scalar(0.0);
    const Tensor t = norm_pix ? normalize_patch_targets(targets) : targets.detach();
    return mean(square(sub(pred, t)));
}

Tensor l1_mim_loss(const Tensor& pred, const Tensor& targets, bool norm_pix) {
    if (pred.shape() != targets.shape()) {
        throw DimensionError("l1_mim_loss: prediction " + shape_str(pred.shape()) + " vs targets " +
                             shape_str(targets.shape()));
    }
    if (pred.numel() == 0) return Tensor::scalar(0.0);
    const Tensor t = norm_pix ? normalize_patch_targets(targets) : targets.detach();
    return mean(absolute(sub(pred, t)));
}

Tensor global_guidance_loss(const Tensor& u, const Tensor& v, Distance kind, double temperature) {
    if (kind == Distance::none) return Tensor::scalar(0.0);
    if (u.ndim() != 2 || u.shape() != v.shape()) {
        throw DimensionError("guidance loss: online " + shape_str(u.shape()) + " vs target " + shape_str(v.shape()));
    }
    const std::size_t b = u.dim(0);
    if (b == 0) throw ContractError("guidance loss on an empty batch");
    switch (kind) {
        case Distance::cosine: {
            const Tensor diff = sub(l2_normalize(u, kNormEps), l2_normalize(v, kNormEps));
            return scale(sum(square(diff)), 1.0 / static_cast<double>(b));
        }
        case Distance::infonce: {
            if (b < 2) throw DegenerateError("InfoNCE guidance needs a batch of at least 2");
            const Tensor un = l2_normalize(u, kNormEps);
            const Tensor vn = l2_normalize(v, kNormEps);
            const Tensor logits = scale(matmul(un, transpose_last2(vn)), 1.0 / temperature);
            std::vector<std::size_t> labels(b);
            for (std::size_t i = 0; i < b; ++i) labels[i] = i;
            const Tensor both = add(cross_entropy(logits, labels), cross_entropy(transpose_last2(logits), labels));
            return scale(both, 0.5);
        }
        case Distance::smooth_l1:
            return smooth_l1_loss(u, v, 1.0);
        case Distance::none:
            break;
    }
    return Tensor::scalar(0.0);
}

Tensor token_wise_guidance_loss(const Tensor& online, const Tensor& target, Distance kind, double temperature) {
    if (online.ndim() != 3 || online.shape() != target.shape()) {
        throw ContractError("token-wise guidance: online tokens " + shape_str(online.shape()) +
                            " not aligned with target tokens " + shape_str(target.shape()));
    }
    return global_guidance_loss(flatten_tokens(online), flatten_tokens(target), kind, temperature);
}

Tensor pooled_online_repr(ModelState& state, const Tensor& tokens) {
    if (tokens.ndim() != 3 || tokens.dim(1) == 0) throw ContractError("pooling over an empty token set");
    return state.predictor.forward(state.projector.forward(mean_tokens(tokens)));
}

Tensor cls_guidance_repr(ModelState& state, const EncoderOutput& encoded) {
    return state.predictor.forward(state.projector.forward(encoded.cls()));
}

Tensor pooled_target_repr(ModelState& state, const Tensor& target_patches, const MaskPlan* target_plan) {
    NoGradGuard guard;
    return target_global(state, encode_target(state, target_patches, target_plan).encoded);
}

void ema_update(const ParamList& target, const ParamList& online, double tau) {
    if (target.size() != online.size()) {
        throw ContractError("ema_update: " + std::to_string(target.size()) + " target vs " +
                            std::to_string(online.size()) + " online tensors");
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i].tensor.shape() != online[i].tensor.shape()) {
            throw ContractError("ema_update: shape mismatch between '" + target[i].name + "' and '" +
                                online[i].name + "'");
        }
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        Tensor t = target[i].tensor;
        auto td = t.mutable_data();
        const auto od = online[i].tensor.data();
        for (std::size_t j = 0; j < td.size(); ++j) td[j] = tau * td[j] + (1.0 - tau) * od[j];
    }
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw ContractError("empty image batch");
    const Image& first = *images.front();
    const std::size_t per = first.pixels.size();
    std::vector<double> data;
    data.reserve(images.size() * per);
    for (const Image* im : images) {
        if (im->channels != first.channels || im->height != first.height || im->width != first.width) {
            throw DimensionError("image batch with mixed extents");
        }
        for (double p : im->pixels) data.push_back((p - 0.5) / 0.25);
    }
    return Tensor::from_data({images.size(), first.channels, first.height, first.width}, std::move(data));
}

PreparedBatch prepare_batch(const std::vector<const Image*>& images, const ModelConfig& config,
                            const AugmentConfig& augment, std::uint64_t seed) {
    const Rng root(seed);
    std::vector<Image> online, target;
    for (std::size_t i = 0; i < images.size(); ++i) {
        ViewPair pair = make_view_pair(*images[i], augment, root.fork(i));
        online.push_back(std::move(pair.online));
        target.push_back(std::move(pair.target));
    }
    PreparedBatch batch;
    const std::size_t p = config.vit.patch_size;
    batch.online_patches = patchify(images_to_tensor(as_pointers(online)), p);
    batch.target_patches = patchify(images_to_tensor(as_pointers(target)), p);
    const std::size_t n = batch.online_patches.dim(1);
    if (n != config.vit.n_tokens() || batch.online_patches.dim(2) != config.vit.patch_dim()) {
        throw ConfigError("augmented views of size " + std::to_string(augment.out_size) +
                          " do not match vit.image_size " + std::to_string(config.vit.image_size));
    }
    batch.plan = sample_mask(n, config.mask_ratio, images.size(), root.fork(kMaskTag).seed());
    if (config.guidance.target_mask_ratio > 0.0) {
        batch.target_plan =
            sample_mask(n, config.guidance.target_mask_ratio, images.size(), root.fork(kTargetMaskTag).seed());
    }
    return batch;
}

LossTerms compute_losses(ModelState& state, const PreparedBatch& batch) {
    const auto& cfg = state.config;
    const auto& g = cfg.guidance;
    const MaskPlan& plan = batch.plan;
    const SplitTokens split = split_tokens(batch.online_patches, plan);

    // Reconstruction branch.
    LossTerms out;
    EncoderOutput encoded;
    Tensor visible_tokens;  // [b, |visible|, dim], CLS stripped
    Tensor mask_features;   // [b, |M|, dim], only built when guided
    const bool guide_mask = g.distance != Distance::none && g.guided_tokens == GuidedTokens::visible_and_mask;
    if (cfg.mim_mode == MimMode::mae) {
        encoded = encoder_forward(state.online, split.visible, plan.visible);
        visible_tokens = encoded.patch_tokens();
        const DecoderOutput dec = decoder_forward(state.decoder, visible_tokens, plan);
        out.mim = mim_loss(dec.prediction, split.targets, g.norm_pix_targets);
        if (guide_mask) mask_features = state.mask_adapter(dec.masked_features);
    } else {
        encoded = encoder_forward_substituted(state.online, split.visible, plan);
        const Tensor all_tokens = encoded.patch_tokens();
        visible_tokens = gather_rows(all_tokens, plan.visible);
        const Tensor masked = gather_rows(all_tokens, plan.masked);
        out.mim = l1_mim_loss(state.simmim_head(masked), split.targets, g.norm_pix_targets);
        if (guide_mask) mask_features = masked;
    }

    if (g.distance == Distance::none) {
        out.guidance = Tensor::scalar(0.0);
        out.total = out.mim;
        return out;
    }

    const bool include_mask = guide_mask && plan.n_masked() > 0;
    const Tensor guided = include_mask ? concat_tokens(visible_tokens, mask_features) : visible_tokens;
    const IndexLists guided_positions = include_mask ? concat_lists(plan.visible, plan.masked) : plan.visible;

    TargetSide target;
    {
        NoGradGuard guard;
        target = encode_target(state, batch.target_patches, batch.target_plan ? &*batch.target_plan : nullptr);
    }

    Tensor loss;
    if (g.guidance_type != GuidanceType::token_wise) {
        const Tensor u = g.guidance_source == GuidanceSource::cls_token ? cls_guidance_repr(state, encoded)
                                                                        : pooled_online_repr(state, guided);
        Tensor v;
        {
            NoGradGuard guard;
            v = target_global(state, target.encoded);
        }
        loss = global_guidance_loss(u, v, g.distance, g.infonce_temperature);
    }
    if (g.guidance_type != GuidanceType::global) {
        const Tensor online_tokens = project_tokens(state.predictor, project_tokens(state.projector, guided));
        Tensor target_tokens;
        {
            NoGradGuard guard;
            const IndexLists rows = align_rows(guided_positions, target.positions);
            target_tokens =
                project_tokens(state.target_projector, gather_rows(target.encoded.patch_tokens(), rows)).detach();
        }
        const Tensor tw = token_wise_guidance_loss(online_tokens, target_tokens, g.distance, g.infonce_temperature);
        loss = loss.defined() ? add(loss, tw) : tw;
    }
    out.guidance = loss;
    out.total = add(out.mim, scale(loss, g.alpha));
    return out;
}

StepResult lcmae_step(ModelState& state, AdamW& optimizer, const std::vector<const Image*>& images,
                      const AugmentConfig& augment, double lr, std::uint64_t seed) {
    const PreparedBatch batch = prepare_batch(images, state.config, augment, seed);
    const LossTerms losses = compute_losses(state, batch);
    optimizer.zero_grad();
    losses.total.backward();
    optimizer.step(lr);
    if (state.config.guidance.distance != Distance::none) {
        ema_update(state.target_params(), state.ema_sources(), state.config.guidance.tau);
    }
    return {losses.total.item(), losses.mim.item(), losses.guidance.item()};
}

StepResult simmim_mode_step(ModelState& state, AdamW& optimizer, const std::vector<const Image*>& images,
                            const AugmentConfig& augment, double lr, std::uint64_t seed) {
    if (state.config.mim_mode != MimMode::simmim) throw ConfigError("simmim_mode_step needs mim_mode = simmim");
    return lcmae_step(state, optimizer, images, augment, lr, seed);
}

StepResult mae_step(Encoder& encoder, Decoder& decoder, AdamW& optimizer, const std::vector<const Image*>& images,
                    const AugmentConfig& augment, double mask_ratio, bool norm_pix, double lr, std::uint64_t seed) {
    const Rng root(seed);
    std::vector<Image> views;
    for (std::size_t i = 0; i < images.size(); ++i) views.push_back(online_view(*images[i], augment, root.fork(i)));
    const Tensor patches = patchify(images_to_tensor(as_pointers(views)), encoder.config.patch_size);
    const MaskPlan plan = sample_mask(patches.dim(1), mask_ratio, images.size(), root.fork(kMaskTag).seed());
    const Tensor visible = gather_rows(patches, plan.visible);
    const Tensor targets = gather_rows(patches, plan.masked);

    const Tensor latent = encoder_forward(encoder, visible, plan.visible).patch_tokens();
    const Tensor loss = mim_loss(decoder_forward(decoder, latent, plan).prediction, targets, norm_pix);
    optimizer.zero_grad();
    loss.backward();
    optimizer.step(lr);
    return {loss.item(), loss.item(), 0.0};
}

}  // namespace lcmae
