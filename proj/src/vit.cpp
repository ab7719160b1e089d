#include "lcmae/vit.hpp"

#include <cmath>

#include "autograd_internal.hpp"
#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

constexpr double kPosInitStd = 0.02;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(shape_numel(shape));
    for (auto& x : data) x = stddev * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("vit: image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
                          std::to_string(patch_size));
    }
    if (channels == 0) throw ConfigError("vit: channels must be positive");
    if (dim == 0 || heads == 0 || dim % heads != 0) {
        throw ConfigError("vit: dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (decoder_dim == 0 || decoder_heads == 0 || decoder_dim % decoder_heads != 0) {
        throw ConfigError("vit: decoder_dim " + std::to_string(decoder_dim) + " is not divisible by decoder_heads " +
                          std::to_string(decoder_heads));
    }
    if (!(mlp_ratio > 0.0)) throw ConfigError("vit: mlp_ratio must be positive");
}

std::size_t ViTConfig::mlp_hidden(std::size_t width) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(width))));
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
    // Xavier-uniform weights, zero bias.
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(in * out);
    for (auto& x : w) x = rng.uniform(-limit, limit);
    return {Tensor::from_data({in, out}, std::move(w), true), with_bias ? Tensor::zeros({out}, true) : Tensor()};
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::create(std::size_t width, double eps) {
    return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true), eps};
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

Block Block::create(std::size_t width, std::size_t heads, std::size_t hidden, Rng& rng) {
    Block b;
    b.norm1 = LayerNorm::create(width, 1e-6);
    b.q = Linear::create(width, width, rng);
    b.k = Linear::create(width, width, rng, false);
    b.v = Linear::create(width, width, rng);
    b.proj = Linear::create(width, width, rng);
    b.norm2 = LayerNorm::create(width, 1e-6);
    b.fc1 = Linear::create(width, hidden, rng);
    b.fc2 = Linear::create(hidden, width, rng);
    b.heads = heads;
    return b;
}

Tensor Block::forward(const Tensor& x, Tensor* weights) const {
    const Tensor h = norm1(x);
    auto att = multi_head_attention(q(h), k(h), v(h), heads, weights != nullptr);
    if (weights) *weights = att.weights;
    const Tensor x1 = add(x, proj(att.out));
    return add(x1, fc2(gelu(fc1(norm2(x1)))));
}

void Block::collect(const std::string& prefix, ParamList& out) const {
    norm1.collect(prefix + ".norm1", out);
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

Encoder Encoder::create(const ViTConfig& config, Rng& rng) {
    config.validate();
    Encoder e;
    e.config = config;
    e.patch_embed = Linear::create(config.patch_dim(), config.dim, rng);
    e.pos = normal_tensor({config.n_tokens(), config.dim}, kPosInitStd, rng);
    e.mask_token = normal_tensor({config.dim}, kPosInitStd, rng);
    if (config.use_cls) e.cls_token = normal_tensor({config.dim}, kPosInitStd, rng);
    for (std::size_t i = 0; i < config.depth; ++i) {
        e.blocks.push_back(Block::create(config.dim, config.heads, config.mlp_hidden(config.dim), rng));
    }
    e.norm = LayerNorm::create(config.dim, 1e-6);
    return e;
}

void Encoder::collect(const std::string& prefix, ParamList& out) const {
    patch_embed.collect(prefix + ".patch_embed", out);
    out.push_back({prefix + ".pos", pos});
    if (cls_token.defined()) out.push_back({prefix + ".cls_token", cls_token});
    out.push_back({prefix + ".mask_token", mask_token});
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
    norm.collect(prefix + ".norm", out);
}

Tensor EncoderOutput::patch_tokens() const {
    if (!has_cls) return tokens;
    return slice_tokens(tokens, 1, tokens.dim(1) - 1);
}

Tensor EncoderOutput::cls() const {
    if (!has_cls) throw ConfigError("CLS output requested from an encoder without a CLS token");
    return reshape(slice_tokens(tokens, 0, 1), {tokens.dim(0), tokens.dim(2)});
}

namespace {

// Flat image index for every flat patch index of a [b, N, C*P*P] layout.
std::vector<std::size_t> patch_index_map(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                                         std::size_t patch) {
    const std::size_t gh = h / patch, gw = w / patch, pd = c * patch * patch;
    std::vector<std::size_t> map(b * gh * gw * pd);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                std::size_t* dst = map.data() + ((i * gh + py) * gw + px) * pd;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t y = 0; y < patch; ++y) {
                        for (std::size_t x = 0; x < patch; ++x) {
                            dst[(ch * patch + y) * patch + x] = ((i * c + ch) * h + py * patch + y) * w + px * patch + x;
                        }
                    }
                }
            }
        }
    }
    return map;
}

}  // namespace

Tensor patchify(const Tensor& images, std::size_t patch) {
    if (images.ndim() != 4) throw DimensionError("patchify expects [b, C, H, W], got " + shape_str(images.shape()));
    const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw DimensionError("patchify: extents " + shape_str(images.shape()) + " not divisible by patch " +
                             std::to_string(patch));
    }
    auto map = patch_index_map(b, c, h, w, patch);
    const auto src = images.data();
    std::vector<double> out(map.size());
    for (std::size_t k = 0; k < map.size(); ++k) out[k] = src[map[k]];
    detail::Node* in = images.node();
    return detail::make_result("patchify", {b, (h / patch) * (w / patch), c * patch * patch}, std::move(out),
                               {&images}, [in, map = std::move(map)](detail::Node& self) {
                                   auto& g = in->ensure_grad();
                                   for (std::size_t k = 0; k < map.size(); ++k) g[map[k]] += self.grad[k];
                               });
}

Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw DimensionError("unpatchify: image extents not divisible by patch " + std::to_string(patch));
    }
    const std::size_t gh = height / patch, gw = width / patch, pd = channels * patch * patch;
    if (patches.ndim() != 3 || patches.dim(1) != gh * gw || patches.dim(2) != pd) {
        throw DimensionError("unpatchify: patches " + shape_str(patches.shape()) + " do not tile a " +
                             std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width) +
                             " image");
    }
    const std::size_t b = patches.dim(0);
    auto map = patch_index_map(b, channels, height, width, patch);
    const auto src = patches.data();
    std::vector<double> out(map.size());
    for (std::size_t k = 0; k < map.size(); ++k) out[map[k]] = src[k];
    detail::Node* in = patches.node();
    return detail::make_result("unpatchify", {b, channels, height, width}, std::move(out), {&patches},
                               [in, map = std::move(map)](detail::Node& self) {
                                   auto& g = in->ensure_grad();
                                   for (std::size_t k = 0; k < map.size(); ++k) g[k] += self.grad[map[k]];
                               });
}

Tensor patch_embed(const Tensor& patches, const Linear& embed, const Tensor& pos_table,
                   const IndexLists& positions) {
    if (patches.ndim() != 3) throw DimensionError("patch_embed expects [b, k, d], got " + shape_str(patches.shape()));
    if (positions.size() != patches.dim(0)) throw ContractError("patch_embed: one position list per sample required");
    for (const auto& list : positions) {
        if (list.size() != patches.dim(1)) {
            throw ContractError("patch_embed: " + std::to_string(list.size()) + " positional indices for " +
                                std::to_string(patches.dim(1)) + " tokens");
        }
    }
    return add(embed(patches), lookup_rows(pos_table, positions));
}

EncoderOutput encoder_blocks(const Encoder& enc, const Tensor& embedded, const EncodeOptions& options) {
    if (embedded.ndim() != 3 || embedded.dim(1) == 0) {
        throw ContractError("encoder: empty token set " + shape_str(embedded.shape()));
    }
    EncoderOutput out;
    out.has_cls = enc.cls_token.defined();
    Tensor x = out.has_cls ? prepend_token(embedded, enc.cls_token) : embedded;
    if (options.keep_hidden) out.hidden.push_back(x);
    for (const auto& block : enc.blocks) {
        Tensor w;
        x = block.forward(x, options.capture_attention ? &w : nullptr);
        if (options.capture_attention) out.attention.push_back(w);
        if (options.keep_hidden) out.hidden.push_back(x);
    }
    out.tokens = enc.norm(x);
    return out;
}

EncoderOutput encoder_forward(const Encoder& enc, const Tensor& patches, const IndexLists& positions,
                              const EncodeOptions& options) {
    if (patches.ndim() == 3 && patches.dim(1) == 0) throw ContractError("encoder: empty token set");
    return encoder_blocks(enc, patch_embed(patches, enc.patch_embed, enc.pos, positions), options);
}

EncoderOutput encoder_forward_substituted(const Encoder& enc, const Tensor& visible_patches, const MaskPlan& plan,
                                          const EncodeOptions& options) {
    if (visible_patches.ndim() != 3 || visible_patches.dim(0) != plan.batch() ||
        visible_patches.dim(1) != plan.n_visible()) {
        throw ContractError("encoder: visible patches " + shape_str(visible_patches.shape()) +
                            " inconsistent with mask plan");
    }
    const Tensor seq = scatter_rows(enc.patch_embed(visible_patches), enc.mask_token, plan.visible, plan.n_tokens);
    return encoder_blocks(enc, add(seq, enc.pos), options);
}

Decoder Decoder::create(const ViTConfig& config, Rng& rng) {
    config.validate();
    Decoder d;
    d.embed = Linear::create(config.dim, config.decoder_dim, rng);
    d.mask_token = normal_tensor({config.decoder_dim}, kPosInitStd, rng);
    d.pos = normal_tensor({config.n_tokens(), config.decoder_dim}, kPosInitStd, rng);
    for (std::size_t i = 0; i < config.decoder_depth; ++i) {
        d.blocks.push_back(
            Block::create(config.decoder_dim, config.decoder_heads, config.mlp_hidden(config.decoder_dim), rng));
    }
    d.norm = LayerNorm::create(config.decoder_dim, 1e-6);
    d.pred = Linear::create(config.decoder_dim, config.patch_dim(), rng);
    return d;
}

void Decoder::collect(const std::string& prefix, ParamList& out) const {
    embed.collect(prefix + ".embed", out);
    out.push_back({prefix + ".mask_token", mask_token});
    out.push_back({prefix + ".pos", pos});
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
    norm.collect(prefix + ".norm", out);
    pred.collect(prefix + ".pred", out);
}

DecoderOutput decoder_forward(const Decoder& dec, const Tensor& visible_tokens, const MaskPlan& plan) {
    Tensor x = assemble_decoder_input(dec.embed(visible_tokens), plan, dec.mask_token, dec.pos);
    for (const auto& block : dec.blocks) x = block.forward(x, nullptr);
    x = dec.norm(x);
    DecoderOutput out;
    out.masked_features = gather_rows(x, plan.masked);
    out.prediction = dec.pred(out.masked_features);
    return out;
}

}  // namespace lcmae
