#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lcmae/masking.hpp"
#include "lcmae/ops.hpp"
#include "lcmae/rng.hpp"

namespace lcmae {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;
    std::size_t decoder_dim = 32;
    std::size_t decoder_depth = 2;
    std::size_t decoder_heads = 4;
    bool use_cls = false;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_tokens() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t mlp_hidden(std::size_t width) const;
};

/// A named reference to a trainable tensor. Names are stable and used by the
/// optimizer, checkpoints and EMA pairing.
struct ParamRef {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<ParamRef>;

struct Linear {
    Tensor weight;  ///< [in, out]
    Tensor bias;    ///< [out], undefined for bias-free layers

    static Linear create(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-6;

    static LayerNorm create(std::size_t width, double eps);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
    void collect(const std::string& prefix, ParamList& out) const;
};

/// Pre-norm transformer block. The key projection has no bias: a key bias
/// shifts every score of a query row by the same amount, which softmax
/// cancels, so it would never receive a gradient.
struct Block {
    LayerNorm norm1;
    Linear q, k, v, proj;
    LayerNorm norm2;
    Linear fc1, fc2;
    std::size_t heads = 1;

    static Block create(std::size_t width, std::size_t heads, std::size_t hidden, Rng& rng);
    /// Pre-norm residual block. When `weights` is non-null the softmax
    /// attention weights [b, heads, n, n] are stored there.
    Tensor forward(const Tensor& x, Tensor* weights) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Encoder {
    Linear patch_embed;  ///< [patch_dim, dim]
    Tensor pos;          ///< [N, dim]
    Tensor cls_token;    ///< [dim], defined only with use_cls
    Tensor mask_token;   ///< [dim], substituted for masked patches in SimMIM mode
    std::vector<Block> blocks;
    LayerNorm norm;
    ViTConfig config;

    static Encoder create(const ViTConfig& config, Rng& rng);
    void collect(const std::string& prefix, ParamList& out) const;
};

struct EncodeOptions {
    bool capture_attention = false;
    bool keep_hidden = false;
};

struct EncoderOutput {
    /// [b, (cls) + n, dim] after the final norm; the CLS token, when present,
    /// is row 0.
    Tensor tokens;
    bool has_cls = false;
    /// Per block, [b, heads, n', n'] with n' counting the CLS token.
    std::vector<Tensor> attention;
    /// hidden[0] is the embedded input, hidden[l] the output of block l.
    std::vector<Tensor> hidden;

    /// Patch tokens only, CLS stripped.
    Tensor patch_tokens() const;
    /// [b, dim] CLS output; throws ConfigError when there is none.
    Tensor cls() const;
};

/// [b, C, H, W] -> [b, N, C*P*P]; patches row-major over the grid, each patch
/// flattened channel-major then row-major.
Tensor patchify(const Tensor& images, std::size_t patch);
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch);

/// Linear projection plus the positional row of each token's grid index.
Tensor patch_embed(const Tensor& patches, const Linear& embed, const Tensor& pos_table,
                   const IndexLists& positions);

/// Runs (optional CLS) + blocks + final norm on already embedded tokens.
EncoderOutput encoder_blocks(const Encoder& enc, const Tensor& embedded, const EncodeOptions& options = {});

/// Encoder over an arbitrary subset of grid positions: patches [b, k, patch_dim]
/// and positions[b] holding the k grid indices of those patches.
EncoderOutput encoder_forward(const Encoder& enc, const Tensor& patches, const IndexLists& positions,
                              const EncodeOptions& options = {});

/// Encoder over all N positions where masked positions carry the encoder mask
/// token instead of their patch embedding (SimMIM input convention).
EncoderOutput encoder_forward_substituted(const Encoder& enc, const Tensor& visible_patches, const MaskPlan& plan,
                                          const EncodeOptions& options = {});

struct Decoder {
    Linear embed;       ///< [dim, decoder_dim]
    Tensor mask_token;  ///< [decoder_dim], shared by all masked positions
    Tensor pos;         ///< [N, decoder_dim]
    std::vector<Block> blocks;
    LayerNorm norm;
    Linear pred;  ///< [decoder_dim, patch_dim]

    static Decoder create(const ViTConfig& config, Rng& rng);
    void collect(const std::string& prefix, ParamList& out) const;
};

struct DecoderOutput {
    Tensor prediction;       ///< [b, |M|, patch_dim]
    Tensor masked_features;  ///< [b, |M|, decoder_dim], post-norm features at masked slots
};

/// visible_tokens: encoder output without CLS, [b, |visible|, dim].
DecoderOutput decoder_forward(const Decoder& dec, const Tensor& visible_tokens, const MaskPlan& plan);

}  // namespace lcmae
