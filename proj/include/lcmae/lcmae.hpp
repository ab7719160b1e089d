#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lcmae/augment.hpp"
#include "lcmae/masking.hpp"
#include "lcmae/optim.hpp"
#include "lcmae/vit.hpp"

namespace lcmae {

enum class Distance { cosine, infonce, smooth_l1, none };
enum class GuidanceType { global, token_wise, global_plus_token_wise };
enum class GuidanceSource { visible_tokens_pooled, cls_token };
enum class GuidedTokens { visible_only, visible_and_mask };
enum class MimMode { mae, simmim };

std::string to_string(Distance v);
std::string to_string(GuidanceType v);
std::string to_string(GuidanceSource v);
std::string to_string(GuidedTokens v);
std::string to_string(MimMode v);
Distance parse_distance(const std::string& text);
GuidanceType parse_guidance_type(const std::string& text);
GuidanceSource parse_guidance_source(const std::string& text);
GuidedTokens parse_guided_tokens(const std::string& text);
MimMode parse_mim_mode(const std::string& text);

struct GuidanceConfig {
    double alpha = 0.25;
    Distance distance = Distance::cosine;
    GuidanceType guidance_type = GuidanceType::global;
    GuidanceSource guidance_source = GuidanceSource::visible_tokens_pooled;
    GuidedTokens guided_tokens = GuidedTokens::visible_only;
    double target_mask_ratio = 0.0;
    double tau = 0.996;
    bool norm_pix_targets = true;
    std::size_t head_hidden = 256;
    std::size_t head_out = 128;
    double infonce_temperature = 0.2;

    void validate() const;
};

struct ModelConfig {
    ViTConfig vit;
    GuidanceConfig guidance;
    MimMode mim_mode = MimMode::mae;
    double mask_ratio = 0.75;

    void validate() const;
};

/// Linear (no bias) -> BatchNorm -> ReLU -> Linear.
struct Mlp {
    Linear fc1;
    BatchNormState bn;
    Linear fc2;

    static Mlp create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool out_bias = true);
    /// x [rows, in] -> [rows, out]. Updates batch-norm running statistics in
    /// training mode.
    Tensor forward(const Tensor& x);
    void collect(const std::string& prefix, ParamList& out) const;
    Mlp clone() const;
};

/// Named non-trainable state saved with checkpoints.
struct BufferRef {
    std::string name;
    std::vector<double>* values;
};

struct ModelState {
    ModelConfig config;
    Encoder online;
    Decoder decoder;
    Linear simmim_head;  ///< dim -> patch_dim, used in SimMIM mode
    Mlp projector;
    Mlp predictor;
    Linear mask_adapter;  ///< decoder_dim -> dim for guiding decoded mask features
    Encoder target;
    Mlp target_projector;

    /// Every component is initialized from its own stream Rng(seed).fork(k),
    /// so the encoder and decoder do not depend on which heads exist. The
    /// target side starts as a copy of the online encoder and projector.
    static ModelState create(const ModelConfig& config, std::uint64_t seed);

    /// All trainable (online side) parameters.
    ParamList online_params() const;
    /// Target encoder and projector, in the same order as ema_sources().
    ParamList target_params() const;
    /// Online encoder and projector, the EMA sources of target_params().
    ParamList ema_sources() const;
    std::vector<BufferRef> buffers();
};

/// Standardizes each row of the last axis by its own mean and unbiased
/// variance: (t - mean) / sqrt(var + 1e-6). Returns a detached tensor.
Tensor normalize_patch_targets(const Tensor& targets);

/// Mean squared error per element over masked patches; exact 0 when |M| = 0.
Tensor mim_loss(const Tensor& pred, const Tensor& targets, bool norm_pix);
/// Mean absolute error per element, the SimMIM reconstruction loss.
Tensor l1_mim_loss(const Tensor& pred, const Tensor& targets, bool norm_pix);

/// Distance between online u [b, w] and target v [b, w] representations.
/// cosine: mean over rows of ||u/|u| - v/|v|||^2 (range [0, 4]); infonce:
/// symmetric cross-entropy over the batch with the given temperature;
/// smooth_l1: Huber with beta 1 on the raw vectors; none: constant 0.
Tensor global_guidance_loss(const Tensor& u, const Tensor& v, Distance kind, double temperature = 0.2);

/// Per-token guidance: online [b, k, w] and target [b, k, w] tokens already
/// aligned by grid index; the distance is averaged over all guided tokens.
Tensor token_wise_guidance_loss(const Tensor& online, const Tensor& target, Distance kind,
                                double temperature = 0.2);

/// Mean over tokens, then projector and predictor.
Tensor pooled_online_repr(ModelState& state, const Tensor& tokens);
/// CLS output, then projector and predictor.
Tensor cls_guidance_repr(ModelState& state, const EncoderOutput& encoded);

/// Target encoder over the target patches (optionally restricted to the
/// visible set of target_plan), pooled or CLS per config, then the target
/// projector. Computed without recording a graph.
Tensor pooled_target_repr(ModelState& state, const Tensor& target_patches, const MaskPlan* target_plan);

/// theta_t <- tau * theta_t + (1 - tau) * theta_o for every pair.
void ema_update(const ParamList& target, const ParamList& online, double tau);

/// Images stacked as [b, C, S, S] after (x - 0.5) / 0.25.
Tensor images_to_tensor(const std::vector<const Image*>& images);

struct PreparedBatch {
    Tensor online_patches;  ///< [b, N, patch_dim]
    Tensor target_patches;  ///< [b, N, patch_dim]
    MaskPlan plan;
    std::optional<MaskPlan> target_plan;
};

/// All randomness of one step: item i uses Rng(seed).fork(i) for its views;
/// the mask plans use dedicated forks of the same root.
PreparedBatch prepare_batch(const std::vector<const Image*>& images, const ModelConfig& config,
                            const AugmentConfig& augment, std::uint64_t seed);

struct LossTerms {
    Tensor total;
    Tensor mim;
    Tensor guidance;
};

/// Deterministic, differentiable part of a step. Target-side computations run
/// without a graph.
LossTerms compute_losses(ModelState& state, const PreparedBatch& batch);

struct StepResult {
    double total = 0.0;
    double mim = 0.0;
    double guidance = 0.0;
};

/// prepare_batch -> compute_losses -> backward -> optimizer step -> EMA.
StepResult lcmae_step(ModelState& state, AdamW& optimizer, const std::vector<const Image*>& images,
                      const AugmentConfig& augment, double lr, std::uint64_t seed);

/// Same as lcmae_step but requires mim_mode = simmim.
StepResult simmim_mode_step(ModelState& state, AdamW& optimizer, const std::vector<const Image*>& images,
                            const AugmentConfig& augment, double lr, std::uint64_t seed);

/// Plain masked-autoencoder step over an encoder and decoder only: online
/// view, mask, encoder, decoder, reconstruction loss, optimizer step. Shares no
/// guidance logic with lcmae_step.
StepResult mae_step(Encoder& encoder, Decoder& decoder, AdamW& optimizer, const std::vector<const Image*>& images,
                    const AugmentConfig& augment, double mask_ratio, bool norm_pix, double lr, std::uint64_t seed);

}  // namespace lcmae
