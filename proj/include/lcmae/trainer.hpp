#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lcmae/dataset.hpp"
#include "lcmae/lcmae.hpp"
#include "lcmae/optim.hpp"

namespace lcmae {

struct ProbeConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 256;
    double lr = 1e-2;
    double weight_decay = 0.0;
    double holdout = 0.2;
    std::uint64_t seed = 0;
};

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t warmup_epochs = 3;
    double base_lr = 1.5e-3;
    double min_lr = 1e-5;
    std::size_t batch_size = 64;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double layer_decay = 0.65;
    bool scale_lr_by_batch = false;
    std::uint64_t seed = 0;
    std::size_t log_every = 1;
    std::size_t checkpoint_every = 0;  ///< in epochs; 0 disables
    ModelConfig model;
    AugmentConfig augment;
    ProbeConfig probe;

    void validate() const;
    double effective_lr() const;
};

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to
/// min_lr at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr, double min_lr);

/// decay^(n_layers - index).
double layer_lr_scale(std::size_t index, std::size_t n_layers, double decay);

/// Layer-decay group of a parameter: encoder patch embedding, positions, CLS
/// and encoder mask token are 0, encoder block i is i + 1, everything else
/// (decoder, heads, final encoder norm) is depth + 1.
std::size_t layer_group(const std::string& name, std::size_t depth);

/// Weight decay applies to matrices only, never to positional tables.
bool uses_weight_decay(const ParamRef& param);

std::vector<OptimParam> make_optim_params(const ParamList& params, std::size_t depth, double layer_decay);
AdamW make_optimizer(const ModelState& state, const TrainConfig& config);

struct LogRecord {
    std::uint64_t step = 0;  ///< 1-based
    std::size_t epoch = 0;
    double lr = 0.0;
    double l_mim = 0.0;
    double l_gg = 0.0;
    double total = 0.0;
};

struct PretrainHooks {
    std::function<void(const LogRecord&)> on_step;
    /// Called after every epoch with the mean total loss of that epoch; return
    /// false to stop training early.
    std::function<bool(std::size_t epoch, double mean_total)> on_epoch;
    std::function<void(const ModelState&, const AdamW&, std::size_t epoch)> on_checkpoint;
};

struct PretrainResult {
    ModelState state;
    AdamW optimizer;
    std::vector<LogRecord> log;
    std::size_t epochs_run = 0;
};

/// Seed derived for the model initialization of a training run.
std::uint64_t model_seed(std::uint64_t seed);

/// Deterministic for a given config and dataset: epoch e shuffles with
/// Rng(seed).fork(e), step s draws its augmentations and masks from
/// step_seed(seed, s). Incomplete final batches are dropped.
PretrainResult pretrain(const TrainConfig& config, const Dataset& data, const PretrainHooks& hooks = {});

/// Continues from an existing state and optimizer (for resumed runs).
PretrainResult pretrain_from(const TrainConfig& config, const Dataset& data, ModelState state, AdamW optimizer,
                             std::size_t first_epoch, const PretrainHooks& hooks = {});

std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step);

struct ProbeResult {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
};

/// Linear classifier on standardized, mean-pooled final encoder features with
/// the encoder frozen. The held-out split is stratified and seeded.
ProbeResult linear_probe(const Encoder& encoder, const Dataset& data, const ProbeConfig& config);

/// Same classifier on precomputed features [n, d].
ProbeResult linear_probe_features(const Tensor& features, const std::vector<std::uint16_t>& labels,
                                  const ProbeConfig& config);

}  // namespace lcmae
