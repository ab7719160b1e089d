#include "lcmae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lcmae/analysis.hpp"
#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

constexpr std::uint64_t kModelTag = 0x6d6f64656cULL;
constexpr std::uint64_t kStepTag = 0x73746570ULL;
constexpr std::uint64_t kShuffleTag = 0x73687566ULL;

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (labels.empty()) return 0.0;
    const std::size_t c = logits.dim(1);
    const auto d = logits.data();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = d.data() + i * c;
        const auto best = static_cast<std::size_t>(std::max_element(row, row + c) - row);
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Tensor select_rows(const std::vector<double>& data, std::size_t d, const std::vector<std::size_t>& rows) {
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (auto r : rows) out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(r * d),
                                   data.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    return Tensor::from_data({rows.size(), d}, std::move(out));
}

}  // namespace

void TrainConfig::validate() const {
    model.validate();
    augment.validate();
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
    if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("layer_decay must lie in (0, 1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr >= 0.0) || !(min_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (log_every == 0) throw ConfigError("log_every must be positive");
    if (augment.out_size != model.vit.image_size) {
        throw ConfigError("augment.out_size (" + std::to_string(augment.out_size) + ") must equal vit.image_size (" +
                          std::to_string(model.vit.image_size) + ")");
    }
    if (!(probe.holdout > 0.0 && probe.holdout < 1.0)) throw ConfigError("probe.holdout must lie in (0, 1)");
    if (probe.batch_size == 0) throw ConfigError("probe.batch_size must be positive");
}

double TrainConfig::effective_lr() const {
    return scale_lr_by_batch ? base_lr * static_cast<double>(batch_size) / 256.0 : base_lr;
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr, double min_lr) {
    if (step > total_steps) throw ContractError("lr_at: step beyond the schedule");
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps == warmup_steps) return base_lr;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double layer_lr_scale(std::size_t index, std::size_t n_layers, double decay) {
    if (index > n_layers) throw ContractError("layer_lr_scale: index beyond n_layers");
    return std::pow(decay, static_cast<double>(n_layers - index));
}

std::size_t layer_group(const std::string& name, std::size_t depth) {
    if (starts_with(name, "encoder.patch_embed.") || name == "encoder.pos" || name == "encoder.cls_token" ||
        name == "encoder.mask_token") {
        return 0;
    }
    const std::string blocks = "encoder.blocks.";
    if (starts_with(name, blocks)) {
        const auto end = name.find('.', blocks.size());
        return std::stoul(name.substr(blocks.size(), end - blocks.size())) + 1;
    }
    return depth + 1;
}

bool uses_weight_decay(const ParamRef& param) {
    const auto& n = param.name;
    const bool is_pos = n.size() >= 4 && n.compare(n.size() - 4, 4, ".pos") == 0;
    return param.tensor.ndim() >= 2 && !is_pos;
}

std::vector<OptimParam> make_optim_params(const ParamList& params, std::size_t depth, double layer_decay) {
    std::vector<OptimParam> out;
    for (const auto& p : params) {
        out.push_back({p.name, p.tensor, layer_lr_scale(layer_group(p.name, depth), depth + 1, layer_decay),
                       uses_weight_decay(p)});
    }
    return out;
}

AdamW make_optimizer(const ModelState& state, const TrainConfig& config) {
    return AdamW(make_optim_params(state.online_params(), state.config.vit.depth, config.layer_decay),
                 {config.beta1, config.beta2, config.adam_eps, config.weight_decay});
}

std::uint64_t model_seed(std::uint64_t seed) { return mix_seed(seed, kModelTag); }

std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step) { return mix_seed(mix_seed(seed, kStepTag), step); }

PretrainResult pretrain(const TrainConfig& config, const Dataset& data, const PretrainHooks& hooks) {
    config.validate();
    ModelState state = ModelState::create(config.model, model_seed(config.seed));
    AdamW optimizer = make_optimizer(state, config);
    return pretrain_from(config, data, std::move(state), std::move(optimizer), 0, hooks);
}

PretrainResult pretrain_from(const TrainConfig& config, const Dataset& data, ModelState state, AdamW optimizer,
                             std::size_t first_epoch, const PretrainHooks& hooks) {
    config.validate();
    if (data.size() == 0) throw InputError("pretrain: dataset is empty");
    if (data.height != config.model.vit.image_size || data.width != config.model.vit.image_size ||
        data.channels != config.model.vit.channels) {
        throw ConfigError("pretrain: dataset images are " + std::to_string(data.channels) + "x" +
                          std::to_string(data.height) + "x" + std::to_string(data.width) +
                          ", model expects " + std::to_string(config.model.vit.channels) + "x" +
                          std::to_string(config.model.vit.image_size) + "x" +
                          std::to_string(config.model.vit.image_size));
    }
    const std::size_t steps_per_epoch = data.size() / config.batch_size;
    if (steps_per_epoch == 0 && config.epochs > 0) {
        throw ConfigError("pretrain: batch_size " + std::to_string(config.batch_size) + " exceeds dataset size " +
                          std::to_string(data.size()));
    }
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const std::size_t warmup_steps = steps_per_epoch * config.warmup_epochs;
    const double base_lr = config.effective_lr();
    const Rng shuffle_root = Rng(config.seed).fork(kShuffleTag);

    PretrainResult result{std::move(state), std::move(optimizer), {}, first_epoch};
    for (std::size_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
        Rng shuffle = shuffle_root.fork(epoch);
        const auto order = shuffle.permutation(data.size());
        double epoch_total = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::uint64_t step = epoch * steps_per_epoch + s;
            std::vector<const Image*> batch;
            for (std::size_t j = 0; j < config.batch_size; ++j) batch.push_back(&data.images[order[s * config.batch_size + j]]);
            const double lr = lr_at(step, total_steps, warmup_steps, base_lr, config.min_lr);
            const StepResult r = lcmae_step(result.state, result.optimizer, batch, config.augment, lr,
                                            step_seed(config.seed, step));
            const LogRecord rec{step + 1, epoch, lr, r.mim, r.guidance, r.total};
            result.log.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
            epoch_total += r.total;
        }
        result.epochs_run = epoch + 1;
        if (hooks.on_checkpoint && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
            hooks.on_checkpoint(result.state, result.optimizer, epoch + 1);
        }
        if (hooks.on_epoch && !hooks.on_epoch(epoch, epoch_total / static_cast<double>(steps_per_epoch))) break;
    }
    return result;
}

ProbeResult linear_probe(const Encoder& encoder, const Dataset& data, const ProbeConfig& config) {
    if (!data.has_labels) throw InputError("linear_probe: dataset has no labels");
    return linear_probe_features(pooled_features(encoder, data.pointers(), std::nullopt), data.labels, config);
}

ProbeResult linear_probe_features(const Tensor& features, const std::vector<std::uint16_t>& labels,
                                  const ProbeConfig& config) {
    if (features.ndim() != 2 || features.dim(0) != labels.size()) {
        throw DimensionError("linear_probe: features " + shape_str(features.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    if (!(config.holdout > 0.0 && config.holdout < 1.0)) throw ConfigError("probe.holdout must lie in (0, 1)");
    const std::size_t n = labels.size(), d = features.dim(1);
    std::size_t n_classes = 0;
    for (auto l : labels) n_classes = std::max<std::size_t>(n_classes, l + 1u);
    std::vector<std::vector<std::size_t>> by_class(n_classes);
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
    const auto present = std::count_if(by_class.begin(), by_class.end(), [](const auto& v) { return !v.empty(); });
    if (present < 2) throw DegenerateError("linear_probe: labels contain fewer than 2 classes");

    // Stratified split: each class contributes round(holdout * count) samples
    // to the held-out set, chosen by a per-class permutation.
    const Rng root(config.seed);
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t c = 0; c < n_classes; ++c) {
        auto& members = by_class[c];
        if (members.empty()) continue;
        Rng rng = root.fork(c);
        const auto perm = rng.permutation(members.size());
        auto n_test = static_cast<std::size_t>(std::lround(config.holdout * static_cast<double>(members.size())));
        if (members.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
        for (std::size_t k = 0; k < members.size(); ++k) {
            (k < n_test ? test_idx : train_idx).push_back(members[perm[k]]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());

    // Standardize with training-split statistics.
    std::vector<double> x(features.data().begin(), features.data().end());
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (auto i : train_idx) mu += x[i * d + j];
        mu /= static_cast<double>(train_idx.size());
        double var = 0.0;
        for (auto i : train_idx) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
        const double sd = std::sqrt(var / static_cast<double>(train_idx.size()) + 1e-12);
        for (std::size_t i = 0; i < n; ++i) x[i * d + j] = (x[i * d + j] - mu) / sd;
    }

    Linear head{Tensor::zeros({d, n_classes}, true), Tensor::zeros({n_classes}, true)};
    AdamW opt({{"probe.weight", head.weight, 1.0, true}, {"probe.bias", head.bias, 1.0, false}},
              {0.9, 0.999, 1e-8, config.weight_decay});
    const std::size_t bs = std::min(config.batch_size, train_idx.size());
    const std::size_t steps_per_epoch = (train_idx.size() + bs - 1) / bs;
    const std::size_t total = steps_per_epoch * config.epochs;
    const Rng shuffle_root = root.fork(0x70726f6265ULL);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle = shuffle_root.fork(epoch);
        const auto perm = shuffle.permutation(train_idx.size());
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<std::size_t> rows;
            std::vector<std::size_t> y;
            for (std::size_t k = s * bs; k < std::min(train_idx.size(), (s + 1) * bs); ++k) {
                rows.push_back(train_idx[perm[k]]);
                y.push_back(labels[train_idx[perm[k]]]);
            }
            const Tensor loss = cross_entropy(head(select_rows(x, d, rows)), y);
            opt.zero_grad();
            loss.backward();
            opt.step(lr_at(epoch * steps_per_epoch + s, total, 0, config.lr, 0.0));
        }
    }

    NoGradGuard guard;
    auto eval = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::size_t> y;
        for (auto i : idx) y.push_back(labels[i]);
        return idx.empty() ? 0.0 : accuracy(head(select_rows(x, d, idx)), y);
    };
    return {eval(train_idx), eval(test_idx), train_idx.size(), test_idx.size()};
}

}  // namespace lcmae
