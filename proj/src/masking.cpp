#include "lcmae/masking.hpp"

#include <algorithm>
#include <cmath>

#include "lcmae/errors.hpp"
#include "lcmae/rng.hpp"

namespace lcmae {

std::size_t masked_count(std::size_t n_tokens, double ratio) {
    const double prod = ratio * static_cast<double>(n_tokens);
    auto k = static_cast<std::size_t>(std::floor(prod));
    // ratio values like 0.7 are not representable; a product that lands a hair
    // below an integer is taken as that integer.
    if (static_cast<double>(k + 1) - prod < 1e-9 * std::max(1.0, prod)) ++k;
    if (k >= n_tokens && ratio < 1.0 && n_tokens > 0) k = n_tokens - 1;
    return std::min(k, n_tokens);
}

MaskPlan sample_mask(std::size_t n_tokens, double ratio, std::size_t batch, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
    }
    if (n_tokens == 0) throw ConfigError("mask plan needs at least one token");
    const std::size_t k = masked_count(n_tokens, ratio);
    MaskPlan plan;
    plan.n_tokens = n_tokens;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.masked.resize(batch);
    plan.visible.resize(batch);
    const Rng root(seed);
    for (std::size_t i = 0; i < batch; ++i) {
        Rng rng = root.fork(i);
        auto perm = rng.permutation(n_tokens);
        std::vector<std::size_t> m(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
        std::vector<std::size_t> v(perm.begin() + static_cast<std::ptrdiff_t>(k), perm.end());
        std::sort(m.begin(), m.end());
        std::sort(v.begin(), v.end());
        plan.masked[i] = std::move(m);
        plan.visible[i] = std::move(v);
    }
    return plan;
}

MaskPlan full_plan(std::size_t n_tokens, std::size_t batch) {
    MaskPlan plan;
    plan.n_tokens = n_tokens;
    plan.masked.assign(batch, {});
    std::vector<std::size_t> all(n_tokens);
    for (std::size_t i = 0; i < n_tokens; ++i) all[i] = i;
    plan.visible.assign(batch, all);
    return plan;
}

void validate_plan(const MaskPlan& plan) {
    if (plan.masked.size() != plan.visible.size()) throw ContractError("mask plan: masked/visible batch mismatch");
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        const auto& m = plan.masked[i];
        const auto& v = plan.visible[i];
        if (m.size() != plan.n_masked() || v.size() != plan.n_visible()) {
            throw ContractError("mask plan: unequal per-sample counts");
        }
        if (m.size() + v.size() != plan.n_tokens) throw ContractError("mask plan: sets do not cover all tokens");
        std::vector<char> seen(plan.n_tokens, 0);
        for (const auto* list : {&m, &v}) {
            if (!std::is_sorted(list->begin(), list->end())) throw ContractError("mask plan: unsorted index list");
            for (auto t : *list) {
                if (t >= plan.n_tokens || seen[t]) throw ContractError("mask plan: sets are not a partition");
                seen[t] = 1;
            }
        }
    }
}

SplitTokens split_tokens(const Tensor& patches, const MaskPlan& plan) {
    if (patches.ndim() != 3 || patches.dim(0) != plan.batch() || patches.dim(1) != plan.n_tokens) {
        throw ContractError("split_tokens: patches " + shape_str(patches.shape()) + " do not match a plan over " +
                            std::to_string(plan.batch()) + " x " + std::to_string(plan.n_tokens) + " tokens");
    }
    SplitTokens out;
    out.visible = gather_rows(patches, plan.visible);
    out.targets = gather_rows(patches, plan.masked).detach();
    return out;
}

Tensor assemble_decoder_input(const Tensor& projected, const MaskPlan& plan, const Tensor& mask_token,
                              const Tensor& dec_pos) {
    if (projected.ndim() != 3 || projected.dim(0) != plan.batch() || projected.dim(1) != plan.n_visible()) {
        throw ContractError("assemble_decoder_input: tokens " + shape_str(projected.shape()) +
                            " inconsistent with plan (" + std::to_string(plan.n_visible()) + " visible)");
    }
    if (dec_pos.ndim() != 2 || dec_pos.dim(0) != plan.n_tokens) {
        throw ContractError("assemble_decoder_input: positional table " + shape_str(dec_pos.shape()) +
                            " does not cover " + std::to_string(plan.n_tokens) + " positions");
    }
    const Tensor seq = scatter_rows(projected, mask_token, plan.visible, plan.n_tokens);
    return add(seq, dec_pos);
}

}  // namespace lcmae
