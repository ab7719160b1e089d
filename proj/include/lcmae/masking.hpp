#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lcmae/ops.hpp"

namespace lcmae {

/// Per-sample split of N token positions into masked and visible sets. Both
/// lists are kept in ascending index order.
struct MaskPlan {
    std::size_t n_tokens = 0;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    IndexLists masked;
    IndexLists visible;

    std::size_t batch() const { return masked.size(); }
    std::size_t n_masked() const { return masked.empty() ? 0 : masked.front().size(); }
    std::size_t n_visible() const { return visible.empty() ? 0 : visible.front().size(); }
};

/// floor(r * N), computed so that exact products such as 0.75 * 64 are not
/// lost to rounding.
std::size_t masked_count(std::size_t n_tokens, double ratio);

/// Draws an independent mask for each of `batch` samples. Sample i uses the
/// stream Rng(seed).fork(i), so plans are reproducible from (N, r, seed).
MaskPlan sample_mask(std::size_t n_tokens, double ratio, std::size_t batch, std::uint64_t seed);

/// The plan with no masked positions, used for full-token forwards.
MaskPlan full_plan(std::size_t n_tokens, std::size_t batch);

/// Checks partition, ordering and equal per-sample counts.
void validate_plan(const MaskPlan& plan);

struct SplitTokens {
    Tensor visible;  ///< [b, |visible|, d], graph-connected
    Tensor targets;  ///< [b, |M|, d], detached
};

SplitTokens split_tokens(const Tensor& patches, const MaskPlan& plan);

/// projected [b, |visible|, d_dec] -> [b, N, d_dec]: visible rows at their grid
/// slots, `mask_token` [d_dec] at masked slots, then dec_pos row i added at
/// slot i.
Tensor assemble_decoder_input(const Tensor& projected, const MaskPlan& plan, const Tensor& mask_token,
                              const Tensor& dec_pos);

}  // namespace lcmae
