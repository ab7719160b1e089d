#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "lcmae/augment.hpp"
#include "lcmae/vit.hpp"

namespace lcmae {

struct AttentionMapResult {
    std::size_t query_index = 0;
    std::size_t layer = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    /// maps[h][y * grid_w + x]: weight of patch (y, x) for the query, head h.
    std::vector<std::vector<double>> maps;
};

/// Full-token forward of one image; the query patch's attention row at `layer`
/// (0-based block index) for each head, restricted to patch keys and reshaped
/// to the grid. With a CLS token the CLS column is dropped and the rest kept
/// as is, so maps then sum to 1 minus the CLS weight.
AttentionMapResult attention_maps(const Encoder& encoder, const Image& image, std::size_t query_index,
                                  std::size_t layer);

/// attention [b, heads, Q, Q] over a grid_h x grid_w patch grid (Q = grid
/// size). Per head: sum over queries and keys of w(q, k) * |pos(q) - pos(k)|,
/// divided by Q and averaged over the batch. Distances in patch units.
std::vector<double> mean_attention_distance(const Tensor& attention, std::size_t grid_h, std::size_t grid_w);

/// Mean-pooled patch-token features [n, dim] from a full-token forward, run
/// without a graph in batches. layer = l in [0, depth] reads the input of
/// block l (0 = embeddings, depth = last block output); nullopt reads the
/// final normalized encoder output.
Tensor pooled_features(const Encoder& encoder, const std::vector<const Image*>& images,
                       std::optional<std::size_t> layer, std::size_t batch_size = 128);

inline Tensor layer_features(const Encoder& encoder, const std::vector<const Image*>& images, std::size_t layer) {
    return pooled_features(encoder, images, layer);
}

struct SpectrumResult {
    std::size_t layer = 0;
    std::vector<double> singular_values;  ///< descending, min(n, d) values
};

/// Singular values of the column-centered features divided by sqrt(n - 1),
/// via one-sided Jacobi rotations.
SpectrumResult sv_spectrum(const Tensor& features);

/// log(max(sa_i, 1e-12)) - log(max(sb_i, 1e-12)) for ranks i < min(n - 1, dim).
std::vector<double> sv_gap_values(const std::vector<double>& sa, const std::vector<double>& sb, std::size_t n,
                                  std::size_t dim);

std::vector<double> sv_gap_curve(const Encoder& model_a, const Encoder& model_b,
                                 const std::vector<const Image*>& images, std::size_t layer);

}  // namespace lcmae
