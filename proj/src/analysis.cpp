#include "lcmae/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "lcmae/errors.hpp"
#include "lcmae/lcmae.hpp"

namespace lcmae {

namespace {

EncoderOutput full_forward(const Encoder& encoder, const std::vector<const Image*>& images,
                           const EncodeOptions& options) {
    const Tensor patches = patchify(images_to_tensor(images), encoder.config.patch_size);
    if (patches.dim(1) != encoder.config.n_tokens()) {
        throw DimensionError("image of " + std::to_string(images.front()->height) + "x" +
                             std::to_string(images.front()->width) + " does not match the encoder grid");
    }
    return encoder_forward(encoder, patches, full_plan(patches.dim(1), patches.dim(0)).visible, options);
}

bool same_architecture(const Encoder& a, const Encoder& b) {
    const auto& x = a.config;
    const auto& y = b.config;
    return x.image_size == y.image_size && x.patch_size == y.patch_size && x.channels == y.channels &&
           x.dim == y.dim && x.depth == y.depth && x.heads == y.heads && x.use_cls == y.use_cls &&
           a.blocks.size() == b.blocks.size();
}

}  // namespace

AttentionMapResult attention_maps(const Encoder& encoder, const Image& image, std::size_t query_index,
                                  std::size_t layer) {
    const std::size_t n = encoder.config.n_tokens();
    if (query_index >= n) {
        throw IndexError("query index " + std::to_string(query_index) + " out of range [0, " + std::to_string(n) + ")");
    }
    if (layer >= encoder.blocks.size()) {
        throw IndexError("layer " + std::to_string(layer) + " out of range for depth " +
                         std::to_string(encoder.blocks.size()));
    }
    NoGradGuard guard;
    const EncoderOutput out = full_forward(encoder, {&image}, {true, false});
    const Tensor& w = out.attention[layer];  // [1, heads, n', n']
    const std::size_t heads = w.dim(1), nk = w.dim(3);
    const std::size_t offset = out.has_cls ? 1 : 0;
    AttentionMapResult res;
    res.query_index = query_index;
    res.layer = layer;
    res.grid_h = res.grid_w = encoder.config.grid();
    const auto data = w.data();
    for (std::size_t h = 0; h < heads; ++h) {
        const double* row = data.data() + (h * nk + query_index + offset) * nk;
        res.maps.emplace_back(row + offset, row + nk);
    }
    return res;
}

std::vector<double> mean_attention_distance(const Tensor& attention, std::size_t grid_h, std::size_t grid_w) {
    if (attention.ndim() != 4 || attention.dim(2) != grid_h * grid_w || attention.dim(3) != grid_h * grid_w) {
        throw DimensionError("mean_attention_distance: attention " + shape_str(attention.shape()) +
                             " does not cover a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    const std::size_t b = attention.dim(0), heads = attention.dim(1), q = grid_h * grid_w;
    std::vector<double> dist(q * q);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
            const double dy = static_cast<double>(i / grid_w) - static_cast<double>(j / grid_w);
            const double dx = static_cast<double>(i % grid_w) - static_cast<double>(j % grid_w);
            dist[i * q + j] = std::sqrt(dy * dy + dx * dx);
        }
    }
    const auto w = attention.data();
    std::vector<double> out(heads, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        double total = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const double* m = w.data() + (i * heads + h) * q * q;
            for (std::size_t k = 0; k < q * q; ++k) total += m[k] * dist[k];
        }
        out[h] = total / static_cast<double>(q * b);
    }
    return out;
}

Tensor pooled_features(const Encoder& encoder, const std::vector<const Image*>& images,
                       std::optional<std::size_t> layer, std::size_t batch_size) {
    if (layer && *layer > encoder.blocks.size()) {
        throw IndexError("layer " + std::to_string(*layer) + " out of range for depth " +
                         std::to_string(encoder.blocks.size()));
    }
    if (batch_size == 0) throw ContractError("pooled_features: batch size must be positive");
    NoGradGuard guard;
    const std::size_t dim = encoder.config.dim;
    std::vector<double> out;
    out.reserve(images.size() * dim);
    for (std::size_t start = 0; start < images.size(); start += batch_size) {
        const std::size_t stop = std::min(images.size(), start + batch_size);
        const std::vector<const Image*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                              images.begin() + static_cast<std::ptrdiff_t>(stop));
        const EncoderOutput enc = full_forward(encoder, chunk, {false, layer.has_value()});
        Tensor tokens = layer ? enc.hidden[*layer] : enc.tokens;
        if (enc.has_cls) tokens = slice_tokens(tokens, 1, tokens.dim(1) - 1);
        const Tensor pooled = mean_tokens(tokens);
        out.insert(out.end(), pooled.data().begin(), pooled.data().end());
    }
    return Tensor::from_data({images.size(), dim}, std::move(out));
}

SpectrumResult sv_spectrum(const Tensor& features) {
    if (features.ndim() != 2) throw DimensionError("sv_spectrum expects [n, d], got " + shape_str(features.shape()));
    const std::size_t n = features.dim(0), d = features.dim(1);
    if (n < 2) throw DegenerateError("sv_spectrum needs at least 2 samples, got " + std::to_string(n));
    const auto src = features.data();
    const double inv = 1.0 / std::sqrt(static_cast<double>(n - 1));

    // Work on the orientation with fewer columns: singular values of A and
    // A^T coincide. cols[j] holds column j as a contiguous vector.
    const bool transpose = d > n;
    const std::size_t rows = transpose ? d : n, ncols = transpose ? n : d;
    std::vector<std::vector<double>> cols(ncols, std::vector<double>(rows));
    for (std::size_t j = 0; j < d; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += src[i * d + j];
        mu /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double v = (src[i * d + j] - mu) * inv;
            if (transpose) {
                cols[i][j] = v;
            } else {
                cols[j][i] = v;
            }
        }
    }

    // One-sided Jacobi: rotate column pairs until all are mutually orthogonal;
    // the column norms are then the singular values.
    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < ncols; ++p) {
            for (std::size_t q = p + 1; q < ncols; ++q) {
                auto& a = cols[p];
                auto& b = cols[q];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += a[i] * a[i];
                    beta += b[i] * b[i];
                    gamma += a[i] * b[i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double x = a[i], y = b[i];
                    a[i] = c * x - s * y;
                    b[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    SpectrumResult res;
    for (const auto& c : cols) {
        double s = 0.0;
        for (double v : c) s += v * v;
        res.singular_values.push_back(std::sqrt(s));
    }
    std::sort(res.singular_values.begin(), res.singular_values.end(), std::greater<>());
    return res;
}

std::vector<double> sv_gap_values(const std::vector<double>& sa, const std::vector<double>& sb, std::size_t n,
                                  std::size_t dim) {
    const std::size_t len = std::min(n > 0 ? n - 1 : 0, dim);
    if (sa.size() < len || sb.size() < len) throw ContractError("sv_gap: spectra shorter than the rank bound");
    std::vector<double> out(len);
    for (std::size_t i = 0; i < len; ++i) {
        out[i] = std::log(std::max(sa[i], 1e-12)) - std::log(std::max(sb[i], 1e-12));
    }
    return out;
}

std::vector<double> sv_gap_curve(const Encoder& model_a, const Encoder& model_b,
                                 const std::vector<const Image*>& images, std::size_t layer) {
    if (!same_architecture(model_a, model_b)) throw ContractError("sv_gap_curve: models differ in architecture");
    const auto sa = sv_spectrum(pooled_features(model_a, images, layer)).singular_values;
    const auto sb = sv_spectrum(pooled_features(model_b, images, layer)).singular_values;
    return sv_gap_values(sa, sb, images.size(), model_a.config.dim);
}

}  // namespace lcmae
