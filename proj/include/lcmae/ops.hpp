#pragma once

#include <cstddef>
#include <vector>

#include "lcmae/tensor.hpp"

namespace lcmae {

/// Per-sample index lists, one list per batch element. All lists of one call
/// have the same length.
using IndexLists = std::vector<std::vector<std::size_t>>;

// Elementwise arithmetic. `b` either has the shape of `a` or a suffix of it, in
// which case it is broadcast over the leading axes of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);
Tensor absolute(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [b, n, d] -> [b, d], average over the token axis.
Tensor mean_tokens(const Tensor& x);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose_last2(const Tensor& a);

/// [.., m, k] x [.., k, n]. Leading axes must agree, or one side is a plain
/// matrix shared across the other's leading axes.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [.., in] * w [in, out] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Numerically stable softmax over the last axis (max subtraction).
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

struct BatchNormState {
    Tensor gamma;
    Tensor beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    bool training = true;

    static BatchNormState create(std::size_t features);
};

/// x [b, d]. Training mode normalizes with batch statistics (biased variance)
/// and folds them into the running statistics (unbiased variance); inference
/// mode reads the running statistics only.
Tensor batch_norm(const Tensor& x, BatchNormState& state);

enum class Activation { gelu, relu };

/// GELU uses the tanh approximation 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3))).
Tensor activation(const Tensor& x, Activation kind);
inline Tensor gelu(const Tensor& x) { return activation(x, Activation::gelu); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }

/// Rows of the last axis divided by max(norm, eps).
Tensor l2_normalize(const Tensor& x, double eps);

/// x [b, n, d], idx[b] = k indices -> [b, k, d].
Tensor gather_rows(const Tensor& x, const IndexLists& idx);
/// table [n, d], idx[b] = k indices -> [b, k, d].
Tensor lookup_rows(const Tensor& table, const IndexLists& idx);
/// src [b, k, d] placed at idx[b] inside a length-n sequence; every other slot
/// holds `fill` [d].
Tensor scatter_rows(const Tensor& src, const Tensor& fill, const IndexLists& idx, std::size_t n);
/// x [b, n, d], token [d] -> [b, n + 1, d] with the token first.
Tensor prepend_token(const Tensor& x, const Tensor& token);
/// a [b, n, d], c [b, m, d] -> [b, n + m, d].
Tensor concat_tokens(const Tensor& a, const Tensor& c);
/// x [b, n, d] -> [b, count, d] starting at `begin`.
Tensor slice_tokens(const Tensor& x, std::size_t begin, std::size_t count);

/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
/// Mean Huber loss with transition point beta.
Tensor smooth_l1_loss(const Tensor& a, const Tensor& b, double beta);

struct AttentionOutput {
    Tensor out;
    Tensor weights;  ///< [b, heads, n_q, n_k]; defined only when captured.
};

/// Scaled dot-product attention on already projected q [b, n, d], k/v
/// [b, m, d], split into `heads` heads of width d/heads, scale 1/sqrt(d/heads).
AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                     bool capture);

}  // namespace lcmae
