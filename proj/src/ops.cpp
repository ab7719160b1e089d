#include "lcmae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "autograd_internal.hpp"
#include "lcmae/errors.hpp"

namespace lcmae {

using detail::gemm;
using detail::make_result;
using detail::Node;

namespace {

void require(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined input");
}

// Size of the broadcast block when `b` is a suffix of `a`; throws otherwise.
std::size_t broadcast_block(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return b.numel();
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

void check_finite(std::span<const double> xs, const char* op) {
    for (double x : xs) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

void check_index_lists(const IndexLists& idx, std::size_t batch, std::size_t limit, const char* op) {
    if (idx.size() != batch) {
        throw ContractError(std::string(op) + ": " + std::to_string(idx.size()) + " index lists for batch " +
                            std::to_string(batch));
    }
    for (const auto& list : idx) {
        if (list.size() != idx.front().size()) {
            throw ContractError(std::string(op) + ": index lists of unequal length");
        }
        for (auto i : list) {
            if (i >= limit) {
                throw IndexError(std::string(op) + ": index " + std::to_string(i) + " out of range [0, " +
                                 std::to_string(limit) + ")");
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require(a, "add");
    require(b, "add");
    const std::size_t block = broadcast_block(a, b, "add");
    auto out = std::vector<double>(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % block];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("add", a.shape(), std::move(out), {&a, &b}, [an, bn, block](Node& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a, "sub");
    require(b, "sub");
    const std::size_t block = broadcast_block(a, b, "sub");
    auto out = std::vector<double>(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % block];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("sub", a.shape(), std::move(out), {&a, &b}, [an, bn, block](Node& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a, "mul");
    require(b, "mul");
    const std::size_t block = broadcast_block(a, b, "mul");
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % block];
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("mul", a.shape(), std::move(out), {&a, &b}, [an, bn, block](Node& self) {
        // Read both operands before writing: a and b may be the same node.
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->data[i % block];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i] * an->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    require(a, "scale");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& x : out) x *= factor;
    Node* an = a.node();
    return make_result("scale", a.shape(), std::move(out), {&a}, [an, factor](Node& self) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor square(const Tensor& a) {
    require(a, "square");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& x : out) x *= x;
    Node* an = a.node();
    return make_result("square", a.shape(), std::move(out), {&a}, [an](Node& self) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * an->data[i] * self.grad[i];
    });
}

Tensor absolute(const Tensor& a) {
    require(a, "absolute");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& x : out) x = std::abs(x);
    Node* an = a.node();
    return make_result("absolute", a.shape(), std::move(out), {&a}, [an](Node& self) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = an->data[i];
            g[i] += (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)) * self.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and shape

Tensor sum(const Tensor& a) {
    require(a, "sum");
    double s = 0.0;
    for (double x : a.data()) s += x;
    Node* an = a.node();
    return make_result("sum", {}, {s}, {&a}, [an](Node& self) {
        auto& g = an->ensure_grad();
        for (auto& x : g) x += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    require(a, "mean");
    if (a.numel() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_tokens(const Tensor& x) {
    require(x, "mean_tokens");
    if (x.ndim() != 3) throw DimensionError("mean_tokens expects [b, n, d], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (n == 0) throw ContractError("mean_tokens: no tokens to pool");
    const auto xd = x.data();
    std::vector<double> out(b * d, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0; t < n; ++t) {
            const double* row = xd.data() + (i * n + t) * d;
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += row[j];
        }
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= static_cast<double>(n);
    }
    Node* xn = x.node();
    return make_result("mean_tokens", {b, d}, std::move(out), {&x}, [xn, b, n, d](Node& self) {
        auto& g = xn->ensure_grad();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t j = 0; j < d; ++j) g[(i * n + t) * d + j] += self.grad[i * d + j] * inv;
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    Node* an = a.node();
    return make_result("reshape", std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), {&a},
                       [an](Node& self) {
                           auto& g = an->ensure_grad();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       });
}

Tensor transpose_last2(const Tensor& a) {
    require(a, "transpose_last2");
    if (a.ndim() < 2) throw DimensionError("transpose_last2 needs at least 2 axes, got " + shape_str(a.shape()));
    Shape shape = a.shape();
    const std::size_t r = shape[shape.size() - 2], c = shape[shape.size() - 1];
    const std::size_t batch = a.numel() / std::max<std::size_t>(r * c, 1);
    std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t bi = 0; bi < batch; ++bi) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) out[bi * r * c + j * r + i] = ad[bi * r * c + i * c + j];
        }
    }
    Node* an = a.node();
    return make_result("transpose_last2", std::move(shape), std::move(out), {&a}, [an, batch, r, c](Node& self) {
        auto& g = an->ensure_grad();
        for (std::size_t bi = 0; bi < batch; ++bi) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) g[bi * r * c + i * c + j] += self.grad[bi * r * c + j * r + i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// contractions

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a, "matmul");
    require(b, "matmul");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
    const Shape lead_a(sa.begin(), sa.end() - 2);
    const Shape lead_b(sb.begin(), sb.end() - 2);
    const bool shared_b = lead_b.empty();
    const bool shared_a = lead_a.empty() && !shared_b;
    if (!shared_b && !shared_a && lead_a != lead_b) {
        throw DimensionError("matmul: batch extents differ in " + shape_str(sa) + " and " + shape_str(sb));
    }
    Shape out_shape = shared_a ? lead_b : lead_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    const std::size_t batch = shape_numel(shared_a ? lead_b : lead_a);

    const double* ad = a.data().data();
    const double* bd = b.data().data();
    std::vector<double> out(batch * m * n, 0.0);
    if (shared_b) {
        gemm(false, false, batch * m, n, k, 1.0, ad, k, bd, n, 0.0, out.data(), n);
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            const double* ai = shared_a ? ad : ad + i * m * k;
            gemm(false, false, m, n, k, 1.0, ai, k, bd + i * k * n, n, 0.0, out.data() + i * m * n, n);
        }
    }

    Node* an = a.node();
    Node* bn = b.node();
    return make_result("matmul", std::move(out_shape), std::move(out), {&a, &b},
                       [an, bn, m, n, k, batch, shared_a, shared_b](Node& self) {
                           const double* dc = self.grad.data();
                           if (shared_b) {
                               if (an->requires_grad) {
                                   gemm(false, true, batch * m, k, n, 1.0, dc, n, bn->data.data(), n, 1.0,
                                        an->ensure_grad().data(), k);
                               }
                               if (bn->requires_grad) {
                                   gemm(true, false, k, n, batch * m, 1.0, an->data.data(), k, dc, n, 1.0,
                                        bn->ensure_grad().data(), n);
                               }
                               return;
                           }
                           for (std::size_t i = 0; i < batch; ++i) {
                               const std::size_t a_off = shared_a ? 0 : i * m * k;
                               if (an->requires_grad) {
                                   gemm(false, true, m, k, n, 1.0, dc + i * m * n, n, bn->data.data() + i * k * n, n,
                                        1.0, an->ensure_grad().data() + a_off, k);
                               }
                               if (bn->requires_grad) {
                                   gemm(true, false, k, n, m, 1.0, an->data.data() + a_off, k, dc + i * m * n, n, 1.0,
                                        bn->ensure_grad().data() + i * k * n, n);
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require(x, "linear");
    require(w, "linear");
    if (w.ndim() != 2 || x.ndim() < 1 || x.dim(-1) != w.dim(0)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(w.shape()));
    }
    const std::size_t in = w.dim(0), outw = w.dim(1);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != outw)) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(w.shape()));
    }
    const std::size_t rows = in == 0 ? 0 : x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outw;
    std::vector<double> out(rows * outw, 0.0);
    if (has_bias) {
        const auto bd = bias.data();
        for (std::size_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * outw);
    }
    gemm(false, false, rows, outw, in, 1.0, x.data().data(), in, w.data().data(), outw, has_bias ? 1.0 : 0.0,
         out.data(), outw);

    Node* xn = x.node();
    Node* wn = w.node();
    Node* bn = has_bias ? bias.node() : nullptr;
    return make_result("linear", std::move(out_shape), std::move(out), {&x, &w, has_bias ? &bias : nullptr},
                       [xn, wn, bn, rows, in, outw](Node& self) {
                           const double* dy = self.grad.data();
                           if (xn->requires_grad) {
                               gemm(false, true, rows, in, outw, 1.0, dy, outw, wn->data.data(), outw, 1.0,
                                    xn->ensure_grad().data(), in);
                           }
                           if (wn->requires_grad) {
                               gemm(true, false, in, outw, rows, 1.0, xn->data.data(), in, dy, outw, 1.0,
                                    wn->ensure_grad().data(), outw);
                           }
                           if (bn && bn->requires_grad) {
                               auto& g = bn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < outw; ++j) g[j] += dy[r * outw + j];
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// normalization and activations

namespace {

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * width;
        double* yr = y + r * width;
        const double mx = *std::max_element(xr, xr + width);
        double s = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            s += yr[j];
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < width; ++j) yr[j] *= inv;
    }
}

// dx = y * (dy - <dy, y>) per row.
void softmax_rows_backward(const double* y, const double* dy, double* dx, std::size_t rows, std::size_t width) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y + r * width;
        const double* dyr = dy + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += yr[j] * dyr[j];
        for (std::size_t j = 0; j < width; ++j) dx[r * width + j] += yr[j] * (dyr[j] - dot);
    }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
    require(x, "softmax_lastdim");
    if (x.ndim() == 0 || x.dim(-1) == 0) throw DimensionError("softmax_lastdim: last extent must be >= 1");
    check_finite(x.data(), "softmax_lastdim");
    const std::size_t width = x.dim(-1);
    const std::size_t rows = x.numel() / width;
    std::vector<double> out(x.numel());
    softmax_rows(x.data().data(), out.data(), rows, width);
    Node* xn = x.node();
    return make_result("softmax_lastdim", x.shape(), std::move(out), {&x}, [xn, rows, width](Node& self) {
        softmax_rows_backward(self.data.data(), self.grad.data(), xn->ensure_grad().data(), rows, width);
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x, "layer_norm");
    if (eps < 0.0) throw ContractError("layer_norm: eps must be non-negative");
    const std::size_t d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                             shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<double> xhat(x.numel()), rstd(rows), out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        if (var + eps <= 0.0) throw NumericError("layer_norm: zero variance with eps = 0");
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * rstd[r];
            out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
        }
    }
    Node* xn = x.node();
    Node* gn = gamma.node();
    Node* bn = beta.node();
    return make_result("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                       [xn, gn, bn, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                           const double* dy = self.grad.data();
                           if (gn->requires_grad || bn->requires_grad) {
                               auto& gg = gn->ensure_grad();
                               auto& gb = bn->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < d; ++j) {
                                       gg[j] += dy[r * d + j] * xhat[r * d + j];
                                       gb[j] += dy[r * d + j];
                                   }
                               }
                           }
                           if (!xn->requires_grad) return;
                           auto& gx = xn->ensure_grad();
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dxh = dy[r * d + j] * gn->data[j];
                                   s1 += dxh;
                                   s2 += dxh * xhat[r * d + j];
                               }
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double dxh = dy[r * d + j] * gn->data[j];
                                   gx[r * d + j] += rstd[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                               }
                           }
                       });
}

BatchNormState BatchNormState::create(std::size_t features) {
    BatchNormState s;
    s.gamma = Tensor::full({features}, 1.0, true);
    s.beta = Tensor::zeros({features}, true);
    s.running_mean.assign(features, 0.0);
    s.running_var.assign(features, 1.0);
    return s;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state) {
    require(x, "batch_norm");
    if (x.ndim() != 2) throw DimensionError("batch_norm expects [b, d], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), d = x.dim(1);
    if (state.gamma.numel() != d || state.running_mean.size() != d) {
        throw DimensionError("batch_norm: state has " + std::to_string(state.running_mean.size()) +
                             " features, input " + shape_str(x.shape()));
    }
    const auto xd = x.data();
    const auto gd = state.gamma.data();
    const auto bd = state.beta.data();
    std::vector<double> xhat(b * d), rstd(d), out(b * d);
    const bool training = state.training;
    if (training) {
        if (b < 2) throw DegenerateError("batch_norm: training mode needs a batch of at least 2, got 1");
        for (std::size_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < b; ++i) mu += xd[i * d + j];
            mu /= static_cast<double>(b);
            double ss = 0.0;
            for (std::size_t i = 0; i < b; ++i) ss += (xd[i * d + j] - mu) * (xd[i * d + j] - mu);
            const double var = ss / static_cast<double>(b);
            rstd[j] = 1.0 / std::sqrt(var + state.eps);
            for (std::size_t i = 0; i < b; ++i) xhat[i * d + j] = (xd[i * d + j] - mu) * rstd[j];
            state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu;
            state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] +
                                   state.momentum * ss / static_cast<double>(b - 1);
        }
    } else {
        for (std::size_t j = 0; j < d; ++j) {
            rstd[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
            for (std::size_t i = 0; i < b; ++i) xhat[i * d + j] = (xd[i * d + j] - state.running_mean[j]) * rstd[j];
        }
    }
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xhat[i * d + j] * gd[j] + bd[j];
    }
    Node* xn = x.node();
    Node* gn = state.gamma.node();
    Node* bn = state.beta.node();
    return make_result(
        "batch_norm", x.shape(), std::move(out), {&x, &state.gamma, &state.beta},
        [xn, gn, bn, b, d, training, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
            const double* dy = self.grad.data();
            if (gn->requires_grad || bn->requires_grad) {
                auto& gg = gn->ensure_grad();
                auto& gb = bn->ensure_grad();
                for (std::size_t i = 0; i < b; ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += dy[i * d + j] * xhat[i * d + j];
                        gb[j] += dy[i * d + j];
                    }
                }
            }
            if (!xn->requires_grad) return;
            auto& gx = xn->ensure_grad();
            const double inv_b = 1.0 / static_cast<double>(b);
            for (std::size_t j = 0; j < d; ++j) {
                const double gamma = gn->data[j];
                if (!training) {
                    for (std::size_t i = 0; i < b; ++i) gx[i * d + j] += dy[i * d + j] * gamma * rstd[j];
                    continue;
                }
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < b; ++i) {
                    const double dxh = dy[i * d + j] * gamma;
                    s1 += dxh;
                    s2 += dxh * xhat[i * d + j];
                }
                for (std::size_t i = 0; i < b; ++i) {
                    const double dxh = dy[i * d + j] * gamma;
                    gx[i * d + j] += rstd[j] * (dxh - inv_b * s1 - xhat[i * d + j] * inv_b * s2);
                }
            }
        });
}

Tensor activation(const Tensor& x, Activation kind) {
    require(x, "activation");
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    Node* xn = x.node();
    if (kind == Activation::relu) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
        return make_result("relu", x.shape(), std::move(out), {&x}, [xn](Node& self) {
            auto& g = xn->ensure_grad();
            const auto& xv = xn->data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xv[i] > 0.0) g[i] += self.grad[i];
            }
        });
    }

    constexpr double kGeluCoeff = 0.044715;
    const double c = std::sqrt(2.0 / std::numbers::pi);
    // tanh through a single exp; libm tanh dominated the step profile.
    auto fast_tanh = [](double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); };
    const bool keep = grad_enabled() && x.requires_grad();
    std::vector<double> tanhs(keep ? xd.size() : 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xd[i];
        const double t = fast_tanh(c * (v + kGeluCoeff * v * v * v));
        if (keep) tanhs[i] = t;
        out[i] = 0.5 * v * (1.0 + t);
    }
    return make_result("gelu", x.shape(), std::move(out), {&x},
                       [xn, c, tanhs = std::move(tanhs)](Node& self) {
                           auto& g = xn->ensure_grad();
                           const auto& xv = xn->data;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               const double v = xv[i];
                               const double t = tanhs[i];
                               const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * kGeluCoeff * v * v);
                               g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                           }
                       });
}

Tensor l2_normalize(const Tensor& x, double eps) {
    require(x, "l2_normalize");
    if (!(eps > 0.0)) throw ContractError("l2_normalize: eps must be positive");
    const std::size_t d = x.dim(-1);
    const std::size_t rows = d == 0 ? 0 : x.numel() / d;
    const auto xd = x.data();
    std::vector<double> out(xd.size()), norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += xd[r * d + j] * xd[r * d + j];
        norms[r] = std::sqrt(s);
        const double denom = std::max(norms[r], eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / denom;
    }
    Node* xn = x.node();
    return make_result("l2_normalize", x.shape(), std::move(out), {&x},
                       [xn, rows, d, eps, norms = std::move(norms)](Node& self) {
                           auto& g = xn->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = self.grad.data() + r * d;
                               if (norms[r] <= eps) {
                                   for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dy[j] / eps;
                                   continue;
                               }
                               const double* y = self.data.data() + r * d;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
                               for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (dy[j] - y[j] * dot) / norms[r];
                           }
                       });
}

// ---------------------------------------------------------------------------
// token indexing

Tensor gather_rows(const Tensor& x, const IndexLists& idx) {
    require(x, "gather_rows");
    if (x.ndim() != 3) throw DimensionError("gather_rows expects [b, n, d], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    check_index_lists(idx, b, n, "gather_rows");
    const std::size_t k = idx.empty() ? 0 : idx.front().size();
    const auto xd = x.data();
    std::vector<double> out(b * k * d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            std::copy_n(xd.data() + (i * n + idx[i][t]) * d, d, out.data() + (i * k + t) * d);
        }
    }
    Node* xn = x.node();
    return make_result("gather_rows", {b, k, d}, std::move(out), {&x}, [xn, idx, b, n, k, d](Node& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
                const double* src = self.grad.data() + (i * k + t) * d;
                double* dst = g.data() + (i * n + idx[i][t]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
}

Tensor lookup_rows(const Tensor& table, const IndexLists& idx) {
    require(table, "lookup_rows");
    if (table.ndim() != 2) throw DimensionError("lookup_rows expects [n, d], got " + shape_str(table.shape()));
    const std::size_t n = table.dim(0), d = table.dim(1);
    check_index_lists(idx, idx.size(), n, "lookup_rows");
    const std::size_t b = idx.size();
    const std::size_t k = idx.empty() ? 0 : idx.front().size();
    const auto td = table.data();
    std::vector<double> out(b * k * d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0; t < k; ++t) std::copy_n(td.data() + idx[i][t] * d, d, out.data() + (i * k + t) * d);
    }
    Node* tn = table.node();
    return make_result("lookup_rows", {b, k, d}, std::move(out), {&table}, [tn, idx, b, k, d](Node& self) {
        auto& g = tn->ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
                const double* src = self.grad.data() + (i * k + t) * d;
                double* dst = g.data() + idx[i][t] * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
}

Tensor scatter_rows(const Tensor& src, const Tensor& fill, const IndexLists& idx, std::size_t n) {
    require(src, "scatter_rows");
    require(fill, "scatter_rows");
    if (src.ndim() != 3) throw DimensionError("scatter_rows expects [b, k, d], got " + shape_str(src.shape()));
    const std::size_t b = src.dim(0), k = src.dim(1), d = src.dim(2);
    if (fill.numel() != d) {
        throw DimensionError("scatter_rows: fill " + shape_str(fill.shape()) + " does not match width " +
                             std::to_string(d));
    }
    check_index_lists(idx, b, n, "scatter_rows");
    if (!idx.empty() && idx.front().size() != k) {
        throw ContractError("scatter_rows: " + std::to_string(idx.front().size()) + " indices for " +
                            std::to_string(k) + " rows");
    }
    // occupied[i * n + p] = source row + 1, or 0 for fill slots.
    std::vector<std::size_t> occupied(b * n, 0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            auto& slot = occupied[i * n + idx[i][t]];
            if (slot != 0) throw ContractError("scatter_rows: duplicate position " + std::to_string(idx[i][t]));
            slot = t + 1;
        }
    }
    const auto sd = src.data();
    const auto fd = fill.data();
    std::vector<double> out(b * n * d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t p = 0; p < n; ++p) {
            const std::size_t s = occupied[i * n + p];
            const double* row = s ? sd.data() + (i * k + s - 1) * d : fd.data();
            std::copy_n(row, d, out.data() + (i * n + p) * d);
        }
    }
    Node* sn = src.node();
    Node* fn = fill.node();
    return make_result("scatter_rows", {b, n, d}, std::move(out), {&src, &fill},
                       [sn, fn, b, n, k, d, occupied = std::move(occupied)](Node& self) {
                           for (std::size_t i = 0; i < b; ++i) {
                               for (std::size_t p = 0; p < n; ++p) {
                                   const std::size_t s = occupied[i * n + p];
                                   const double* gy = self.grad.data() + (i * n + p) * d;
                                   Node* target = s ? sn : fn;
                                   if (!target->requires_grad) continue;
                                   double* dst = target->ensure_grad().data() + (s ? (i * k + s - 1) * d : 0);
                                   for (std::size_t j = 0; j < d; ++j) dst[j] += gy[j];
                               }
                           }
                       });
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
    require(x, "prepend_token");
    require(token, "prepend_token");
    if (x.ndim() != 3 || token.numel() != x.dim(2)) {
        throw DimensionError("prepend_token: token " + shape_str(token.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    const auto xd = x.data();
    const auto td = token.data();
    std::vector<double> out(b * (n + 1) * d);
    for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(td.data(), d, out.data() + i * (n + 1) * d);
        std::copy_n(xd.data() + i * n * d, n * d, out.data() + (i * (n + 1) + 1) * d);
    }
    Node* xn = x.node();
    Node* tn = token.node();
    return make_result("prepend_token", {b, n + 1, d}, std::move(out), {&x, &token}, [xn, tn, b, n, d](Node& self) {
        for (std::size_t i = 0; i < b; ++i) {
            const double* gy = self.grad.data() + i * (n + 1) * d;
            if (tn->requires_grad) {
                auto& g = tn->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) g[j] += gy[j];
            }
            if (xn->requires_grad) {
                auto& g = xn->ensure_grad();
                for (std::size_t j = 0; j < n * d; ++j) g[i * n * d + j] += gy[d + j];
            }
        }
    });
}

Tensor concat_tokens(const Tensor& a, const Tensor& c) {
    require(a, "concat_tokens");
    require(c, "concat_tokens");
    if (a.ndim() != 3 || c.ndim() != 3 || a.dim(0) != c.dim(0) || a.dim(2) != c.dim(2)) {
        throw DimensionError("concat_tokens: " + shape_str(a.shape()) + " and " + shape_str(c.shape()));
    }
    const std::size_t b = a.dim(0), n = a.dim(1), m = c.dim(1), d = a.dim(2);
    const auto ad = a.data();
    const auto cd = c.data();
    std::vector<double> out(b * (n + m) * d);
    for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(ad.data() + i * n * d, n * d, out.data() + i * (n + m) * d);
        std::copy_n(cd.data() + i * m * d, m * d, out.data() + (i * (n + m) + n) * d);
    }
    Node* an = a.node();
    Node* cn = c.node();
    return make_result("concat_tokens", {b, n + m, d}, std::move(out), {&a, &c}, [an, cn, b, n, m, d](Node& self) {
        for (std::size_t i = 0; i < b; ++i) {
            const double* gy = self.grad.data() + i * (n + m) * d;
            if (an->requires_grad) {
                auto& g = an->ensure_grad();
                for (std::size_t j = 0; j < n * d; ++j) g[i * n * d + j] += gy[j];
            }
            if (cn->requires_grad) {
                auto& g = cn->ensure_grad();
                for (std::size_t j = 0; j < m * d; ++j) g[i * m * d + j] += gy[n * d + j];
            }
        }
    });
}

Tensor slice_tokens(const Tensor& x, std::size_t begin, std::size_t count) {
    require(x, "slice_tokens");
    if (x.ndim() != 3 || begin + count > x.dim(1)) {
        throw DimensionError("slice_tokens: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    const auto xd = x.data();
    std::vector<double> out(b * count * d);
    for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(xd.data() + (i * n + begin) * d, count * d, out.data() + i * count * d);
    }
    Node* xn = x.node();
    return make_result("slice_tokens", {b, count, d}, std::move(out), {&x}, [xn, b, n, d, begin, count](Node& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < count * d; ++j) g[(i * n + begin) * d + j] += self.grad[i * count * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// losses

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    require(logits, "cross_entropy");
    if (logits.ndim() != 2) throw DimensionError("cross_entropy expects [b, c], got " + shape_str(logits.shape()));
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) throw ContractError("cross_entropy: label count does not match batch");
    if (b == 0) throw ContractError("cross_entropy: empty batch");
    check_finite(logits.data(), "cross_entropy");
    std::vector<double> probs(b * c);
    softmax_rows(logits.data().data(), probs.data(), b, c);
    double loss = 0.0;
    const auto ld = logits.data();
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= c) throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " >= " + std::to_string(c));
        const double* row = ld.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        loss += mx + std::log(s) - row[labels[i]];
    }
    loss /= static_cast<double>(b);
    Node* ln = logits.node();
    return make_result("cross_entropy", {}, {loss}, {&logits},
                       [ln, labels, b, c, probs = std::move(probs)](Node& self) {
                           auto& g = ln->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(b);
                           for (std::size_t i = 0; i < b; ++i) {
                               for (std::size_t j = 0; j < c; ++j) {
                                   g[i * c + j] += s * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
                               }
                           }
                       });
}

Tensor smooth_l1_loss(const Tensor& a, const Tensor& b, double beta) {
    require(a, "smooth_l1_loss");
    require(b, "smooth_l1_loss");
    if (a.shape() != b.shape()) {
        throw DimensionError("smooth_l1_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (a.numel() == 0) throw ContractError("smooth_l1_loss of empty tensors");
    if (!(beta > 0.0)) throw ContractError("smooth_l1_loss: beta must be positive");
    const auto ad = a.data();
    const auto bd = b.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        const double z = std::abs(ad[i] - bd[i]);
        loss += z < beta ? 0.5 * z * z / beta : z - 0.5 * beta;
    }
    const double count = static_cast<double>(ad.size());
    Node* an = a.node();
    Node* bn = b.node();
    return make_result("smooth_l1_loss", {}, {loss / count}, {&a, &b}, [an, bn, beta, count](Node& self) {
        const double s = self.grad[0] / count;
        for (std::size_t i = 0; i < an->data.size(); ++i) {
            const double z = an->data[i] - bn->data[i];
            const double dz = std::abs(z) < beta ? z / beta : (z > 0.0 ? 1.0 : -1.0);
            if (an->requires_grad) an->ensure_grad()[i] += s * dz;
            if (bn->requires_grad) bn->ensure_grad()[i] -= s * dz;
        }
    });
}

// ---------------------------------------------------------------------------
// attention

AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                     bool capture) {
    require(q, "multi_head_attention");
    require(k, "multi_head_attention");
    require(v, "multi_head_attention");
    if (q.ndim() != 3 || k.shape() != v.shape() || k.ndim() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        throw DimensionError("multi_head_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()));
    }
    const std::size_t b = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    if (nk == 0) throw ContractError("multi_head_attention: no keys");
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();

    // probs layout [b, heads, nq, nk]
    std::vector<double> probs(b * heads * nq * nk);
    std::vector<double> out(b * nq * d, 0.0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs.data() + (i * heads + h) * nq * nk;
            gemm(false, true, nq, nk, dh, sc, qd + i * nq * d + h * dh, d, kd + i * nk * d + h * dh, d, 0.0, p, nk);
            for (std::size_t j = 0; j < nq * nk; ++j) {
                if (!std::isfinite(p[j])) throw NumericError("multi_head_attention: non-finite scores");
            }
            softmax_rows(p, p, nq, nk);
            gemm(false, false, nq, dh, nk, 1.0, p, nk, vd + i * nk * d + h * dh, d, 0.0,
                 out.data() + i * nq * d + h * dh, d);
        }
    }

    AttentionOutput result;
    if (capture) result.weights = Tensor::from_data({b, heads, nq, nk}, probs);
    Node* qn = q.node();
    Node* kn = k.node();
    Node* vn = v.node();
    result.out = make_result(
        "multi_head_attention", {b, nq, d}, std::move(out), {&q, &k, &v},
        [qn, kn, vn, b, nq, nk, d, heads, dh, sc, probs = std::move(probs)](Node& self) {
            const double* dout = self.grad.data();
            std::vector<double> dp(nq * nk), ds(nq * nk);
            double* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
            double* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
            double* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = probs.data() + (i * heads + h) * nq * nk;
                    const double* dout_h = dout + i * nq * d + h * dh;
                    if (gv) gemm(true, false, nk, dh, nq, 1.0, p, nk, dout_h, d, 1.0, gv + i * nk * d + h * dh, d);
                    if (!gq && !gk) continue;
                    gemm(false, true, nq, nk, dh, 1.0, dout_h, d, vn->data.data() + i * nk * d + h * dh, d, 0.0,
                         dp.data(), nk);
                    std::fill(ds.begin(), ds.end(), 0.0);
                    softmax_rows_backward(p, dp.data(), ds.data(), nq, nk);
                    if (gq) {
                        gemm(false, false, nq, dh, nk, sc, ds.data(), nk, kn->data.data() + i * nk * d + h * dh, d,
                             1.0, gq + i * nq * d + h * dh, d);
                    }
                    if (gk) {
                        gemm(true, false, nk, dh, nq, sc, ds.data(), nk, qn->data.data() + i * nq * d + h * dh, d,
                             1.0, gk + i * nk * d + h * dh, d);
                    }
                }
            }
        });
    return result;
}

}  // namespace lcmae
