#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lcmae/rng.hpp"
#include "lcmae/tensor.hpp"

namespace testutil {

inline lcmae::Tensor randn(lcmae::Rng& rng, lcmae::Shape shape, bool requires_grad = false, double scale = 1.0) {
    std::vector<double> v(lcmae::shape_numel(shape));
    for (auto& e : v) e = scale * rng.normal();
    return lcmae::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const lcmae::Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Independent central-difference gradient of a scalar function of one flat
// buffer; kept separate from the library's grad_check on purpose.
inline std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = x[i];
        x[i] = s + h;
        const double up = f(x);
        x[i] = s - h;
        const double dn = f(x);
        x[i] = s;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
        worst = std::max(worst, std::abs(a[i] - b[i]) / d);
    }
    return worst;
}

// Eigenvalues of a symmetric matrix (row-major, m x m) by cyclic Jacobi
// rotations, returned in descending order.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t m) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = i + 1; j < m; ++j) off += a[i * m + j] * a[i * m + j];
        }
        if (off < 1e-300) break;
        for (std::size_t p = 0; p < m; ++p) {
            for (std::size_t q = p + 1; q < m; ++q) {
                const double apq = a[p * m + q];
                if (apq == 0.0) continue;
                const double theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < m; ++k) {
                    const double akp = a[k * m + p], akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < m; ++k) {
                    const double apk = a[p * m + k], aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(m);
    for (std::size_t i = 0; i < m; ++i) ev[i] = a[i * m + i];
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

// Singular values of the column-centered x [n, d] over sqrt(n - 1), read off
// the eigenvalues of [[0, A], [A^T, 0]], which are +-sigma_i and zeros.
inline std::vector<double> oracle_singular_values(const std::vector<double>& x, std::size_t n, std::size_t d) {
    std::vector<double> a(x);
    for (std::size_t j = 0; j < d; ++j) {
        long double mu = 0.0L;
        for (std::size_t i = 0; i < n; ++i) mu += x[i * d + j];
        mu /= static_cast<long double>(n);
        for (std::size_t i = 0; i < n; ++i) a[i * d + j] = static_cast<double>(x[i * d + j] - mu);
    }
    const double s = 1.0 / std::sqrt(static_cast<double>(n - 1));
    const std::size_t m = n + d;
    std::vector<double> big(m * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            big[i * m + n + j] = a[i * d + j] * s;
            big[(n + j) * m + i] = a[i * d + j] * s;
        }
    }
    auto ev = jacobi_eigenvalues(std::move(big), m);
    ev.resize(std::min(n, d));
    for (auto& v : ev) v = std::max(v, 0.0);
    return ev;
}

}  // namespace testutil
