#include "lcmae/optim.hpp"

#include <cmath>

#include "lcmae/errors.hpp"

namespace lcmae {

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, double lr, double wd, double beta1, double beta2, double eps) {
    if (m.size() != theta.size() || v.size() != theta.size() || (!grad.empty() && grad.size() != theta.size())) {
        throw DimensionError("adamw_update: buffer sizes disagree");
    }
    if (t == 0) throw ContractError("adamw_update: step counter is 1-based");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        if (wd != 0.0) theta[i] -= lr * wd * theta[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
}

AdamW::AdamW(std::vector<OptimParam> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        if (!p.tensor.defined() || !p.tensor.is_leaf()) {
            throw ContractError("optimizer parameter '" + p.name + "' is not a leaf tensor");
        }
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        const double wd = p.weight_decay ? config_.weight_decay : 0.0;
        adamw_update(p.tensor.mutable_data(), p.tensor.grad(), m_[i], v_[i], step_, lr * p.lr_scale, wd,
                     config_.beta1, config_.beta2, config_.eps);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace lcmae
