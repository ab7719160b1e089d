#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lcmae/tensor.hpp"

namespace lcmae {

/// One optimizer slot: the parameter plus its learning-rate multiplier and
/// whether weight decay applies to it.
struct OptimParam {
    std::string name;
    Tensor tensor;
    double lr_scale = 1.0;
    bool weight_decay = true;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// In-place AdamW update of one buffer. `t` is the 1-based step used for bias
/// correction. Weight decay is decoupled: theta -= lr * wd * theta happens
/// before, and independently of, the adaptive step.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::uint64_t t, double lr, double wd, double beta1, double beta2, double eps);

class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<OptimParam> params, AdamWConfig config);

    /// Applies one update with base learning rate `lr`; parameters without an
    /// accumulated gradient are treated as having a zero gradient.
    void step(double lr);
    void zero_grad();

    const std::vector<OptimParam>& params() const { return params_; }
    std::uint64_t step_count() const { return step_; }
    void set_step_count(std::uint64_t step) { step_ = step; }
    std::vector<double>& first_moment(std::size_t i) { return m_[i]; }
    std::vector<double>& second_moment(std::size_t i) { return v_[i]; }
    const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }
    const AdamWConfig& config() const { return config_; }

private:
    std::vector<OptimParam> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::uint64_t step_ = 0;
};

}  // namespace lcmae
