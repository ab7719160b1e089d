#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lcmae/tensor.hpp"

namespace lcmae {

struct GradCheckOptions {
    double h = 1e-5;
    /// Coordinates probed per leaf; 0 probes every coordinate.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

/// Worst relative error between backward() and central differences of f at
/// x0. Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0, double h);

struct GradCheckReport {
    double max_rel_error = 0.0;
    /// Location of the worst coordinate: index into `leaves` and flat offset.
    std::size_t leaf = 0;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Same comparison against every leaf in `leaves`, perturbed in place. f must
/// rebuild its graph from the leaves on each call.
double grad_check_leaves(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                         const GradCheckOptions& options = {});
GradCheckReport grad_check_report(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                                  const GradCheckOptions& options = {});

}  // namespace lcmae
