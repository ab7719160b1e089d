#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcmae/lcmae.hpp"

namespace lcmae {

struct GradCaseResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t n_params = 0;
    /// Input or parameter holding the worst coordinate.
    std::string worst_input;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Small model for finite-difference checks of the whole objective: 8x8
/// images, patch 4, width 8, one block, two heads, 16/8 guidance heads.
ModelConfig tiny_model_config();

/// One case per differentiable op. Each op output is contracted with a fixed
/// random tensor so every output coordinate contributes to the scalar.
std::vector<GradCaseResult> op_grad_checks(std::uint64_t seed, double h = 1e-5);

/// The full training objective on a 2-sample batch w.r.t. every online
/// parameter, across distances, guidance types, sources and MIM modes.
std::vector<GradCaseResult> objective_grad_checks(std::uint64_t seed, double h = 1e-5);

}  // namespace lcmae
