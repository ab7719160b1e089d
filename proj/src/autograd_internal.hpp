#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "lcmae/tensor.hpp"

namespace lcmae::detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

/// Creates the result of an op. The backward closure is kept only when graph
/// recording is on and at least one input requires a gradient; it receives the
/// result node and must accumulate into parents that require gradients.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn);

inline Node& node_of(const Tensor& t) { return *t.node(); }

// Row-major gemm: C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc);

}  // namespace lcmae::detail
