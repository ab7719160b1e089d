#include "lcmae/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "autograd_internal.hpp"
#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

thread_local bool g_grad_enabled = true;

void require_defined(const Tensor& t) {
    if (!t.defined()) throw ContractError("operation on an undefined tensor");
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    require_defined(*this);
    return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
    const auto& s = shape();
    const int n = static_cast<int>(s.size());
    const int a = axis < 0 ? n + axis : axis;
    if (a < 0 || a >= n) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    return s[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const {
    require_defined(*this);
    return node_->data.size();
}

std::span<const double> Tensor::data() const {
    require_defined(*this);
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    require_defined(*this);
    if (!node_->parents.empty()) throw ContractError("in-place update of a non-leaf tensor");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const {
    require_defined(*this);
    return node_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
    require_defined(*this);
    if (!is_leaf()) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
}

bool Tensor::is_leaf() const {
    require_defined(*this);
    return node_->parents.empty();
}

bool Tensor::has_grad() const {
    require_defined(*this);
    return !node_->grad.empty() || node_->data.empty();
}

std::span<const double> Tensor::grad() const {
    require_defined(*this);
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    require_defined(*this);
    return node_->ensure_grad();
}

void Tensor::zero_grad() {
    require_defined(*this);
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data, false); }

Tensor Tensor::clone() const { return from_data(shape(), node_->data, node_->requires_grad); }

void Tensor::backward() const {
    require_defined(*this);
    if (node_->data.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(node_->shape));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order with each node once.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (auto* n : order) {
        if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool track = false;
    if (g_grad_enabled) {
        for (const Tensor* t : inputs) {
            if (t && t->defined() && t->requires_grad()) track = true;
        }
    }
    if (track) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) {
            if (t && t->defined()) node->parents.push_back(t->node_ptr());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

namespace {
struct BlasSetup {
    BlasSetup() { openblas_set_num_threads(1); }
};
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc) {
    // Bit-stable results require a fixed thread count.
    static const BlasSetup setup;
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] = beta == 0.0 ? 0.0 : beta * c[i * ldc + j];
        }
        return;
    }
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda),
                b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

}  // namespace detail
}  // namespace lcmae
