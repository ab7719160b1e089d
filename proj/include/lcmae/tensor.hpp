#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lcmae {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

/// Dense row-major tensor of doubles with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies refer to the same node, so a parameter
/// held by a model and by an optimizer is one object. Data of non-leaf tensors
/// is never mutated after creation; leaves may be updated in place between
/// steps through mutable_data().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    /// Extent of one axis; negative axes count from the back.
    std::size_t dim(int axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    /// Empty span when no gradient has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// New leaf holding a copy of the data, outside any graph.
    Tensor detach() const;
    /// Like detach() but keeps the requires_grad flag.
    Tensor clone() const;

    /// Accumulates d(this)/d(leaf) into every requires_grad leaf reachable
    /// from this scalar. Intermediate gradients are reset on each call, so two
    /// calls without zero_grad() on the leaves add up exactly twice.
    void backward() const;

    detail::Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables graph recording for the lifetime of the guard (thread local).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace lcmae
