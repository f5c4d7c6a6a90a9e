#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "cgfr/common.hpp"

namespace cgfr {

namespace detail {
struct TensorImpl;
}

/// Dense n-dimensional array of f64 with optional reverse-mode gradient
/// tracking. Copying a Tensor copies the handle, not the storage; two copies
/// alias the same values and gradient.
///
/// Operations on tensors (see ops.hpp) record a computation graph when any
/// operand requires a gradient and grad mode is enabled. backward() on a
/// scalar then accumulates gradients into every reachable tracked tensor.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape dims);
    static Tensor full(Shape dims, double value);
    static Tensor from_vector(Shape dims, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& dims() const;
    int dim(int axis) const;
    int rank() const;
    std::int64_t numel() const;

    std::span<const double> data() const;
    /// Mutable view of the values. Only meaningful on leaves (parameters,
    /// buffers); mutating an interior graph node invalidates recorded
    /// gradients.
    std::span<double> data_mut();

    bool requires_grad() const;
    Tensor& set_requires_grad(bool rg);
    bool frozen() const;
    Tensor& set_frozen(bool f);

    /// Gradient accumulated by the last backward(); zeros when untouched.
    std::span<const double> grad() const;
    void zero_grad();

    /// Value of a single-element tensor.
    double item() const;
    double at(std::initializer_list<int> idx) const;

    /// Detached copy of the values: same data (shared), no graph history.
    Tensor detach() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& self)>;

struct TensorImpl {
    Shape dims;
    std::vector<double> data;
    bool requires_grad = false;
    bool frozen = false;
    std::vector<double> grad;  // sized lazily on first accumulation

    // Graph edges; empty for leaves.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    BackwardFn backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad();
    // Accumulates g into this node's gradient unless it is frozen or
    // untracked.
    void accumulate(std::span<const double> g);
    void accumulate_at(std::int64_t offset, double g);
};

}  // namespace detail

/// True while operations should record backward closures (thread-local).
bool grad_mode_enabled();

/// RAII guard disabling graph recording, e.g. for cached forward passes.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse-mode sweep from a scalar loss. Gradients sum across all uses of a
/// tensor; frozen tensors keep a zero gradient. Throws ContractError when the
/// loss is not a single element.
void backward(const Tensor& loss);

namespace detail {
/// Shared helper for ops: wires up a result node with its parents/backward
/// closure when recording applies.
Tensor make_node(Shape dims, std::vector<double> data,
                 std::vector<Tensor> parents, BackwardFn fn);
}  // namespace detail

}  // namespace cgfr
