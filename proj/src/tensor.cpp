#include "cgfr/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace cgfr {

namespace {

void check_dims(const Shape& dims) {
    for (int d : dims) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
    }
}

thread_local bool g_grad_mode = true;

}  // namespace

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }

Tensor Tensor::zeros(Shape dims) {
    check_dims(dims);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(dims)), 0.0);
    impl->dims = std::move(dims);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape dims, double value) {
    Tensor t = zeros(std::move(dims));
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
    return t;
}

Tensor Tensor::from_vector(Shape dims, std::vector<double> data) {
    check_dims(dims);
    if (shape_numel(dims) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match dims " + shape_str(dims));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->dims = std::move(dims);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_vector({1}, {value}); }

const Shape& Tensor::dims() const { return impl_->dims; }

int Tensor::dim(int axis) const { return impl_->dims.at(static_cast<std::size_t>(axis)); }

int Tensor::rank() const { return static_cast<int>(impl_->dims.size()); }

std::int64_t Tensor::numel() const { return impl_->numel(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::data_mut() { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
}

bool Tensor::frozen() const { return impl_->frozen; }

Tensor& Tensor::set_frozen(bool f) {
    impl_->frozen = f;
    return *this;
}

std::span<const double> Tensor::grad() const {
    impl_->ensure_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    }
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& d = impl_->dims;
    if (idx.size() != d.size()) throw ShapeError("index rank mismatch");
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= d[axis]) throw ShapeError("index out of range");
        flat = flat * d[axis] + i;
        ++axis;
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->dims = impl_->dims;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

namespace detail {

void TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void TensorImpl::accumulate(std::span<const double> g) {
    if (!requires_grad || frozen) return;
    ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

void TensorImpl::accumulate_at(std::int64_t offset, double g) {
    if (!requires_grad || frozen) return;
    ensure_grad();
    grad[static_cast<std::size_t>(offset)] += g;
}

Tensor make_node(Shape dims, std::vector<double> data,
                 std::vector<Tensor> parents, BackwardFn fn) {
    Tensor out = Tensor::from_vector(std::move(dims), std::move(data));
    bool track = false;
    if (g_grad_mode) {
        for (const Tensor& p : parents) {
            if (p.defined() && p.requires_grad()) {
                track = true;
                break;
            }
        }
    }
    if (track) {
        out.set_requires_grad(true);
        TensorImpl* impl = out.impl();
        impl->parents.reserve(parents.size());
        for (const Tensor& p : parents) {
            if (p.defined()) impl->parents.push_back(p.impl_ptr());
        }
        impl->backward_fn = std::move(fn);
    }
    return out;
}

}  // namespace detail

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward() on undefined tensor");
    if (loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got " +
                            shape_str(loss.dims()));
    }

    // Iterative post-order DFS; reverse gives a valid topological order.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> visited;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    if (loss.impl()->requires_grad) {
        stack.push_back({loss.impl(), 0});
        visited.insert(loss.impl());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            detail::TensorImpl* child = f.node->parents[f.next_child++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace cgfr
