#include "cgfr/optim.hpp"

#include <cmath>

namespace cgfr {

Tensor ParamStore::add(const std::string& name, Tensor init, bool frozen) {
    if (index_.count(name) || buffer_index_.count(name)) {
        throw ContractError("ParamStore: duplicate name '" + name + "'");
    }
    init.set_requires_grad(true);
    init.set_frozen(frozen);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = init;
    p->frozen = frozen;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return init;
}

Tensor ParamStore::add_buffer(const std::string& name, Tensor init) {
    if (index_.count(name) || buffer_index_.count(name)) {
        throw ContractError("ParamStore: duplicate name '" + name + "'");
    }
    buffer_index_[name] = buffers_.size();
    buffers_.emplace_back(name, init);
    return init;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

Tensor* ParamStore::find_buffer(const std::string& name) {
    auto it = buffer_index_.find(name);
    return it == buffer_index_.end() ? nullptr : &buffers_[it->second].second;
}

std::vector<Parameter*> ParamStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<Parameter*> ParamStore::with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
        if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
    }
    return out;
}

void ParamStore::zero_grads() {
    for (auto& p : params_) p->value.zero_grad();
}

namespace {

void adam_update(OptimizerState& state, Parameter& param, const double* grad,
                 std::size_t n, double lr) {
    if (state.kind == OptimKind::adamw && state.weight_decay > 0.0) {
        double* theta = param.value.data_mut().data();
        double decay = lr * state.weight_decay;
        for (std::size_t i = 0; i < n; ++i) theta[i] -= decay * theta[i];
    }
    auto& m = state.m[param.name];
    auto& v = state.v[param.name];
    if (m.empty()) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    } else if (m.size() != n) {
        throw ShapeError("optimizer_step: moment buffer size mismatch for '" + param.name + "'");
    }
    double b1 = state.beta1, b2 = state.beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    double* theta = param.value.data_mut().data();
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

}  // namespace

void optimizer_step(OptimizerState& state, const std::vector<Parameter*>& params, double lr) {
    state.step_count += 1;
    for (Parameter* p : params) {
        if (p->frozen) continue;
        std::span<const double> g = p->value.grad();
        adam_update(state, *p, g.data(), g.size(), lr);
    }
}

void optimizer_step(OptimizerState& state, Parameter& param,
                    std::span<const double> grad, double lr) {
    if (static_cast<std::int64_t>(grad.size()) != param.value.numel()) {
        throw ShapeError("optimizer_step: gradient length " + std::to_string(grad.size()) +
                         " does not match parameter " + shape_str(param.value.dims()));
    }
    state.step_count += 1;
    if (param.frozen) return;
    adam_update(state, param, grad.data(), grad.size(), lr);
}

double lr_at(const LrSchedule& s, std::int64_t iter) {
    if (iter < 0 || iter > s.total_iters) {
        throw ContractError("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(s.total_iters) + "]");
    }
    if (iter <= s.warmup_iters) {
        double t = static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
        return s.lr_init + (s.lr_peak - s.lr_init) * t;
    }
    double t = static_cast<double>(iter - s.warmup_iters) /
               static_cast<double>(s.total_iters - s.warmup_iters);
    return s.lr_final + (s.lr_peak - s.lr_final) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

Tensor uniform_init(Shape dims, int fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::int64_t n = shape_numel(dims);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_vector(std::move(dims), std::move(data));
}

}  // namespace cgfr
