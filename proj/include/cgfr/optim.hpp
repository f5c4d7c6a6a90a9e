#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cgfr/tensor.hpp"

namespace cgfr {

/// Named trainable tensor. Frozen parameters receive zero gradient and are
/// never touched by optimizer_step.
struct Parameter {
    std::string name;
    Tensor value;
    bool frozen = false;
};

/// Ordered registry of parameters (and non-trainable buffers such as batch
/// norm running statistics). Names are unique; insertion order is preserved
/// so checkpoints are byte-stable.
class ParamStore {
public:
    /// Registers a parameter; the returned handle aliases the stored value.
    Tensor add(const std::string& name, Tensor init, bool frozen = false);
    /// Registers a buffer: saved in checkpoints, ignored by optimizers.
    Tensor add_buffer(const std::string& name, Tensor init);

    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Tensor* find_buffer(const std::string& name);

    std::vector<Parameter*> all();
    std::vector<Parameter*> with_prefix(const std::string& prefix);
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

    void zero_grads();

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::size_t> buffer_index_;
};

enum class OptimKind { adam, adamw };

/// Adam/AdamW state. Moment buffers are created lazily on the first step of
/// each parameter and always match its shape.
struct OptimizerState {
    OptimKind kind = OptimKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t step_count = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// One optimizer step over the given parameters using their accumulated
/// gradients. AdamW applies decoupled decay lr*wd*theta before the Adam
/// update. Frozen parameters are skipped entirely.
void optimizer_step(OptimizerState& state, const std::vector<Parameter*>& params, double lr);

/// Variant taking an explicit gradient for a single parameter; throws
/// ShapeError when the gradient length does not match.
void optimizer_step(OptimizerState& state, Parameter& param,
                    std::span<const double> grad, double lr);

/// Linear warmup from lr_init to lr_peak over warmup_iters, then cosine decay
/// to lr_final at total_iters.
struct LrSchedule {
    double lr_init = 1e-5;
    double lr_peak = 1e-4;
    double lr_final = 1e-5;
    std::int64_t warmup_iters = 2000;
    std::int64_t total_iters = 20000;
};

double lr_at(const LrSchedule& schedule, std::int64_t iter);

/// Uniform init scaled by 1/sqrt(fan_in); the project-wide weight scheme.
Tensor uniform_init(Shape dims, int fan_in, Rng& rng);

}  // namespace cgfr
