#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgfr {

// Error taxonomy. Shape/contract violations are programming errors at call
// sites; input/config/io errors come from user-supplied data.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Thrown by batch_norm/layer_norm when there is nothing to normalize over.
struct DegenerateStatsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& dims);
std::int64_t shape_numel(const Shape& dims);

// Deterministic RNG. Wraps a splitmix64-seeded xoshiro-style stream with
// hand-rolled uniform/normal mappings so that draws are bit-stable across
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    // Standard normal via Box-Muller (pairs cached).
    double normal();
    // Uniform integer in [0, n).
    int uniform_int(int n);
    bool bernoulli(double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; forking does not disturb this stream.
    Rng fork(std::uint64_t salt) const;

private:
    std::uint64_t state_[2];
    std::uint64_t seed_;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

// Worker thread cap: min(hardware, CGFR_THREADS when set). Always >= 1.
int worker_threads();

// Runs fn(i) for i in [0, n). Parallel over worker_threads(); each index is
// executed exactly once, so writes to disjoint slots need no locking.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace cgfr
