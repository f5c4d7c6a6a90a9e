#include "cgfr/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>
#include <thread>

namespace cgfr {

std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << 'x';
        os << dims[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& dims) {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t s = seed;
    state_[0] = splitmix64(s);
    state_[1] = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    // xoroshiro128++
    std::uint64_t s0 = state_[0];
    std::uint64_t s1 = state_[1];
    std::uint64_t out = rotl(s0 + s1, 17) + s0;
    s1 ^= s0;
    state_[0] = rotl(s0, 49) ^ s1 ^ (s1 << 21);
    state_[1] = rotl(s1, 28);
    return out;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = uniform();
    double u2 = uniform();
    u1 = std::max(u1, 0x1.0p-53);
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_normal_ = true;
    return r * std::cos(a);
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw ContractError("Rng::uniform_int requires n > 0");
    // Rejection-free modulo is fine here; n is tiny relative to 2^64.
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

bool Rng::bernoulli(double p) {
    return uniform() < p;
}

Rng Rng::fork(std::uint64_t salt) const {
    std::uint64_t s = seed_ ^ (0xA0761D6478BD642Full * (salt + 1));
    return Rng(splitmix64(s));
}

int worker_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("CGFR_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    int threads = std::min<std::int64_t>(worker_threads(), n);
    if (threads <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::int64_t i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace cgfr
