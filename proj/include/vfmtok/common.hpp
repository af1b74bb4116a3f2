#pragma once

// Shared plumbing: error types, the project RNG, shape helpers.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vfmtok {

// Contract violations (bad shapes, bad configs, malformed files). CLI exit code 1.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failures (non-finite losses, degenerate statistics). CLI exit code 2.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

// Counter-based deterministic PRNG.
//
// draw i of a state (seed, counter) is splitmix64(seed + (counter+1) * 0x9E3779B97F4A7C15),
// after which counter increments. Identical (seed, draw sequence) gives identical
// values on every platform; the mixer is pure 64-bit integer arithmetic.
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;

    explicit RngState(uint64_t s = 0) : seed(s) {}

    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() {
        ++counter;
        return mix(seed + counter * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Box-Muller, two uniform draws per value (no cached spare, keeps state minimal).
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n) by 128-bit multiply-shift.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Derive an independent child stream (e.g. one per image).
    RngState fork(uint64_t stream) const {
        RngState child(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL)));
        return child;
    }
};

// Fisher-Yates with the project RNG; deterministic and platform-independent.
template <typename T>
void shuffle(std::vector<T>& v, RngState& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace vfmtok
