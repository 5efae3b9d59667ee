#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace lider {

// Deterministic random stream. All distributions are implemented by hand on
// top of a raw 64-bit generator so that results are identical across
// standard-library implementations (std::normal_distribution and friends are
// not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // splitmix burn-in so that nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    // Derive an independent named stream from a master seed. Streams with
    // distinct ids never share draws, which keeps e.g. power-iteration
    // randomness out of the data-order randomness.
    static Rng stream(std::uint64_t master_seed, std::uint64_t stream_id) {
        return Rng(mix(master_seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1)));
    }

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n). Rejection sampling, no modulo bias.
    std::size_t uniform_index(std::size_t n) {
        const std::uint64_t bound = n;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return static_cast<std::size_t>(x % bound);
    }

    // Standard normal via Box-Muller. No cached spare: two uniforms per
    // draw, so the draw count per call is fixed.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Uniform direction on the unit sphere in `dim` dimensions.
    std::vector<double> unit_vector(std::size_t dim) {
        std::vector<double> v(dim);
        double norm_sq = 0.0;
        for (double& x : v) {
            x = normal();
            norm_sq += x * x;
        }
        if (norm_sq == 0.0) {  // astronomically unlikely; keep it well-defined
            v[0] = 1.0;
            return v;
        }
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (double& x : v) x *= inv;
        return v;
    }

    // Fisher-Yates shuffle of index vector [0, n).
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = uniform_index(i);
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

}  // namespace lider
