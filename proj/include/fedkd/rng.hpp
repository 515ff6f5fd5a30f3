#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fedkd/matrix.hpp"

namespace fedkd {

// Seeded deterministic PRNG. Raw engine output is converted to doubles
// in-library (instead of std distributions) so value streams are identical
// across standard-library implementations. One instance per worker; never
// shared.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal via Box-Muller; pairs are cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) {
            x = engine_();
        }
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_int(i)]);
        }
    }

    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                m(r, c) = normal();
            }
        }
        return m;
    }

    Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                m(r, c) = uniform(lo, hi);
            }
        }
        return m;
    }

    // Independent child stream; derived from the original seed, not the
    // engine state, so derivation does not depend on consumption order.
    Rng derive(std::uint64_t stream) const {
        std::uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
        // splitmix64 finalizer
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        x = x ^ (x >> 31);
        return Rng(x);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace fedkd
