// SPDX-License-Identifier: Apache-2.0

#include "advfusion/numcore/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace advfusion::numcore {

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(angle);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) {
        throw std::invalid_argument("Rng::below(0)");
    }
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = engine_();
    while (x >= limit) {
        x = engine_();
    }
    return static_cast<std::size_t>(x % bound);
}

Tensor Rng::normal_tensor(Shape shape, double stddev, bool requires_grad) {
    std::vector<double> values(numel(shape));
    for (auto& v : values) {
        v = normal(0.0, stddev);
    }
    return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, bool requires_grad) {
    std::vector<double> values(numel(shape));
    for (auto& v : values) {
        v = uniform(lo, hi);
    }
    return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t label) {
    // splitmix64 finalizer over the combined words.
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (label + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace advfusion::numcore
