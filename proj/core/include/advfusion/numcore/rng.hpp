// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "advfusion/numcore/tensor.hpp"

namespace advfusion::numcore {

/// Seeded generator for all initialization and shuffling.
///
/// The engine is std::mt19937_64, whose output sequence the standard fixes.
/// Uniforms take the top 53 bits and normals use the Box-Muller transform,
/// so draws are identical across standard libraries (the std distributions
/// are implementation-defined and are deliberately not used here).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal(double mean = 0.0, double stddev = 1.0);
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

    Tensor normal_tensor(Shape shape, double stddev, bool requires_grad = false);
    Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false);

    /// Independent stream derived from this seed and a label.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t label);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace advfusion::numcore
