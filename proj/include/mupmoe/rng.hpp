#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "mupmoe/tensor.hpp"

namespace mupmoe {

/// 64-bit FNV-1a. Stable across platforms; used for stream labels and config
/// digests.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);

/// Independent random stream keyed by (seed, label). Draws depend only on the
/// key, never on how many other streams were used before.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string label);

    std::uint64_t seed() const { return seed_; }
    const std::string& label() const { return label_; }

    double normal();
    double uniform();
    std::uint64_t next_u64() { return engine_(); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::string label_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// i.i.d. N(0, variance) entries. Throws std::invalid_argument on negative
/// variance.
DiffTensor init_normal(const Shape& shape, double variance, RngStream& rng,
                       bool requires_grad = true);

}  // namespace mupmoe
