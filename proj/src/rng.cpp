#include "mupmoe/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mupmoe {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)) {
    const std::uint64_t key = splitmix64(seed_ ^ fnv1a64(label_));
    std::seed_seq seq{static_cast<std::uint32_t>(key),
                      static_cast<std::uint32_t>(key >> 32),
                      static_cast<std::uint32_t>(seed_),
                      static_cast<std::uint32_t>(seed_ >> 32)};
    engine_.seed(seq);
}

double RngStream::normal() { return normal_(engine_); }

double RngStream::uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

DiffTensor init_normal(const Shape& shape, double variance, RngStream& rng,
                       bool requires_grad) {
    if (!(variance >= 0.0) || !std::isfinite(variance)) {
        throw std::invalid_argument("init_normal: variance must be finite and >= 0, got " +
                                    std::to_string(variance));
    }
    std::vector<double> values(shape_size(shape), 0.0);
    if (variance > 0.0) {
        const double sd = std::sqrt(variance);
        for (double& v : values) v = sd * rng.normal();
    }
    return requires_grad ? DiffTensor::variable(shape, std::move(values))
                         : DiffTensor::constant(shape, std::move(values));
}

}  // namespace mupmoe
