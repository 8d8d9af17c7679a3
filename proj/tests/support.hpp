#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mupmoe/tensor.hpp"

namespace testing_support {

using mupmoe::DiffTensor;

inline std::vector<double> randn(std::size_t n, std::mt19937_64& g, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(g);
    return v;
}

/// Random values kept at least `gap` away from zero (relu kinks).
inline std::vector<double> randn_away(std::size_t n, std::mt19937_64& g, double gap = 0.05) {
    auto v = randn(n, g);
    for (auto& x : v)
        if (std::abs(x) < gap) x = x < 0 ? x - gap : x + gap;
    return v;
}

/// Scalar <out, R> for a fixed random R, so every output entry is exercised.
inline DiffTensor project(const DiffTensor& out, const std::vector<double>& r) {
    DiffTensor flat = mupmoe::reshape(out, {1, out.size()});
    DiffTensor rr = DiffTensor::constant({out.size(), 1}, r);
    return mupmoe::sum(mupmoe::matmul(flat, rr));
}

/// Largest |analytic - numeric| over an input, divided by the largest
/// |numeric| entry of that input (floored at 1e-8). Central differences.
inline double fd_max_rel_error(std::vector<DiffTensor> inputs,
                               const std::function<DiffTensor()>& loss, double h = 1e-6) {
    for (auto& t : inputs) t.clear_grad();
    mupmoe::backward(loss());
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) analytic.push_back(t.grad_or_zero());
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto vals = inputs[k].mutable_values();
        std::vector<double> numeric(vals.size());
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            auto central = [&](double step) {
                vals[i] = orig + step;
                const double fp = loss().item();
                vals[i] = orig - step;
                const double fm = loss().item();
                vals[i] = orig;
                return (fp - fm) / (2 * step);
            };
            // a relu kink inside +-h shows up as disagreement with the half step;
            // shrink until the difference quotient settles
            double step = h, d = central(step);
            while (step > 1e-7) {
                const double half = central(step / 2);
                if (std::abs(half - d) <= 1e-6 * std::abs(d) + 1e-9) break;
                step /= 2;
                d = half;
            }
            numeric[i] = d;
        }
        double scale = 1e-8, err = 0.0;
        for (std::size_t i = 0; i < numeric.size(); ++i) {
            scale = std::max(scale, std::abs(numeric[i]));
            err = std::max(err, std::abs(numeric[i] - analytic[k][i]));
        }
        worst = std::max(worst, err / scale);
    }
    return worst;
}

}  // namespace testing_support
