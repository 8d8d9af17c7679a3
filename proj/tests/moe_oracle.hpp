#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "mupmoe/moe.hpp"

namespace testing_support {

using namespace mupmoe;

struct OracleResult {
    std::vector<double> y;                       // T x n
    std::vector<double> d_router;                // E x n
    std::vector<std::vector<double>> d_in, d_out;
    std::vector<double> d_x;                     // T x n
    double loss = 0.0;
};

inline std::vector<double> values(const DiffTensor& t) { return {t.values().begin(), t.values().end()}; }

// Every expert is evaluated on every token; experts outside the chosen set get
// gate 0. Loss = <y, R> + w_z * z + w_lb * lb, differentiated by hand.
inline OracleResult dense_oracle(const MoEWeights& w, const std::vector<double>& x,
                          const std::vector<double>& proj, const MoEConfig& c, std::size_t T) {
    const std::size_t n = c.width, E = c.n_experts, D = c.d_expert, k = c.top_k;
    const auto R = values(w.router);
    std::vector<std::vector<double>> W1(E), W2(E);
    for (std::size_t e = 0; e < E; ++e) {
        W1[e] = values(w.expert_in[e]);
        W2[e] = values(w.expert_out[e]);
    }

    OracleResult res;
    res.y.assign(T * n, 0.0);
    res.d_router.assign(E * n, 0.0);
    res.d_in.assign(E, std::vector<double>(D * n, 0.0));
    res.d_out.assign(E, std::vector<double>(n * D, 0.0));
    res.d_x.assign(T * n, 0.0);

    std::vector<double> r(T * E), p(T * E), lse(T), gates(T * E, 0.0);
    std::vector<std::size_t> top1(T);
    std::vector<std::vector<std::size_t>> chosen(T);
    for (std::size_t t = 0; t < T; ++t) {
        double mx = -INFINITY;
        for (std::size_t e = 0; e < E; ++e) {
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) s += R[e * n + j] * x[t * n + j];
            r[t * E + e] = w.router_multiplier * s;
            mx = std::max(mx, r[t * E + e]);
        }
        double z = 0;
        for (std::size_t e = 0; e < E; ++e) z += std::exp(r[t * E + e] - mx);
        lse[t] = mx + std::log(z);
        for (std::size_t e = 0; e < E; ++e) p[t * E + e] = std::exp(r[t * E + e] - lse[t]);

        std::vector<std::size_t> order(E);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](auto a, auto b) { return r[t * E + a] > r[t * E + b]; });
        chosen[t].assign(order.begin(), order.begin() + long(k));
        top1[t] = order[0];
        if (c.gate_style == GateStyle::SOFTMAX_THEN_TOPK) {
            for (auto e : chosen[t]) gates[t * E + e] = p[t * E + e];
        } else {
            double zz = 0;
            for (auto e : chosen[t]) zz += std::exp(r[t * E + e] - mx);
            for (auto e : chosen[t]) gates[t * E + e] = std::exp(r[t * E + e] - mx) / zz;
        }
    }

    // Expert evaluations for all (token, expert) pairs.
    std::vector<double> h(T * E * D), o(T * E * n);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t e = 0; e < E; ++e) {
            for (std::size_t a = 0; a < D; ++a) {
                double s = 0;
                for (std::size_t j = 0; j < n; ++j) s += W1[e][a * n + j] * x[t * n + j];
                h[(t * E + e) * D + a] = w.expert_in_multiplier * s;
            }
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0;
                for (std::size_t a = 0; a < D; ++a)
                    s += W2[e][i * D + a] * std::max(0.0, h[(t * E + e) * D + a]);
                o[(t * E + e) * n + i] = w.expert_out_multiplier * s;
            }
            for (std::size_t i = 0; i < n; ++i)
                res.y[t * n + i] += gates[t * E + e] * o[(t * E + e) * n + i];
        }

    std::vector<double> f(E, 0.0), P(E, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        f[top1[t]] += 1.0 / double(T);
        for (std::size_t e = 0; e < E; ++e) P[e] += p[t * E + e] / double(T);
    }
    double zl = 0, lb = 0, dot = 0;
    for (std::size_t t = 0; t < T; ++t) zl += lse[t] * lse[t] / double(T);
    for (std::size_t e = 0; e < E; ++e) lb += double(E) * f[e] * P[e];
    for (std::size_t i = 0; i < T * n; ++i) dot += res.y[i] * proj[i];
    res.loss = dot + c.z_loss_weight * zl + c.load_balance_weight * lb;

    // Backward.
    std::vector<double> dr(T * E, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> dg(E, 0.0);
        for (auto e : chosen[t])
            for (std::size_t i = 0; i < n; ++i) dg[e] += proj[t * n + i] * o[(t * E + e) * n + i];
        if (c.gate_style == GateStyle::SOFTMAX_THEN_TOPK) {
            double pd = 0;
            for (auto e : chosen[t]) pd += p[t * E + e] * dg[e];
            for (std::size_t e = 0; e < E; ++e) dr[t * E + e] += p[t * E + e] * (dg[e] - pd);
        } else {
            double gd = 0;
            for (auto e : chosen[t]) gd += gates[t * E + e] * dg[e];
            for (auto e : chosen[t]) dr[t * E + e] += gates[t * E + e] * (dg[e] - gd);
        }
        // Auxiliary losses through the full softmax.
        std::vector<double> dp(E);
        double pdp = 0;
        for (std::size_t e = 0; e < E; ++e) {
            dp[e] = c.load_balance_weight * double(E) * f[e] / double(T);
            pdp += p[t * E + e] * dp[e];
        }
        for (std::size_t e = 0; e < E; ++e) {
            dr[t * E + e] += p[t * E + e] * (dp[e] - pdp);
            dr[t * E + e] += c.z_loss_weight * 2.0 * lse[t] / double(T) * p[t * E + e];
        }
    }
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t e = 0; e < E; ++e)
            for (std::size_t j = 0; j < n; ++j) {
                res.d_router[e * n + j] += w.router_multiplier * dr[t * E + e] * x[t * n + j];
                res.d_x[t * n + j] += w.router_multiplier * dr[t * E + e] * R[e * n + j];
            }
    for (std::size_t t = 0; t < T; ++t)
        for (auto e : chosen[t]) {
            const double g = gates[t * E + e];
            std::vector<double> dh(D, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double dout = g * proj[t * n + i] * w.expert_out_multiplier;
                for (std::size_t a = 0; a < D; ++a) {
                    const double hv = h[(t * E + e) * D + a];
                    res.d_out[e][i * D + a] += dout * std::max(0.0, hv);
                    if (hv > 0) dh[a] += dout * W2[e][i * D + a];
                }
            }
            for (std::size_t a = 0; a < D; ++a)
                for (std::size_t j = 0; j < n; ++j) {
                    res.d_in[e][a * n + j] += w.expert_in_multiplier * dh[a] * x[t * n + j];
                    res.d_x[t * n + j] += w.expert_in_multiplier * dh[a] * W1[e][a * n + j];
                }
        }
    return res;
}

inline double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}


/// One randomized sparse-vs-dense comparison (n <= 8, up to 4 experts, k <= 2).
/// Returns the largest absolute difference over outputs, loss and gradients.
template <typename Rng>
double oracle_trial(Rng& g, GateStyle style, std::size_t max_k) {
    std::uniform_int_distribution<std::size_t> width(1, 8), experts(1, 4), dexp(1, 6), tokens(1, 6);
    std::uniform_real_distribution<double> mult(0.2, 1.5);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto randv = [&](std::size_t k) {
        std::vector<double> v(k);
        for (auto& x : v) x = nd(g);
        return v;
    };
    MoEConfig c;
    c.width = width(g);
    c.n_experts = experts(g);
    c.top_k = std::min(c.n_experts, max_k);
    c.d_expert = dexp(g);
    c.gate_style = style;
    const std::size_t T = tokens(g), n = c.width;
    MoEWeights w;
    w.router = DiffTensor::variable({c.n_experts, n}, randv(c.n_experts * n));
    for (std::size_t e = 0; e < c.n_experts; ++e) {
        w.expert_in.push_back(DiffTensor::variable({c.d_expert, n}, randv(c.d_expert * n)));
        w.expert_out.push_back(DiffTensor::variable({n, c.d_expert}, randv(n * c.d_expert)));
    }
    w.router_multiplier = mult(g);
    w.expert_in_multiplier = mult(g);
    w.expert_out_multiplier = mult(g);
    const auto xv = randv(T * n), proj = randv(T * n);
    auto x = DiffTensor::variable({T, n}, xv);

    auto out = moe_forward(w, x, c);
    auto flat = reshape(out.y, {1, T * n});
    auto dot = sum(matmul(flat, DiffTensor::constant({T * n, 1}, proj)));
    auto loss = add(add(dot, scale(out.z_loss, c.z_loss_weight)),
                    scale(out.load_balance_loss, c.load_balance_weight));
    backward(loss);

    const auto want = dense_oracle(w, xv, proj, c, T);
    double worst = std::max(max_abs_diff(out.y.values(), want.y), std::abs(loss.item() - want.loss));
    worst = std::max(worst, max_abs_diff(w.router.grad_or_zero(), want.d_router));
    worst = std::max(worst, max_abs_diff(x.grad_or_zero(), want.d_x));
    for (std::size_t e = 0; e < c.n_experts; ++e) {
        worst = std::max(worst, max_abs_diff(w.expert_in[e].grad_or_zero(), want.d_in[e]));
        worst = std::max(worst, max_abs_diff(w.expert_out[e].grad_or_zero(), want.d_out[e]));
    }
    return worst;
}

}  // namespace testing_support
