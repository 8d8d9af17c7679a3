#include "mupmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mupmoe {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Softmax of `v` in place; returns log-sum-exp of the original values.
double softmax_lse(std::span<double> v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        z += x;
    }
    for (double& x : v) x /= z;
    return mx + std::log(z);
}

}  // namespace

std::string to_string(GateStyle g) {
    return g == GateStyle::TOPK_THEN_SOFTMAX ? "topk_then_softmax" : "softmax_then_topk";
}

GateStyle parse_gate_style(std::string_view s) {
    if (s == "topk_then_softmax") return GateStyle::TOPK_THEN_SOFTMAX;
    if (s == "softmax_then_topk") return GateStyle::SOFTMAX_THEN_TOPK;
    throw std::invalid_argument("unknown gate_style '" + std::string(s) +
                                "' (expected topk_then_softmax | softmax_then_topk)");
}

void MoEConfig::validate() const {
    require(width >= 1, "moe.width must be >= 1");
    require(n_experts >= 1, "moe.n_experts must be >= 1");
    require(top_k >= 1 && top_k <= n_experts,
            "moe.top_k = " + std::to_string(top_k) + " must lie in [1, n_experts = " +
                std::to_string(n_experts) + "]");
    require(d_expert >= 1, "moe.d_expert must be >= 1");
    require(granularity >= 1, "moe.granularity must be >= 1");
    require(z_loss_weight >= 0.0 && std::isfinite(z_loss_weight),
            "moe.z_loss_weight must be finite and >= 0");
    require(load_balance_weight >= 0.0 && std::isfinite(load_balance_weight),
            "moe.load_balance_weight must be finite and >= 0");
}

std::size_t MoEConfig::expert_param_count() const {
    return n_experts * (d_expert * width + width * d_expert);
}

MoEConfig baseline_moe(std::size_t width, std::size_t n_experts, std::size_t top_k) {
    MoEConfig c;
    c.width = width;
    c.n_experts = n_experts;
    c.top_k = top_k;
    c.d_expert = 4 * width;
    c.granularity = 1;
    return c;
}

MoEConfig apply_granularity(const MoEConfig& base, std::size_t g) {
    require(g >= 1, "apply_granularity: G must be >= 1, got " + std::to_string(g));
    require(base.granularity == 1, "apply_granularity: base config already has granularity " +
                                       std::to_string(base.granularity));
    require(base.d_expert % g == 0, "apply_granularity: d_expert " +
                                        std::to_string(base.d_expert) +
                                        " is not divisible by G = " + std::to_string(g));
    MoEConfig out = base;
    out.n_experts *= g;
    out.d_expert /= g;
    out.top_k *= g;
    out.granularity = g;
    return out;
}

// ---- gating ---------------------------------------------------------------

GateDecision gate(std::span<const double> router_logits, std::size_t k, GateStyle style) {
    require(k >= 1 && k <= router_logits.size(),
            "gate: k = " + std::to_string(k) + " outside [1, " +
                std::to_string(router_logits.size()) + "]");
    GateDecision d;
    d.full_probs.assign(router_logits.begin(), router_logits.end());
    softmax_lse(d.full_probs);
    const auto sel = top_k(router_logits, k);
    for (const auto& e : sel) d.indices.push_back(e.index);
    if (style == GateStyle::TOPK_THEN_SOFTMAX) {
        for (const auto& e : sel) d.weights.push_back(e.value);
        softmax_lse(d.weights);
    } else {
        for (const auto& e : sel) d.weights.push_back(d.full_probs[e.index]);
    }
    return d;
}

GateDecision GateDecisions::token(std::size_t t) const {
    GateDecision d;
    d.indices.assign(indices.begin() + static_cast<std::ptrdiff_t>(t * k),
                     indices.begin() + static_cast<std::ptrdiff_t>((t + 1) * k));
    d.weights.assign(weights.begin() + static_cast<std::ptrdiff_t>(t * k),
                     weights.begin() + static_cast<std::ptrdiff_t>((t + 1) * k));
    d.full_probs.assign(full_probs.begin() + static_cast<std::ptrdiff_t>(t * n_experts),
                        full_probs.begin() + static_cast<std::ptrdiff_t>((t + 1) * n_experts));
    return d;
}

DiffTensor gate_weights(const DiffTensor& router_logits, std::size_t k, GateStyle style,
                        GateDecisions* decisions) {
    const std::size_t T = router_logits.rows(), E = router_logits.cols();
    require(k >= 1 && k <= E,
            "gate: k = " + std::to_string(k) + " outside [1, " + std::to_string(E) + "]");
    GateDecisions dec;
    dec.tokens = T;
    dec.n_experts = E;
    dec.k = k;
    dec.indices.reserve(T * k);
    dec.weights.reserve(T * k);
    dec.full_probs.reserve(T * E);
    std::vector<double> dense(T * E, 0.0);
    const auto lv = router_logits.values();
    for (std::size_t t = 0; t < T; ++t) {
        auto g = gate(lv.subspan(t * E, E), k, style);
        for (std::size_t i = 0; i < k; ++i) {
            dense[t * E + g.indices[i]] = g.weights[i];
            dec.indices.push_back(g.indices[i]);
            dec.weights.push_back(g.weights[i]);
        }
        dec.full_probs.insert(dec.full_probs.end(), g.full_probs.begin(), g.full_probs.end());
    }
    auto probs = std::make_shared<std::vector<double>>(dec.full_probs);
    auto sel = std::make_shared<std::vector<std::size_t>>(dec.indices);
    auto out = detail::make_result(
        Shape{T, E}, std::move(dense), {router_logits},
        [probs, sel, T, E, k, style](detail::Node& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t t = 0; t < T; ++t) {
                const double* w = self.value.data() + t * E;
                const double* gw = self.grad.data() + t * E;
                const std::size_t* s = sel->data() + t * k;
                double* gl = g.data() + t * E;
                double dot = 0.0;
                if (style == GateStyle::TOPK_THEN_SOFTMAX) {
                    // Softmax restricted to the selected set.
                    for (std::size_t i = 0; i < k; ++i) dot += w[s[i]] * gw[s[i]];
                    for (std::size_t i = 0; i < k; ++i) gl[s[i]] += w[s[i]] * (gw[s[i]] - dot);
                } else {
                    // w_s = p_s on the selection; full softmax Jacobian.
                    const double* p = probs->data() + t * E;
                    for (std::size_t i = 0; i < k; ++i) dot += p[s[i]] * gw[s[i]];
                    for (std::size_t e = 0; e < E; ++e) gl[e] -= p[e] * dot;
                    for (std::size_t i = 0; i < k; ++i) gl[s[i]] += p[s[i]] * gw[s[i]];
                }
            }
        });
    if (decisions) *decisions = std::move(dec);
    return out;
}

// ---- weights --------------------------------------------------------------

MoEWeights MoEWeights::init(const MoEConfig& cfg, Scheme scheme, std::uint64_t seed,
                            const std::string& label_prefix, double init_scale) {
    cfg.validate();
    const auto n = static_cast<long long>(cfg.width);
    const auto d = static_cast<long long>(cfg.d_expert);
    const auto r_rule = rule_for(WeightCategory::ROUTER, scheme, n);
    const auto in_rule = rule_for(WeightCategory::EXPERT_IN, scheme, n);
    const auto out_rule = rule_for(WeightCategory::EXPERT_OUT, scheme, d);
    const double s2 = init_scale * init_scale;

    MoEWeights w;
    RngStream rr(seed, label_prefix + "/router");
    w.router = init_normal({cfg.n_experts, cfg.width}, s2 * r_rule.init_variance, rr);
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        RngStream r1(seed, label_prefix + "/expert" + std::to_string(e) + "/E1");
        RngStream r2(seed, label_prefix + "/expert" + std::to_string(e) + "/E2");
        w.expert_in.push_back(init_normal({cfg.d_expert, cfg.width}, s2 * in_rule.init_variance, r1));
        w.expert_out.push_back(
            init_normal({cfg.width, cfg.d_expert}, s2 * out_rule.init_variance, r2));
    }
    w.router_multiplier = r_rule.forward_multiplier;
    w.expert_in_multiplier = in_rule.forward_multiplier;
    w.expert_out_multiplier = out_rule.forward_multiplier;
    return w;
}

// ---- forward --------------------------------------------------------------

DiffTensor combine_experts(const DiffTensor& gates, const std::vector<ExpertTrace>& experts,
                           std::size_t width) {
    const std::size_t T = gates.rows(), E = gates.cols();
    std::vector<double> y(T * width, 0.0);
    std::vector<DiffTensor> parents{gates};
    const auto gv = gates.values();
    // Fixed accumulation order: experts ascending, so results do not depend on
    // how the expert outputs were computed.
    for (const auto& ex : experts) {
        require(ex.output.rows() == ex.rows.size() && ex.output.cols() == width,
                "combine_experts: expert output shape mismatch");
        const auto ov = ex.output.values();
        for (std::size_t i = 0; i < ex.rows.size(); ++i) {
            const std::size_t t = ex.rows[i];
            const double w = gv[t * E + ex.expert];
            for (std::size_t j = 0; j < width; ++j) y[t * width + j] += w * ov[i * width + j];
        }
        parents.push_back(ex.output);
    }
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> routing;
    routing.reserve(experts.size());
    for (const auto& ex : experts) routing.emplace_back(ex.expert, ex.rows);
    return detail::make_result(
        Shape{T, width}, std::move(y), std::move(parents),
        [routing = std::move(routing), E, width](detail::Node& self) {
            auto& G = *self.parents[0];
            double* gg = G.requires_grad ? G.ensure_grad().data() : nullptr;
            for (std::size_t x = 0; x < routing.size(); ++x) {
                auto& O = *self.parents[x + 1];
                const auto& [e, rows] = routing[x];
                double* go = O.requires_grad ? O.ensure_grad().data() : nullptr;
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    const std::size_t t = rows[i];
                    const double* dy = self.grad.data() + t * width;
                    if (go) {
                        const double w = G.value[t * E + e];
                        for (std::size_t j = 0; j < width; ++j) go[i * width + j] += w * dy[j];
                    }
                    if (gg) {
                        double dot = 0.0;
                        const double* o = O.value.data() + i * width;
                        for (std::size_t j = 0; j < width; ++j) dot += o[j] * dy[j];
                        gg[t * E + e] += dot;
                    }
                }
            }
        });
}

MoEOutput moe_forward(const MoEWeights& weights, const DiffTensor& x, const MoEConfig& cfg) {
    cfg.validate();
    require(x.defined() && x.cols() == cfg.width,
            "moe_forward: input width " + (x.defined() ? std::to_string(x.cols()) : "?") +
                " does not match moe.width " + std::to_string(cfg.width));
    require(weights.router.defined() && weights.router.shape() == Shape{cfg.n_experts, cfg.width},
            "moe_forward: router shape does not match config");
    require(weights.expert_in.size() == cfg.n_experts &&
                weights.expert_out.size() == cfg.n_experts,
            "moe_forward: expert count does not match config");
    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        require(weights.expert_in[e].shape() == Shape{cfg.d_expert, cfg.width} &&
                    weights.expert_out[e].shape() == Shape{cfg.width, cfg.d_expert},
                "moe_forward: expert " + std::to_string(e) + " shape does not match config");
    }

    const std::size_t T = x.rows();
    DiffTensor x2 = x.ndim() == 2 ? x : reshape(x, {T, cfg.width});

    MoEOutput out;
    out.router_logits = linear(x2, weights.router);
    if (weights.router_multiplier != 1.0)
        out.router_logits = scale(out.router_logits, weights.router_multiplier);
    out.gates = gate_weights(out.router_logits, cfg.top_k, cfg.gate_style, &out.decisions);
    out.full_probs = softmax_rows(out.router_logits);

    std::vector<std::vector<std::size_t>> routed(cfg.n_experts);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < cfg.top_k; ++i)
            routed[out.decisions.indices[t * cfg.top_k + i]].push_back(t);

    for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        if (routed[e].empty()) continue;
        ExpertTrace tr;
        tr.expert = e;
        tr.rows = std::move(routed[e]);
        auto xe = gather_rows(x2, tr.rows);
        tr.pre_activation = linear_rowwise(xe, weights.expert_in[e]);
        if (weights.expert_in_multiplier != 1.0)
            tr.pre_activation = scale(tr.pre_activation, weights.expert_in_multiplier);
        tr.output = linear_rowwise(relu(tr.pre_activation), weights.expert_out[e]);
        if (weights.expert_out_multiplier != 1.0)
            tr.output = scale(tr.output, weights.expert_out_multiplier);
        out.experts.push_back(std::move(tr));
    }

    out.y = combine_experts(out.gates, out.experts, cfg.width);
    if (x.ndim() != 2) out.y = reshape(out.y, x.shape());

    std::vector<std::size_t> top1(T);
    for (std::size_t t = 0; t < T; ++t) top1[t] = out.decisions.top1(t);
    out.z_loss = z_loss(out.router_logits);
    out.load_balance_loss = load_balance_loss(out.full_probs, top1);
    return out;
}

// ---- auxiliary losses -----------------------------------------------------

DiffTensor load_balance_loss(const DiffTensor& full_probs, std::span<const std::size_t> top1) {
    const std::size_t T = full_probs.rows(), E = full_probs.cols();
    require(T > 0, "load_balance_loss: empty batch");
    require(top1.size() == T, "load_balance_loss: " + std::to_string(top1.size()) +
                                  " routing decisions for " + std::to_string(T) + " tokens");
    std::vector<double> frac(E, 0.0);
    for (auto e : top1) {
        require(e < E, "load_balance_loss: expert index out of range");
        frac[e] += 1.0;
    }
    for (double& f : frac) f /= static_cast<double>(T);
    // loss = sum_{t,e} coeff_e * p_{t,e}, coeff_e = E * f_e / T
    std::vector<double> coeff(E);
    for (std::size_t e = 0; e < E; ++e)
        coeff[e] = static_cast<double>(E) * frac[e] / static_cast<double>(T);
    double loss = 0.0;
    const auto pv = full_probs.values();
    for (std::size_t e = 0; e < E; ++e) {
        double col = 0.0;
        for (std::size_t t = 0; t < T; ++t) col += pv[t * E + e];
        loss += coeff[e] * col;
    }
    return detail::make_result(Shape{1}, {loss}, {full_probs},
                               [coeff = std::move(coeff), T, E](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t e = 0; e < E; ++e) g[t * E + e] += self.grad[0] * coeff[e];
    });
}

DiffTensor z_loss(const DiffTensor& router_logits) {
    const std::size_t T = router_logits.rows(), E = router_logits.cols();
    require(T > 0 && E > 0, "z_loss: empty batch");
    auto probs = std::make_shared<std::vector<double>>(router_logits.values().begin(),
                                                       router_logits.values().end());
    auto lse = std::make_shared<std::vector<double>>(T);
    double loss = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        (*lse)[t] = softmax_lse(std::span<double>(probs->data() + t * E, E));
        loss += (*lse)[t] * (*lse)[t];
    }
    loss /= static_cast<double>(T);
    return detail::make_result(Shape{1}, {loss}, {router_logits},
                               [probs, lse, T, E](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const double s = 2.0 * self.grad[0] / static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t e = 0; e < E; ++e)
                g[t * E + e] += s * (*lse)[t] * (*probs)[t * E + e];
    });
}

}  // namespace mupmoe
