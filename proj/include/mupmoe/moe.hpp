#pragma once

// Switch-style mixture-of-experts feed-forward layer.
//
//   E_e(x)  = E2_e ReLU(E1_e x)
//   gates   = softmax(top-k(Rx))          (TOPK_THEN_SOFTMAX, default)
//           | top-k(softmax(Rx))          (SOFTMAX_THEN_TOPK, Switch style)
//   MoE(x)  = sum over selected e of gate_e * E_e(x)
//
// Every routed token is processed; there is no capacity limit.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mupmoe/param_rules.hpp"
#include "mupmoe/rng.hpp"
#include "mupmoe/tensor.hpp"

namespace mupmoe {

enum class GateStyle { TOPK_THEN_SOFTMAX, SOFTMAX_THEN_TOPK };

std::string to_string(GateStyle g);
GateStyle parse_gate_style(std::string_view s);

struct MoEConfig {
    std::size_t width = 0;
    std::size_t n_experts = 8;
    std::size_t top_k = 1;
    std::size_t d_expert = 0;
    std::size_t granularity = 1;
    GateStyle gate_style = GateStyle::TOPK_THEN_SOFTMAX;
    double z_loss_weight = 0.001;
    double load_balance_weight = 0.01;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    /// n_experts * (d_expert * width + width * d_expert).
    std::size_t expert_param_count() const;
    bool operator==(const MoEConfig&) const = default;
};

/// G = 1 baseline: d_expert = 4 * width.
MoEConfig baseline_moe(std::size_t width, std::size_t n_experts = 8, std::size_t top_k = 1);

/// Fine-grained transform: experts x G, expert hidden / G, top-k x G.
/// `base` must have granularity 1 and d_expert divisible by G.
MoEConfig apply_granularity(const MoEConfig& base, std::size_t g);

/// Routing for a single token.
struct GateDecision {
    std::vector<std::size_t> indices;
    std::vector<double> weights;
    std::vector<double> full_probs;
};

GateDecision gate(std::span<const double> router_logits, std::size_t k, GateStyle style);

/// Routing for a batch; row t of each array belongs to token t.
struct GateDecisions {
    std::size_t tokens = 0;
    std::size_t n_experts = 0;
    std::size_t k = 0;
    std::vector<std::size_t> indices;  // tokens x k
    std::vector<double> weights;       // tokens x k
    std::vector<double> full_probs;    // tokens x n_experts

    GateDecision token(std::size_t t) const;
    std::size_t top1(std::size_t t) const { return indices[t * k]; }
};

/// Differentiable gate. Returns a dense [tokens x n_experts] weight matrix that
/// is zero outside the selected experts.
DiffTensor gate_weights(const DiffTensor& router_logits, std::size_t k, GateStyle style,
                        GateDecisions* decisions = nullptr);

struct MoEWeights {
    DiffTensor router;                   // [n_experts x width], ROUTER
    std::vector<DiffTensor> expert_in;   // n_experts of [d_expert x width], EXPERT_IN
    std::vector<DiffTensor> expert_out;  // n_experts of [width x d_expert], EXPERT_OUT
    double router_multiplier = 1.0;
    double expert_in_multiplier = 1.0;
    double expert_out_multiplier = 1.0;

    static MoEWeights init(const MoEConfig& cfg, Scheme scheme, std::uint64_t seed,
                           const std::string& label_prefix, double init_scale = 1.0);
};

/// Per-expert intermediate tensors kept for gradient inspection.
struct ExpertTrace {
    std::size_t expert = 0;
    std::vector<std::size_t> rows;  // token rows routed to this expert
    DiffTensor pre_activation;      // E1 x          [rows x d_expert]
    DiffTensor output;              // E2 ReLU(E1 x) [rows x width], before gating
};

struct MoEOutput {
    DiffTensor y;              // [tokens x width]
    DiffTensor router_logits;  // multiplier applied, [tokens x n_experts]
    DiffTensor gates;          // dense gate weights, [tokens x n_experts]
    DiffTensor full_probs;     // softmax over all experts, [tokens x n_experts]
    GateDecisions decisions;
    std::vector<ExpertTrace> experts;  // active experts only, ascending id
    DiffTensor z_loss;
    DiffTensor load_balance_loss;
};

/// x is [tokens x width] (or any shape whose last extent is width).
MoEOutput moe_forward(const MoEWeights& weights, const DiffTensor& x, const MoEConfig& cfg);

/// Sum over selected experts of gates[t, e] * outputs_e[row of t].
DiffTensor combine_experts(const DiffTensor& gates, const std::vector<ExpertTrace>& experts,
                           std::size_t width);

/// Switch load-balancing loss: n_experts * sum_e f_e * P_e, where f_e is the
/// fraction of tokens whose top-1 expert is e and P_e the mean router
/// probability. Differentiable through the probabilities only.
DiffTensor load_balance_loss(const DiffTensor& full_probs, std::span<const std::size_t> top1);

/// Mean over tokens of logsumexp(logits)^2.
DiffTensor z_loss(const DiffTensor& router_logits);

}  // namespace mupmoe
