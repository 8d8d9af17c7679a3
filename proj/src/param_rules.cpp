#include "mupmoe/param_rules.hpp"

#include <cmath>
#include <stdexcept>

namespace mupmoe {

std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::SP: return "sp";
        case Scheme::SIMPLE_P: return "simplep";
        case Scheme::MU_P: return "mup";
    }
    throw std::logic_error("unknown scheme");
}

Scheme parse_scheme(std::string_view s) {
    if (s == "sp") return Scheme::SP;
    if (s == "simplep") return Scheme::SIMPLE_P;
    if (s == "mup") return Scheme::MU_P;
    throw std::invalid_argument("unknown scheme '" + std::string(s) +
                                "' (expected sp | simplep | mup)");
}

std::string to_string(WeightCategory c) {
    switch (c) {
        case WeightCategory::EMBEDDING: return "embedding";
        case WeightCategory::UNEMBEDDING: return "unembedding";
        case WeightCategory::ATTENTION_QKVO: return "attention_qkvo";
        case WeightCategory::FEEDFORWARD_DENSE: return "feedforward_dense";
        case WeightCategory::EXPERT_IN: return "expert_in";
        case WeightCategory::EXPERT_OUT: return "expert_out";
        case WeightCategory::ROUTER: return "router";
    }
    throw std::logic_error("unknown weight category");
}

WeightCategory parse_category(std::string_view s) {
    for (auto c : kAllCategories)
        if (to_string(c) == s) return c;
    throw std::invalid_argument("unknown weight category '" + std::string(s) + "'");
}

ParamRule rule_for(WeightCategory category, Scheme scheme, long long fan_in) {
    if (fan_in < 1)
        throw std::invalid_argument("rule_for: fan_in must be >= 1, got " + std::to_string(fan_in));
    const double inv = 1.0 / static_cast<double>(fan_in);
    const bool sp = scheme == Scheme::SP;

    switch (category) {
        case WeightCategory::EMBEDDING:
            return {1.0, 1.0, 1.0};
        case WeightCategory::UNEMBEDDING:
            return sp ? ParamRule{1.0, 1.0, 1.0} : ParamRule{1.0, inv, 1.0};
        case WeightCategory::ATTENTION_QKVO:
        case WeightCategory::FEEDFORWARD_DENSE:
        case WeightCategory::EXPERT_IN:
        case WeightCategory::EXPERT_OUT:
            // Hidden weights: experts share the dense feed-forward template.
            return sp ? ParamRule{inv, 1.0, 1.0} : ParamRule{inv, 1.0, inv};
        case WeightCategory::ROUTER:
            // Output-weight treatment only under muP.
            return scheme == Scheme::MU_P ? ParamRule{1.0, inv, 1.0} : ParamRule{inv, 1.0, 1.0};
    }
    throw std::logic_error("unknown weight category");
}

double effective_lr(double base_lr, const ParamRule& rule) {
    if (!(base_lr > 0.0) || !std::isfinite(base_lr))
        throw std::invalid_argument("effective_lr: base_lr must be > 0, got " +
                                    std::to_string(base_lr));
    return base_lr * rule.lr_scale;
}

double attention_logit_scale(Scheme scheme, std::size_t head_dim) {
    if (head_dim == 0) throw std::invalid_argument("attention_logit_scale: head_dim is 0");
    const auto d = static_cast<double>(head_dim);
    return scheme == Scheme::SP ? 1.0 / std::sqrt(d) : 1.0 / d;
}

}  // namespace mupmoe
