#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

namespace mupmoe {

enum class Scheme { SP, SIMPLE_P, MU_P };

enum class WeightCategory {
    EMBEDDING,
    UNEMBEDDING,
    ATTENTION_QKVO,
    FEEDFORWARD_DENSE,
    EXPERT_IN,
    EXPERT_OUT,
    ROUTER,
};

inline constexpr std::array<Scheme, 3> kAllSchemes{Scheme::SP, Scheme::SIMPLE_P, Scheme::MU_P};
inline constexpr std::array<WeightCategory, 7> kAllCategories{
    WeightCategory::EMBEDDING,      WeightCategory::UNEMBEDDING, WeightCategory::ATTENTION_QKVO,
    WeightCategory::FEEDFORWARD_DENSE, WeightCategory::EXPERT_IN, WeightCategory::EXPERT_OUT,
    WeightCategory::ROUTER};

/// "sp" | "simplep" | "mup"
std::string to_string(Scheme s);
Scheme parse_scheme(std::string_view s);
/// "embedding", "unembedding", "attention_qkvo", ...
std::string to_string(WeightCategory c);
WeightCategory parse_category(std::string_view s);

/// One Table-1 cell evaluated at a concrete fan_in.
struct ParamRule {
    double init_variance = 1.0;
    double forward_multiplier = 1.0;
    double lr_scale = 1.0;

    bool operator==(const ParamRule&) const = default;
};

/// Scaling rule for a weight category. Asymptotic constants are taken as 1;
/// tuning constants live in base_lr and the model's init scale.
/// Throws std::invalid_argument when fan_in < 1.
ParamRule rule_for(WeightCategory category, Scheme scheme, long long fan_in);

/// Throws std::invalid_argument unless base_lr > 0.
double effective_lr(double base_lr, const ParamRule& rule);

/// Attention logit scale: 1/d_head under simpleP and muP, 1/sqrt(d_head) under SP.
double attention_logit_scale(Scheme scheme, std::size_t head_dim);

}  // namespace mupmoe
