#include <gtest/gtest.h>

#include <cmath>

#include "mupmoe/model.hpp"
#include "mupmoe/param_rules.hpp"

using namespace mupmoe;

namespace {

// Table of expected (init variance, multiplier, LR scale) written out per
// scheme, independent of rule_for.
ParamRule expected(WeightCategory c, Scheme s, double n) {
    const double inv = 1.0 / n;
    using W = WeightCategory;
    switch (s) {
        case Scheme::SP:
            if (c == W::EMBEDDING || c == W::UNEMBEDDING) return {1, 1, 1};
            return {inv, 1, 1};
        case Scheme::SIMPLE_P:
            if (c == W::EMBEDDING) return {1, 1, 1};
            if (c == W::UNEMBEDDING) return {1, inv, 1};
            if (c == W::ROUTER) return {inv, 1, 1};
            return {inv, 1, inv};
        case Scheme::MU_P:
            if (c == W::EMBEDDING) return {1, 1, 1};
            if (c == W::UNEMBEDDING || c == W::ROUTER) return {1, inv, 1};
            return {inv, 1, inv};
    }
    return {};
}

}  // namespace

TEST(RuleFor, ExhaustiveTable) {
    for (auto s : kAllSchemes)
        for (auto c : kAllCategories)
            for (long long n : {64LL, 256LL, 1024LL}) {
                const ParamRule got = rule_for(c, s, n);
                const ParamRule want = expected(c, s, double(n));
                EXPECT_EQ(got.init_variance, want.init_variance) << to_string(c) << to_string(s) << n;
                EXPECT_EQ(got.forward_multiplier, want.forward_multiplier)
                    << to_string(c) << to_string(s) << n;
                EXPECT_EQ(got.lr_scale, want.lr_scale) << to_string(c) << to_string(s) << n;
            }
}

TEST(RuleFor, Examples) {
    EXPECT_EQ(rule_for(WeightCategory::ROUTER, Scheme::MU_P, 256), (ParamRule{1.0, 1.0 / 256, 1.0}));
    EXPECT_EQ(rule_for(WeightCategory::EXPERT_IN, Scheme::SIMPLE_P, 256),
              (ParamRule{1.0 / 256, 1.0, 1.0 / 256}));
    EXPECT_EQ(rule_for(WeightCategory::EMBEDDING, Scheme::SP, 1024), (ParamRule{1.0, 1.0, 1.0}));
    EXPECT_EQ(rule_for(WeightCategory::UNEMBEDDING, Scheme::MU_P, 512),
              (ParamRule{1.0, 1.0 / 512, 1.0}));
}

TEST(RuleFor, SimplePDiffersFromMuPOnlyAtRouter) {
    for (auto c : kAllCategories)
        for (long long n : {64LL, 1024LL}) {
            const bool same = rule_for(c, Scheme::SIMPLE_P, n) == rule_for(c, Scheme::MU_P, n);
            EXPECT_EQ(same, c != WeightCategory::ROUTER) << to_string(c);
        }
}

TEST(RuleFor, WidthDependentEntriesHalveWhenWidthDoubles) {
    for (auto s : kAllSchemes)
        for (auto c : kAllCategories) {
            const ParamRule a = rule_for(c, s, 128), b = rule_for(c, s, 256);
            for (auto [x, y] : {std::pair{a.init_variance, b.init_variance},
                                {a.forward_multiplier, b.forward_multiplier},
                                {a.lr_scale, b.lr_scale}})
                EXPECT_TRUE(x == y || y == x / 2) << to_string(c) << " " << to_string(s);
        }
}

TEST(RuleFor, FanInBelowOneThrows) {
    EXPECT_THROW(rule_for(WeightCategory::ROUTER, Scheme::MU_P, 0), std::invalid_argument);
    EXPECT_THROW(rule_for(WeightCategory::ROUTER, Scheme::MU_P, -3), std::invalid_argument);
}

TEST(EffectiveLr, Examples) {
    EXPECT_EQ(effective_lr(1e-3, ParamRule{1, 1, 1.0}), 1e-3);
    EXPECT_DOUBLE_EQ(effective_lr(1e-3, ParamRule{1, 1, 1.0 / 256}), 3.90625e-6);
    EXPECT_DOUBLE_EQ(effective_lr(2e-2, rule_for(WeightCategory::ATTENTION_QKVO, Scheme::MU_P, 128)),
                     1.5625e-4);
    EXPECT_THROW(effective_lr(0.0, ParamRule{}), std::invalid_argument);
    EXPECT_THROW(effective_lr(-1.0, ParamRule{}), std::invalid_argument);
}

TEST(FanInOf, Examples) {
    ModelConfig cfg;
    cfg.width = 256;
    EXPECT_EQ(fan_in_of(WeightCategory::ROUTER, cfg), 256);
    cfg.width = 128;
    EXPECT_EQ(fan_in_of(WeightCategory::EXPERT_OUT, cfg), 512);
    cfg.moe.granularity = 4;
    EXPECT_EQ(fan_in_of(WeightCategory::EXPERT_OUT, cfg), 128);
    EXPECT_EQ(fan_in_of(WeightCategory::EMBEDDING, cfg), 1);
    EXPECT_EQ(fan_in_of(WeightCategory::UNEMBEDDING, cfg), 128);
    EXPECT_EQ(fan_in_of(WeightCategory::FEEDFORWARD_DENSE, cfg, 1), 128);
    EXPECT_EQ(fan_in_of(WeightCategory::FEEDFORWARD_DENSE, cfg, 2), 512);
}

TEST(AttentionScale, BySchemeAndHeadDim) {
    EXPECT_EQ(attention_logit_scale(Scheme::MU_P, 64), 1.0 / 64);
    EXPECT_EQ(attention_logit_scale(Scheme::SIMPLE_P, 64), 1.0 / 64);
    EXPECT_EQ(attention_logit_scale(Scheme::SP, 64), 1.0 / 8);
    EXPECT_THROW(attention_logit_scale(Scheme::SP, 0), std::invalid_argument);
}

TEST(Names, RoundTrip) {
    for (auto s : kAllSchemes) EXPECT_EQ(parse_scheme(to_string(s)), s);
    for (auto c : kAllCategories) EXPECT_EQ(parse_category(to_string(c)), c);
    EXPECT_THROW(parse_scheme("ntk"), std::invalid_argument);
}
