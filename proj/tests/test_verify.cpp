#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mupmoe/verify.hpp"

using namespace mupmoe;

TEST(ScaleOf, Examples) {
    std::vector<double> ones(7, 1.0), zero(5, 0.0), v{3, 4};
    EXPECT_EQ(scale_of(ones), 1.0);
    EXPECT_EQ(scale_of(zero), 0.0);
    EXPECT_EQ(scale_of(v), 12.5);
    EXPECT_THROW(scale_of(std::span<const double>{}), std::invalid_argument);
}

namespace {

std::vector<ScaleSample> power_law(double a, std::vector<std::uint64_t> seeds = {0},
                                   double c = 1.0) {
    std::vector<ScaleSample> s;
    for (auto seed : seeds)
        for (std::size_t n : {64u, 128u, 256u, 512u, 1024u})
            s.push_back({n, "q", c * std::pow(double(n), 2 * a), seed, 0});
    return s;
}

}  // namespace

TEST(FitExponent, ExactPowerLaws) {
    EXPECT_NEAR(fit_exponent(power_law(0.0)).slope, 0.0, 1e-12);
    EXPECT_NEAR(fit_exponent(power_law(-1.0)).slope, -1.0, 1e-10);
    EXPECT_NEAR(fit_exponent(power_law(0.5, {0, 1, 2}, 3.7)).slope, 0.5, 1e-10);
    auto f = fit_exponent(power_law(-1.0, {0, 1, 2}));
    EXPECT_EQ(f.per_seed_slopes.size(), 3u);
    EXPECT_NEAR(f.std_error, 0.0, 1e-12);
    EXPECT_EQ(f.n_points, 15u);
}

TEST(FitExponent, MonteCarloInverseWidthVariance) {
    std::vector<ScaleSample> s;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 g(seed);
        for (std::size_t n : {64u, 128u, 256u, 512u, 1024u}) {
            std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(double(n)));
            std::vector<double> v(n);
            for (auto& x : v) x = d(g);
            s.push_back({n, "x", scale_of(v), seed, 0});
        }
    }
    EXPECT_NEAR(fit_exponent(s).slope, -0.5, 0.05);
}

TEST(FitExponent, NeedsThreeWidths) {
    std::vector<ScaleSample> s{{64, "q", 1, 0, 0}, {128, "q", 1, 0, 0}, {64, "q", 1, 1, 0}};
    EXPECT_THROW(fit_exponent(s), std::invalid_argument);
}

TEST(FitExponent, DegenerateSamplesExcluded) {
    auto s = power_law(-0.5, {0, 1});
    s[0].value = 0.0;
    s[1].value = NAN;
    auto f = fit_exponent(s);
    EXPECT_EQ(f.degenerate, 2u);
    EXPECT_FALSE(f.inconclusive);
    EXPECT_NEAR(f.slope, -0.5, 1e-10);
    for (auto& x : s) x.value = 0.0;
    auto g = fit_exponent(s);
    EXPECT_TRUE(g.inconclusive);
}

TEST(FitAll, GroupsByQuantityAndStep) {
    auto a = power_law(0.0);
    auto b = power_law(-1.0);
    for (auto& x : b) x.t = 1;
    a.insert(a.end(), b.begin(), b.end());
    auto fits = fit_all(a);
    ASSERT_EQ(fits.size(), 2u);
    EXPECT_NEAR(fits.at(fit_key("q", 0)).slope, 0.0, 1e-12);
    EXPECT_NEAR(fits.at(fit_key("q", 1)).slope, -1.0, 1e-10);
}

namespace {

ModelConfig tiny(Variant v = Variant::MOE) {
    ModelConfig c;
    c.head_dim = 8;
    c.depth = 1;
    c.seq_len = 8;
    c.variant = v;
    c.moe.n_experts = 4;
    c.moe.gate_style = GateStyle::SOFTMAX_THEN_TOPK;
    return c;
}

VerifyOptions tiny_opts() {
    VerifyOptions o;
    o.widths = {8, 16, 32};
    o.seeds = {0, 1, 2};
    o.batch_size = 2;
    o.seq_len = 8;
    return o;
}

}  // namespace

TEST(CoordCheck, ShortLadderRejected) {
    auto o = tiny_opts();
    o.widths = {8, 16};
    EXPECT_THROW(coord_check(tiny(), o), std::invalid_argument);
    o.widths = {8, 16, 16};
    EXPECT_THROW(coord_check(tiny(), o), std::invalid_argument);
}

TEST(CoordCheck, ReportShapeAndDeterminism) {
    auto a = coord_check(tiny(), tiny_opts());
    auto b = coord_check(tiny(), tiny_opts());
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.kind, "coordcheck");
    for (const auto& k : probe_keys(1)) {
        EXPECT_TRUE(a.fits.count(fit_key(k, 0))) << k;
        EXPECT_TRUE(a.fits.count(fit_key(k, 1))) << k;
    }
    EXPECT_EQ(a.samples.size(), 3u * 3u * probe_keys(1).size() * 2u);
    EXPECT_EQ(a.verdicts.size(), 3u);
}

TEST(CoordCheck, ParallelMatchesSerial) {
    auto o = tiny_opts();
    auto a = coord_check(tiny(), o);
    o.jobs = 3;
    EXPECT_EQ(coord_check(tiny(), o), a);
}

TEST(CoordCheck, DenseMuPHiddenProbesWidthStable) {
    auto c = tiny(Variant::DENSE);
    auto o = tiny_opts();
    o.widths = {16, 32, 64};
    auto r = coord_check(c, o);
    EXPECT_LT(std::abs(r.fit("embed", 0).slope), 0.2);
    EXPECT_LT(std::abs(r.fit("final", 0).slope), 0.2);
}

TEST(GradCheck, DenseRejected) {
    EXPECT_THROW(gradient_scale_check(tiny(Variant::DENSE), tiny_opts()), std::invalid_argument);
}

TEST(GradCheck, ProducesPerBlockQuantities) {
    auto r = gradient_scale_check(tiny(), tiny_opts());
    EXPECT_TRUE(r.fits.count(fit_key("blk0.grad_expert_out", 0)));
    EXPECT_TRUE(r.fits.count(fit_key("blk0.grad_router_logits", 0)));
    EXPECT_TRUE(r.fits.count(fit_key("blk0.grad_expert_pre", 0)));
    EXPECT_EQ(r.verdicts.size(), 3u);
}

TEST(CovCheck, ProducesBothSteps) {
    auto r = covariance_lemma_check(tiny(), tiny_opts());
    EXPECT_TRUE(r.fits.count(fit_key("blk0.router_grad_norm", 0)));
    EXPECT_TRUE(r.fits.count(fit_key("blk0.router_grad_norm", 1)));
    EXPECT_FALSE(r.verdicts.empty());
}

TEST(VerifyReport, JsonRoundTrip) {
    auto r = gradient_scale_check(tiny(), tiny_opts());
    r.notes.push_back("a note");
    auto back = report_from_json(report_to_json(r));
    EXPECT_EQ(back, r);
}

TEST(VerifyReport, NoVerdictsIsNotAPass) {
    VerifyReport r;
    EXPECT_FALSE(r.passed());
}

TEST(VerifyReport, SamplesCsv) {
    std::vector<ScaleSample> s{{64, "embed", 0.1, 2, 1}};
    const auto csv = samples_to_csv(s);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "width,seed,t,quantity_key,value");
    EXPECT_NE(csv.find("64,2,1,embed,0.1"), std::string::npos);
}

TEST(ProbeTokens, DeterministicAndInRange) {
    auto a = probe_tokens(5, 100, 13), b = probe_tokens(5, 100, 13);
    EXPECT_EQ(a, b);
    for (int t : a) {
        EXPECT_GE(t, 0);
        EXPECT_LT(t, 13);
    }
    EXPECT_NE(probe_tokens(6, 100, 13), a);
}
