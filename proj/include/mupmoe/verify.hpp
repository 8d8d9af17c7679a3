#pragma once

// Width-scaling measurements.
//
// A vector v is Theta(n^a) when ||v||^2 / len(v) = Theta(n^{2a}). Each check
// builds the model at every width of a ladder, records such scales for named
// quantities, and fits the exponent a by least squares on
// (log n, 0.5 * log scale).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mupmoe/model.hpp"

namespace mupmoe {

struct ScaleSample {
    std::size_t width = 0;
    std::string quantity_key;
    double value = 0.0;
    std::uint64_t seed = 0;
    int t = 0;  // 0 before, 1 after one optimizer step

    bool operator==(const ScaleSample&) const = default;
};

struct ExponentFit {
    std::string quantity_key;
    double slope = 0.0;
    double std_error = 0.0;
    std::size_t n_points = 0;
    std::vector<double> per_seed_slopes;
    std::size_t degenerate = 0;  // zero or non-finite samples excluded
    bool inconclusive = false;   // no seed had >= 3 usable widths

    bool operator==(const ExponentFit&) const = default;
};

/// Sum of squares over length. Throws std::invalid_argument when empty.
double scale_of(std::span<const double> v);

/// Fits one quantity. Slopes are fitted per seed and averaged; std_error is
/// the standard error of that mean. Throws std::invalid_argument when the
/// samples span fewer than 3 distinct widths.
ExponentFit fit_exponent(std::span<const ScaleSample> samples);

struct Verdict {
    std::string name;
    bool passed = false;
    bool inconclusive = false;
    double tolerance = 0.0;
    std::string detail;

    bool operator==(const Verdict&) const = default;
};

struct VerifyOptions {
    std::vector<std::size_t> widths{64, 128, 256, 512, 1024};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    double tol = 0.2;            // activation desiderata
    double grad_tol = 0.25;      // gradient-scale slopes
    double cov_tol = 0.25;       // e^T delta and router-gradient slopes
    double cov_coord_tol = 0.3;  // per-coordinate covariance slope
    std::size_t batch_size = 4;
    std::size_t seq_len = 32;
    std::size_t jobs = 1;
};

/// Shared report type for coordcheck / gradcheck / covcheck.
struct VerifyReport {
    std::string kind;
    std::string scheme;
    std::string variant;
    std::string gate_style;
    std::vector<std::size_t> widths;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, double> tolerances;
    std::vector<ScaleSample> samples;
    std::map<std::string, ExponentFit> fits;  // key: "<quantity>@t<0|1>"
    std::vector<Verdict> verdicts;
    std::vector<std::string> notes;

    bool passed() const;
    const ExponentFit& fit(const std::string& quantity, int t) const;
    bool operator==(const VerifyReport&) const = default;
};
using CoordCheckReport = VerifyReport;

std::string fit_key(const std::string& quantity, int t);

/// Desiderata: hidden probes Theta(1) at init, logits O(1) at init, and
/// one-step changes of every probe Theta(1).
VerifyReport coord_check(const ModelConfig& base, const VerifyOptions& opts);

/// Gradient scales inside each MoE layer at init: gradient w.r.t. expert
/// outputs, router logits and expert pre-activations.
VerifyReport gradient_scale_check(const ModelConfig& base, const VerifyOptions& opts);

/// Expert-output / upstream-gradient correlation and router gradient norm,
/// before and after one optimizer step.
VerifyReport covariance_lemma_check(const ModelConfig& base, const VerifyOptions& opts);

/// Fits every quantity in `samples`, grouped by (quantity_key, t).
std::map<std::string, ExponentFit> fit_all(const std::vector<ScaleSample>& samples,
                                           std::vector<std::string>* notes = nullptr);

std::string report_to_json(const VerifyReport& r);
VerifyReport report_from_json(const std::string& text);
/// width,seed,t,quantity_key,value
std::string samples_to_csv(const std::vector<ScaleSample>& samples);

/// Deterministic uniform-random token batch for a verification cell.
std::vector<int> probe_tokens(std::uint64_t seed, std::size_t count, std::size_t vocab);

}  // namespace mupmoe
