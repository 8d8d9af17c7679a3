#pragma once

// Learning-rate sweeps over width, expert count or granularity, with
// append-only persistence and optimum / transfer-gap analysis.
//
// Output directory layout:
//   records.csv     one row per finished cell (append-only)
//   timings.csv     cell_key,wall_seconds (kept apart so records stay reproducible)
//   traces/         per-cell loss trace CSVs
//   <kind>.csv, plotdata_<kind>.csv, summary.json   written by emit_report

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mupmoe/model.hpp"
#include "mupmoe/train.hpp"

namespace mupmoe {

enum class ReportKind { WIDTH_TRANSFER, EXPERTS_TRANSFER, GRANULARITY_TRANSFER, DENSE_BASELINE };

std::string to_string(ReportKind k);
ReportKind parse_report_kind(std::string_view s);

struct SweepSpec {
    ModelConfig base;
    TrainOptions train;
    std::vector<double> lr_log2{-12, -11, -10, -9, -8, -7, -6, -5, -4};
    // Empty axis lists fall back to the base config's value.
    std::vector<std::size_t> widths;
    std::vector<Scheme> schemes;
    std::vector<std::size_t> n_experts;
    std::vector<std::size_t> granularities;
    std::vector<std::uint64_t> seeds{0, 1};
    std::filesystem::path out_dir = "sweep_out";
    std::size_t jobs = 1;
    bool force = false;

    /// Throws std::invalid_argument: empty or non-uniform LR grid, empty seeds, ...
    void validate() const;
    double grid_spacing_log2() const;
};

struct SweepCell {
    ModelConfig cfg;  // base_lr and seed already set
    double lr_log2 = 0.0;
    std::string key;
};

/// Every cell in scheme, width, n_experts, granularity, lr, seed order.
std::vector<SweepCell> plan_cells(const SweepSpec& spec);
std::string cell_key(const ModelConfig& cfg, double lr_log2);

struct SweepRecord {
    std::string cell_key;
    std::string config_digest;  // hex FNV-1a of the resolved model config
    Scheme scheme = Scheme::MU_P;
    Variant variant = Variant::MOE;
    GateStyle gate_style = GateStyle::TOPK_THEN_SOFTMAX;
    std::size_t width = 0;
    std::size_t n_experts = 0;
    std::size_t granularity = 1;
    double base_lr_log2 = 0.0;
    std::uint64_t seed = 0;
    std::string status;  // ok | diverged | failed
    std::optional<double> final_loss;  // empty unless status == ok
    bool diverged = false;
    long long steps_done = 0;
    std::size_t parameter_count = 0;
    std::string trace_path;  // relative to the sweep directory
    std::string trace_digest;
    std::string message;
    double wall_time = 0.0;  // seconds; persisted in timings.csv

    bool operator==(const SweepRecord&) const = default;
};

std::string records_csv_header();
std::string record_to_csv_row(const SweepRecord& r);
SweepRecord record_from_csv_row(const std::string& line);
/// Reads records.csv (and timings.csv when present). A later row for the same
/// cell replaces an earlier one. Missing file → empty.
std::vector<SweepRecord> load_records(const std::filesystem::path& dir);

struct SweepResult {
    std::vector<SweepRecord> records;  // every record present after the sweep
    std::size_t cells_planned = 0;
    std::size_t runs_executed = 0;
    std::size_t runs_skipped = 0;
};

/// Runs every planned cell that has no record yet (all cells with force).
/// Records are appended as each run finishes. An I/O failure aborts with
/// the records written so far left intact.
SweepResult run_sweep(const SweepSpec& spec, const Corpus& corpus, std::ostream* log = nullptr);

// ---- analysis -------------------------------------------------------------

struct LrPoint {
    double lr_log2 = 0.0;
    double mean_loss = 0.0;  // over seeds; meaningless when censored
    double sem = 0.0;
    std::size_t n_seeds = 0;
    std::size_t n_diverged = 0;
    bool censored = false;  // some seed diverged or failed
};

struct GroupOptimum {
    std::vector<LrPoint> points;  // ascending lr
    double best_lr_log2 = 0.0;
    double best_loss = 0.0;
    double best_sem = 0.0;
    std::vector<double> diverged_lr_log2;
    bool inconclusive = false;  // fewer than 2 uncensored points

    bool operator==(const GroupOptimum&) const = default;
};

using GroupKeyFn = std::function<std::string(const SweepRecord&)>;

/// Per group: mean final loss over seeds at each LR, argmin over uncensored
/// LRs, ties to the lower LR.
std::map<std::string, GroupOptimum> optimal_lr(const std::vector<SweepRecord>& records,
                                               const GroupKeyFn& group_key);

/// Largest pairwise optimum shift in grid steps. Throws std::invalid_argument
/// with fewer than 2 optima or a non-positive spacing.
double transfer_gap(const std::map<std::string, double>& optimum_lr, double grid_spacing_log2);

struct ReportCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SeriesSummary {
    std::string series;  // e.g. "mup"
    std::map<std::string, GroupOptimum> optima;
    std::optional<double> transfer_gap;  // absent when < 2 conclusive groups
};

struct SweepReport {
    ReportKind kind = ReportKind::WIDTH_TRANSFER;
    double grid_spacing_log2 = 1.0;
    std::vector<SeriesSummary> series;
    std::vector<ReportCheck> checks;
    std::vector<std::string> notes;

    const SeriesSummary& series_named(const std::string& name) const;
};

/// Analyses the records for `kind` and writes <kind>.csv, plotdata_<kind>.csv
/// and summary.json into `out_dir` (skipped when empty). Throws
/// std::invalid_argument naming the cells of `spec` that have no record.
SweepReport emit_report(const SweepSpec& spec, const std::vector<SweepRecord>& records,
                        ReportKind kind, const std::filesystem::path& out_dir);

std::string report_summary_json(const SweepReport& r);

}  // namespace mupmoe
