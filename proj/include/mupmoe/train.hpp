#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "mupmoe/model.hpp"

namespace mupmoe {

// ---- schedule -------------------------------------------------------------

/// Linear warmup over the first ceil(1% of total_steps), then cosine decay to
/// zero at total_steps. Requires total_steps >= 100 and 0 <= step <= total.
double lr_at(long long step, long long total_steps, double peak_lr);
long long warmup_steps(long long total_steps);

// ---- optimizer ------------------------------------------------------------

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct OptState {
    struct Moments {
        std::vector<double> m, v;
    };
    AdamWOptions options;
    long long step = 0;
    // Keyed by parameter node id; allocated the first time a gradient arrives.
    std::unordered_map<std::uint64_t, Moments> moments;
};

struct StepReport {
    bool aborted = false;  // non-finite gradient seen; nothing was updated
    std::vector<std::pair<std::string, double>> group_lr;  // effective LR per group
};

/// One AdamW step with per-group learning rate scheduled_lr * rule.lr_scale.
/// A tensor with no gradient is treated as having a zero gradient. Gradients
/// are released afterwards.
StepReport adamw_step(std::vector<ParamGroup>& groups, OptState& opt, double scheduled_lr);

// ---- corpus ---------------------------------------------------------------

inline constexpr int kDocSeparator = 256;
inline constexpr std::size_t kByteVocab = 257;

struct Batch {
    std::vector<int> inputs;   // batch x seq
    std::vector<int> targets;  // batch x seq
    std::size_t batch = 0;
    std::size_t seq = 0;
};

/// Byte-level token stream. A file is one document; a directory contributes
/// each regular file (sorted by path) as a document, separated by id 256.
class Corpus {
public:
    static Corpus load(const std::filesystem::path& path);
    static Corpus from_bytes(std::string_view bytes, std::string source = "<memory>");

    const std::vector<int>& tokens() const { return tokens_; }
    std::size_t size() const { return tokens_.size(); }
    const std::string& source() const { return source_; }
    std::uint64_t digest() const { return digest_; }

    /// Non-overlapping windows of seq + 1 tokens.
    std::size_t window_count(std::size_t seq) const;
    /// Batch `index` under shuffle seed `seed`: a pure function of
    /// (tokens, seed, index, batch, seq). Windows are visited in a per-epoch
    /// permutation.
    Batch batch(std::uint64_t seed, std::size_t index, std::size_t batch, std::size_t seq) const;

private:
    std::vector<int> tokens_;
    std::string source_;
    std::uint64_t digest_ = 0;
};

// ---- training -------------------------------------------------------------

struct TrainOptions {
    std::size_t batch_size = 32;
    std::size_t total_tokens = 2'000'000;
    std::size_t log_every = 10;
    AdamWOptions adam;
    // Fraction of the final steps whose mean training loss is the final loss.
    double final_window = 0.05;
};

struct TraceRow {
    long long step = 0;
    std::size_t tokens = 0;
    double loss = 0.0;
    double lr = 0.0;
    double aux_z = 0.0;
    double aux_lb = 0.0;
};

struct RunResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool diverged = false;
    long long steps_planned = 0;
    long long steps_done = 0;
    std::size_t parameter_count = 0;
    std::vector<TraceRow> trace;
    // Effective LR per group at each logged step, parallel to `trace`.
    std::vector<std::vector<std::pair<std::string, double>>> group_lrs;
};

long long total_steps_for(const TrainOptions& opts, std::size_t seq_len);

/// Trains cfg from scratch on the corpus. Divergence (non-finite loss or
/// gradient) stops the run early and sets `diverged`; it is not an error.
RunResult train(const ModelConfig& cfg, const Corpus& corpus, const TrainOptions& opts);

/// Total objective: cross-entropy plus weighted auxiliary router losses.
struct LossParts {
    DiffTensor total;
    double ce = 0.0;
    double aux_z = 0.0;
    double aux_lb = 0.0;
};
LossParts training_loss(const ForwardResult& fwd, std::span<const int> targets);

/// Trace CSV: step,tokens,loss,lr,aux_z,aux_lb
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

}  // namespace mupmoe
