#pragma once

// Run configuration files.
//
// INI-style text with sections [model] [moe] [scheme] [train] [sweep]
// [verify]. Lists are comma separated. Every key is optional; unknown
// sections or keys are errors. `resolved_text` prints every key with the
// value in effect, in a fixed order, and is what gets hashed.
//
//   [model]  width=64 depth=2 head_dim=64 vocab_size=257 seq_len=256
//            variant=moe init_scale=1 seed=0
//   [moe]    n_experts=8 top_k=1 granularity=1 d_expert=0 (0: 4*width/G)
//            gate_style=topk_then_softmax z_loss_weight=0.001
//            load_balance_weight=0.01 moe_every=1
//   [scheme] name=mup base_lr=0.00390625
//   [train]  batch_size=32 total_tokens=2000000 log_every=10 beta1=0.9
//            beta2=0.95 eps=1e-08 weight_decay=0 final_window=0.05 corpus=
//   [sweep]  kind=width_transfer lr_log2=-12,...,-4 widths= schemes=
//            n_experts= granularity= seeds=0,1 out_dir=sweep_out
//   [verify] widths=64,128,256,512,1024 seeds=0,1,2,3,4 tol=0.2 grad_tol=0.25
//            cov_tol=0.25 cov_coord_tol=0.3 batch_size=4 seq_len=32
//
// An empty train.corpus falls back to the MUPMOE_CORPUS environment variable.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "mupmoe/model.hpp"
#include "mupmoe/sweep.hpp"
#include "mupmoe/train.hpp"
#include "mupmoe/verify.hpp"

namespace mupmoe {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kCorpusEnv = "MUPMOE_CORPUS";

struct RunConfig {
    ModelConfig model;
    TrainOptions train;
    std::string corpus;
    SweepSpec sweep;  // base/train mirror `model` and `train`
    ReportKind sweep_kind = ReportKind::WIDTH_TRANSFER;
    VerifyOptions verify;
};

/// Throws ConfigError naming the section/key on any problem.
RunConfig parse_config(const std::string& text);
/// Throws ConfigError (message contains the path) when the file is unreadable.
RunConfig load_config(const std::filesystem::path& path);

/// Copies model/train into the sweep spec; call after editing a RunConfig.
void sync_sweep(RunConfig& cfg);

std::string resolved_text(const RunConfig& cfg);
/// 16 hex digits of FNV-1a over resolved_text.
std::string config_hash(const RunConfig& cfg);
/// Canonical one-line description of a model config (used for record digests).
std::string model_config_text(const ModelConfig& cfg);

/// train.corpus, else $MUPMOE_CORPUS; throws ConfigError when neither is set.
std::filesystem::path corpus_path(const RunConfig& cfg);

}  // namespace mupmoe
