#pragma once

// Decoder-only pre-norm Transformer with dense or MoE feed-forward blocks.
// Initialization, forward multipliers and per-group learning-rate scales all
// come from the parameterization rules.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mupmoe/moe.hpp"
#include "mupmoe/param_rules.hpp"
#include "mupmoe/tensor.hpp"

namespace mupmoe {

enum class Variant { DENSE, MOE };

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);

/// MoE settings as written in a config: d_expert is derived from the width
/// and granularity unless set explicitly.
struct MoESettings {
    std::size_t n_experts = 8;
    std::size_t top_k = 1;
    std::size_t granularity = 1;
    std::size_t d_expert = 0;  // 0: 4 * width / granularity
    GateStyle gate_style = GateStyle::TOPK_THEN_SOFTMAX;
    double z_loss_weight = 0.001;
    double load_balance_weight = 0.01;
    std::size_t moe_every = 1;  // MoE in blocks where (i + 1) % moe_every == 0

    bool operator==(const MoESettings&) const = default;
};

struct ModelConfig {
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t head_dim = 64;
    std::size_t vocab_size = 257;
    std::size_t seq_len = 256;
    Variant variant = Variant::MOE;
    MoESettings moe;
    Scheme scheme = Scheme::MU_P;
    double base_lr = 1.0 / 256.0;
    double init_scale = 1.0;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    /// head_dim, or width when width is not a multiple of head_dim.
    std::size_t effective_head_dim() const;
    bool head_dim_clamped() const { return effective_head_dim() != head_dim; }
    std::size_t n_heads() const { return width / effective_head_dim(); }
    std::size_t d_ff() const { return 4 * width; }
    bool block_is_moe(std::size_t block) const;
    /// Resolved MoE layer config (granularity applied).
    MoEConfig moe_config() const;
};

/// fan_in of a weight as applied in the forward pass. `ff_layer` selects the
/// first (1) or second (2) dense feed-forward matrix.
long long fan_in_of(WeightCategory category, const ModelConfig& cfg, int ff_layer = 1);

struct ParamGroup {
    std::string name;
    WeightCategory category = WeightCategory::EMBEDDING;
    long long fan_in = 1;
    ParamRule rule;
    std::vector<DiffTensor> tensors;
};

struct Block {
    DiffTensor ln1_gain, ln2_gain;
    DiffTensor wq, wk, wv, wo;
    // dense feed-forward
    DiffTensor ff_in, ff_out;
    // MoE feed-forward
    std::optional<MoEWeights> moe;
};

/// Outputs of one forward pass. Probe tensors are graph nodes, so after
/// backward their gradients are available too.
struct ForwardResult {
    DiffTensor logits;                       // [batch x seq x vocab]
    std::map<std::string, DiffTensor> probes;
    std::vector<MoEOutput> moe_layers;       // one per MoE block, in block order
    std::vector<std::size_t> moe_blocks;     // block index of each entry above
    DiffTensor aux_z;                        // unweighted sums over MoE layers
    DiffTensor aux_lb;
    DiffTensor aux_total;                    // weighted; scalar 0 for dense models
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    std::vector<ParamGroup>& groups() { return groups_; }
    const std::vector<ParamGroup>& groups() const { return groups_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    std::size_t parameter_count() const;

    /// tokens is batch x seq, row-major; seq must not exceed config seq_len.
    ForwardResult forward(std::span<const int> tokens, std::size_t batch,
                          std::size_t seq) const;

    /// Every weight tensor, in group order.
    std::vector<DiffTensor> parameters() const;
    void zero_grad();

private:
    ModelConfig cfg_;
    DiffTensor tok_embed_, pos_embed_, ln_f_gain_, unembed_;
    double embed_mult_ = 1.0, unembed_mult_ = 1.0, attn_mult_ = 1.0, ff_mult_in_ = 1.0,
           ff_mult_out_ = 1.0;
    std::vector<Block> blocks_;
    std::vector<ParamGroup> groups_;
};

/// Probe keys in forward order: embed, blk{i}.attn, blk{i}.ff, final, logits.
std::vector<std::string> probe_keys(std::size_t depth);

}  // namespace mupmoe
