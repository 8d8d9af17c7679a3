#include "mupmoe/model.hpp"

#include <cmath>
#include <stdexcept>

#include "mupmoe/rng.hpp"

namespace mupmoe {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

DiffTensor maybe_scale(const DiffTensor& x, double c) { return c == 1.0 ? x : scale(x, c); }

DiffTensor ones(std::size_t n) {
    return DiffTensor::variable({n}, std::vector<double>(n, 1.0));
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::DENSE ? "dense" : "moe"; }

Variant parse_variant(std::string_view s) {
    if (s == "dense") return Variant::DENSE;
    if (s == "moe") return Variant::MOE;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected dense | moe)");
}

void ModelConfig::validate() const {
    require(width >= 1, "model.width must be >= 1");
    require(depth >= 1, "model.depth must be >= 1");
    require(head_dim >= 1, "model.head_dim must be >= 1");
    require(vocab_size >= 2, "model.vocab_size must be >= 2");
    require(seq_len >= 1, "model.seq_len must be >= 1");
    require(base_lr > 0.0 && std::isfinite(base_lr), "train.base_lr must be > 0");
    require(init_scale > 0.0 && std::isfinite(init_scale), "model.init_scale must be > 0");
    if (variant == Variant::MOE) {
        require(moe.moe_every >= 1, "moe.moe_every must be >= 1");
        require(moe.moe_every <= depth, "moe.moe_every = " + std::to_string(moe.moe_every) +
                                            " leaves no MoE block at depth " +
                                            std::to_string(depth));
        moe_config().validate();
    }
}

std::size_t ModelConfig::effective_head_dim() const {
    return (head_dim > 0 && width % head_dim == 0) ? head_dim : width;
}

bool ModelConfig::block_is_moe(std::size_t block) const {
    return variant == Variant::MOE && (block + 1) % moe.moe_every == 0;
}

MoEConfig ModelConfig::moe_config() const {
    MoEConfig base = baseline_moe(width, moe.n_experts, moe.top_k);
    if (moe.d_expert != 0) base.d_expert = moe.d_expert;
    base.gate_style = moe.gate_style;
    base.z_loss_weight = moe.z_loss_weight;
    base.load_balance_weight = moe.load_balance_weight;
    return apply_granularity(base, moe.granularity);
}

long long fan_in_of(WeightCategory category, const ModelConfig& cfg, int ff_layer) {
    const auto n = static_cast<long long>(cfg.width);
    switch (category) {
        case WeightCategory::EMBEDDING: return 1;
        case WeightCategory::UNEMBEDDING:
        case WeightCategory::ATTENTION_QKVO:
        case WeightCategory::EXPERT_IN:
        case WeightCategory::ROUTER: return n;
        case WeightCategory::FEEDFORWARD_DENSE:
            return ff_layer == 2 ? static_cast<long long>(cfg.d_ff()) : n;
        case WeightCategory::EXPERT_OUT:
            return static_cast<long long>(cfg.moe_config().d_expert);
    }
    throw std::logic_error("unknown weight category");
}

std::vector<std::string> probe_keys(std::size_t depth) {
    std::vector<std::string> keys{"embed"};
    for (std::size_t i = 0; i < depth; ++i) {
        keys.push_back("blk" + std::to_string(i) + ".attn");
        keys.push_back("blk" + std::to_string(i) + ".ff");
    }
    keys.push_back("final");
    keys.push_back("logits");
    return keys;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t n = cfg_.width, V = cfg_.vocab_size;
    const Scheme s = cfg_.scheme;
    const double s2 = cfg_.init_scale * cfg_.init_scale;
    const std::uint64_t seed = cfg_.seed;

    auto group = [&](std::string name, WeightCategory cat, int ff_layer = 1) {
        ParamGroup g;
        g.name = std::move(name);
        g.category = cat;
        g.fan_in = fan_in_of(cat, cfg_, ff_layer);
        g.rule = rule_for(cat, s, g.fan_in);
        return g;
    };
    auto init = [&](const ParamGroup& g, Shape shape, const std::string& label) {
        RngStream rng(seed, "init/" + label);
        return init_normal(shape, s2 * g.rule.init_variance, rng);
    };

    ParamGroup embed = group("embedding", WeightCategory::EMBEDDING);
    // Gains are vector-like parameters: width-independent rules, initialized to 1.
    ParamGroup gains = group("norm_gain", WeightCategory::EMBEDDING);
    ParamGroup attn = group("attention", WeightCategory::ATTENTION_QKVO);
    ParamGroup ff_in = group("ff_in", WeightCategory::FEEDFORWARD_DENSE, 1);
    ParamGroup ff_out = group("ff_out", WeightCategory::FEEDFORWARD_DENSE, 2);
    ParamGroup unembed = group("unembedding", WeightCategory::UNEMBEDDING);
    std::optional<ParamGroup> router, expert_in, expert_out;
    if (cfg_.variant == Variant::MOE) {
        router = group("router", WeightCategory::ROUTER);
        expert_in = group("expert_in", WeightCategory::EXPERT_IN);
        expert_out = group("expert_out", WeightCategory::EXPERT_OUT);
    }

    tok_embed_ = init(embed, {V, n}, "embed/token");
    pos_embed_ = init(embed, {cfg_.seq_len, n}, "embed/position");
    embed.tensors = {tok_embed_, pos_embed_};
    embed_mult_ = embed.rule.forward_multiplier;
    attn_mult_ = attn.rule.forward_multiplier;
    ff_mult_in_ = ff_in.rule.forward_multiplier;
    ff_mult_out_ = ff_out.rule.forward_multiplier;

    const MoEConfig moe_cfg =
        cfg_.variant == Variant::MOE ? cfg_.moe_config() : MoEConfig{};
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string p = "blk" + std::to_string(i);
        Block b;
        b.ln1_gain = ones(n);
        b.ln2_gain = ones(n);
        gains.tensors.push_back(b.ln1_gain);
        gains.tensors.push_back(b.ln2_gain);
        b.wq = init(attn, {n, n}, p + "/attn/q");
        b.wk = init(attn, {n, n}, p + "/attn/k");
        b.wv = init(attn, {n, n}, p + "/attn/v");
        b.wo = init(attn, {n, n}, p + "/attn/o");
        attn.tensors.insert(attn.tensors.end(), {b.wq, b.wk, b.wv, b.wo});
        if (cfg_.block_is_moe(i)) {
            b.moe = MoEWeights::init(moe_cfg, s, seed, "init/" + p + "/moe", cfg_.init_scale);
            router->tensors.push_back(b.moe->router);
            expert_in->tensors.insert(expert_in->tensors.end(), b.moe->expert_in.begin(),
                                      b.moe->expert_in.end());
            expert_out->tensors.insert(expert_out->tensors.end(), b.moe->expert_out.begin(),
                                       b.moe->expert_out.end());
        } else {
            b.ff_in = init(ff_in, {cfg_.d_ff(), n}, p + "/ff/in");
            b.ff_out = init(ff_out, {n, cfg_.d_ff()}, p + "/ff/out");
            ff_in.tensors.push_back(b.ff_in);
            ff_out.tensors.push_back(b.ff_out);
        }
        blocks_.push_back(std::move(b));
    }
    ln_f_gain_ = ones(n);
    gains.tensors.push_back(ln_f_gain_);
    unembed_ = init(unembed, {V, n}, "unembed");
    unembed.tensors = {unembed_};
    unembed_mult_ = unembed.rule.forward_multiplier;

    for (auto* g : {&embed, &gains, &attn, &ff_in, &ff_out}) {
        if (!g->tensors.empty()) groups_.push_back(std::move(*g));
    }
    for (auto* g : {&router, &expert_in, &expert_out}) {
        if (*g && !(*g)->tensors.empty()) groups_.push_back(std::move(**g));
    }
    groups_.push_back(std::move(unembed));
}

std::size_t Model::parameter_count() const {
    std::size_t total = 0;
    for (const auto& g : groups_)
        for (const auto& t : g.tensors) total += t.size();
    return total;
}

std::vector<DiffTensor> Model::parameters() const {
    std::vector<DiffTensor> out;
    for (const auto& g : groups_) out.insert(out.end(), g.tensors.begin(), g.tensors.end());
    return out;
}

void Model::zero_grad() {
    for (auto& g : groups_)
        for (auto& t : g.tensors) t.clear_grad();
}

ForwardResult Model::forward(std::span<const int> tokens, std::size_t batch,
                             std::size_t seq) const {
    require(batch >= 1 && seq >= 1, "forward: empty batch");
    require(seq <= cfg_.seq_len, "forward: sequence length " + std::to_string(seq) +
                                     " exceeds model.seq_len " + std::to_string(cfg_.seq_len));
    require(tokens.size() == batch * seq, "forward: " + std::to_string(tokens.size()) +
                                              " tokens for batch " + std::to_string(batch) +
                                              " x seq " + std::to_string(seq));
    for (int t : tokens) {
        require(t >= 0 && static_cast<std::size_t>(t) < cfg_.vocab_size,
                "forward: token " + std::to_string(t) + " outside [0, " +
                    std::to_string(cfg_.vocab_size) + ")");
    }
    const std::size_t n = cfg_.width, rows = batch * seq;
    std::vector<int> positions(rows);
    for (std::size_t i = 0; i < rows; ++i) positions[i] = static_cast<int>(i % seq);

    ForwardResult r;
    DiffTensor x = add(embedding(tok_embed_, tokens, {rows, n}),
                       embedding(pos_embed_, positions, {rows, n}));
    x = maybe_scale(x, embed_mult_);
    r.probes["embed"] = x;

    const double logit_scale = attention_logit_scale(cfg_.scheme, cfg_.effective_head_dim());
    const MoEConfig moe_cfg =
        cfg_.variant == Variant::MOE ? cfg_.moe_config() : MoEConfig{};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const Block& b = blocks_[i];
        const std::string p = "blk" + std::to_string(i);

        DiffTensor h = layer_norm(x, b.ln1_gain);
        DiffTensor q = maybe_scale(linear(h, b.wq), attn_mult_);
        DiffTensor k = maybe_scale(linear(h, b.wk), attn_mult_);
        DiffTensor v = maybe_scale(linear(h, b.wv), attn_mult_);
        DiffTensor att = causal_attention(q, k, v, batch, seq, cfg_.n_heads(), logit_scale);
        DiffTensor a = maybe_scale(linear(att, b.wo), attn_mult_);
        r.probes[p + ".attn"] = a;
        x = add(x, a);

        DiffTensor h2 = layer_norm(x, b.ln2_gain);
        DiffTensor f;
        if (b.moe) {
            MoEOutput m = moe_forward(*b.moe, h2, moe_cfg);
            f = m.y;
            r.aux_z = r.aux_z.defined() ? add(r.aux_z, m.z_loss) : m.z_loss;
            r.aux_lb = r.aux_lb.defined() ? add(r.aux_lb, m.load_balance_loss)
                                          : m.load_balance_loss;
            r.moe_layers.push_back(std::move(m));
            r.moe_blocks.push_back(i);
        } else {
            DiffTensor hid = relu(maybe_scale(linear(h2, b.ff_in), ff_mult_in_));
            f = maybe_scale(linear(hid, b.ff_out), ff_mult_out_);
        }
        r.probes[p + ".ff"] = f;
        x = add(x, f);
    }

    DiffTensor fin = layer_norm(x, ln_f_gain_);
    r.probes["final"] = fin;
    DiffTensor logits = maybe_scale(linear(fin, unembed_), unembed_mult_);
    r.logits = reshape(logits, {batch, seq, cfg_.vocab_size});
    r.probes["logits"] = r.logits;

    if (r.aux_z.defined()) {
        r.aux_total = add(scale(r.aux_z, moe_cfg.z_loss_weight),
                          scale(r.aux_lb, moe_cfg.load_balance_weight));
    } else {
        r.aux_z = DiffTensor::scalar(0.0);
        r.aux_lb = DiffTensor::scalar(0.0);
        r.aux_total = DiffTensor::scalar(0.0);
    }
    return r;
}

}  // namespace mupmoe
