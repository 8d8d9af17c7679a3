#include "mupmoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mupmoe/rng.hpp"

namespace mupmoe {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace

long long warmup_steps(long long total_steps) { return (total_steps + 99) / 100; }

double lr_at(long long step, long long total_steps, double peak_lr) {
    require(total_steps >= 100,
            "lr_at: total_steps must be >= 100, got " + std::to_string(total_steps));
    require(step >= 0 && step <= total_steps, "lr_at: step " + std::to_string(step) +
                                                  " outside [0, " +
                                                  std::to_string(total_steps) + "]");
    const long long warm = warmup_steps(total_steps);
    if (step < warm) return peak_lr * static_cast<double>(step) / static_cast<double>(warm);
    const double progress =
        static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StepReport adamw_step(std::vector<ParamGroup>& groups, OptState& opt, double scheduled_lr) {
    StepReport report;
    for (auto& g : groups) {
        for (auto& t : g.tensors) {
            if (t.has_grad() && !all_finite(t.grad())) report.aborted = true;
        }
    }
    if (report.aborted) {
        for (auto& g : groups)
            for (auto& t : g.tensors) t.clear_grad();
        return report;
    }

    const auto& o = opt.options;
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(opt.step));
    for (auto& g : groups) {
        const double lr = scheduled_lr * g.rule.lr_scale;
        report.group_lr.emplace_back(g.name, lr);
        for (auto& t : g.tensors) {
            auto p = t.mutable_values();
            if (o.weight_decay != 0.0) {
                const double shrink = 1.0 - lr * o.weight_decay;
                for (double& x : p) x *= shrink;
            }
            auto it = opt.moments.find(t.node_id());
            if (!t.has_grad() && it == opt.moments.end()) continue;
            if (it == opt.moments.end()) {
                it = opt.moments
                         .emplace(t.node_id(), OptState::Moments{std::vector<double>(p.size(), 0.0),
                                                                 std::vector<double>(p.size(), 0.0)})
                         .first;
            }
            auto& m = it->second.m;
            auto& v = it->second.v;
            const auto grad = t.grad();
            const bool has = !grad.empty();
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = has ? grad[i] : 0.0;
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (std::sqrt(vhat) + o.eps));
            }
            t.clear_grad();
        }
    }
    return report;
}

// ---- corpus ---------------------------------------------------------------

Corpus Corpus::from_bytes(std::string_view bytes, std::string source) {
    Corpus c;
    c.tokens_.reserve(bytes.size());
    for (unsigned char b : bytes) c.tokens_.push_back(b);
    c.source_ = std::move(source);
    c.digest_ = fnv1a64(bytes);
    return c;
}

Corpus Corpus::load(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    auto read = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw std::runtime_error("corpus: cannot read " + p.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    if (!fs::exists(path)) throw std::runtime_error("corpus: no such path " + path.string());
    if (!fs::is_directory(path)) return from_bytes(read(path), path.string());

    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("corpus: directory has no files " + path.string());

    Corpus c;
    c.source_ = path.string();
    std::uint64_t h = fnv1a64("");
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (i) {
            c.tokens_.push_back(kDocSeparator);
            h = fnv1a64("\x01sep", h);
        }
        const std::string bytes = read(files[i]);
        for (unsigned char b : bytes) c.tokens_.push_back(b);
        h = fnv1a64(bytes, h);
    }
    c.digest_ = h;
    return c;
}

std::size_t Corpus::window_count(std::size_t seq) const {
    require(seq >= 1, "corpus: seq must be >= 1");
    return tokens_.size() > seq ? (tokens_.size() - 1) / seq : 0;
}

Batch Corpus::batch(std::uint64_t seed, std::size_t index, std::size_t batch,
                    std::size_t seq) const {
    require(batch >= 1, "corpus: batch must be >= 1");
    const std::size_t windows = window_count(seq);
    require(windows >= 1, "corpus: " + std::to_string(tokens_.size()) +
                              " tokens cannot fill one window of " + std::to_string(seq + 1));
    Batch b;
    b.batch = batch;
    b.seq = seq;
    b.inputs.reserve(batch * seq);
    b.targets.reserve(batch * seq);
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm;
    for (std::size_t j = 0; j < batch; ++j) {
        const std::size_t global = index * batch + j;
        const std::size_t epoch = global / windows;
        if (epoch != cached_epoch) {
            perm.resize(windows);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            RngStream rng(seed, "corpus/epoch" + std::to_string(epoch));
            // Fisher-Yates with our own index draws; std::shuffle's algorithm
            // is implementation-defined.
            for (std::size_t i = windows; i > 1; --i) {
                const std::size_t k = rng.next_u64() % i;
                std::swap(perm[i - 1], perm[k]);
            }
            cached_epoch = epoch;
        }
        const std::size_t start = perm[global % windows] * seq;
        for (std::size_t t = 0; t < seq; ++t) {
            b.inputs.push_back(tokens_[start + t]);
            b.targets.push_back(tokens_[start + t + 1]);
        }
    }
    return b;
}

// ---- training -------------------------------------------------------------

long long total_steps_for(const TrainOptions& opts, std::size_t seq_len) {
    const std::size_t per_step = opts.batch_size * seq_len;
    require(per_step > 0, "train: batch_size * seq_len must be > 0");
    return static_cast<long long>((opts.total_tokens + per_step - 1) / per_step);
}

LossParts training_loss(const ForwardResult& fwd, std::span<const int> targets) {
    LossParts parts;
    DiffTensor ce = cross_entropy_logits(fwd.logits, targets);
    parts.ce = ce.item();
    parts.aux_z = fwd.aux_z.item();
    parts.aux_lb = fwd.aux_lb.item();
    parts.total = fwd.aux_total.requires_grad() ? add(ce, fwd.aux_total) : ce;
    return parts;
}

RunResult train(const ModelConfig& cfg, const Corpus& corpus, const TrainOptions& opts) {
    Model model(cfg);
    RunResult result;
    const long long steps = total_steps_for(opts, cfg.seq_len);
    require(steps >= 100, "train: " + std::to_string(opts.total_tokens) +
                              " tokens give only " + std::to_string(steps) +
                              " steps; the schedule needs >= 100");
    require(corpus.window_count(cfg.seq_len) >= 1, "train: corpus too short for seq_len " +
                                                       std::to_string(cfg.seq_len));
    result.steps_planned = steps;
    result.parameter_count = model.parameter_count();
    OptState opt;
    opt.options = opts.adam;
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(steps));

    for (long long s = 0; s < steps; ++s) {
        Batch b = corpus.batch(cfg.seed, static_cast<std::size_t>(s), opts.batch_size,
                               cfg.seq_len);
        // Trace and final loss report cross-entropy; the optimized objective
        // also carries the weighted router losses.
        double loss_value = 0.0, aux_z = 0.0, aux_lb = 0.0;
        {
            ForwardResult fwd = model.forward(b.inputs, b.batch, b.seq);
            LossParts parts = training_loss(fwd, b.targets);
            loss_value = parts.ce;
            aux_z = parts.aux_z;
            aux_lb = parts.aux_lb;
            if (!std::isfinite(parts.total.item())) {
                result.diverged = true;
                break;
            }
            backward(parts.total);
        }
        if (s == 0) result.initial_loss = loss_value;
        losses.push_back(loss_value);
        const double lr = lr_at(s + 1, steps, cfg.base_lr);
        StepReport rep = adamw_step(model.groups(), opt, lr);
        result.steps_done = s + 1;
        if (s % static_cast<long long>(std::max<std::size_t>(opts.log_every, 1)) == 0 ||
            s + 1 == steps || rep.aborted) {
            result.trace.push_back({s, static_cast<std::size_t>(s + 1) * b.batch * b.seq,
                                    loss_value, lr, aux_z, aux_lb});
            result.group_lrs.push_back(rep.group_lr);
        }
        if (rep.aborted) {
            result.diverged = true;
            break;
        }
    }

    if (!losses.empty()) {
        const auto window = static_cast<std::size_t>(
            std::max(1.0, std::ceil(opts.final_window * static_cast<double>(steps))));
        const std::size_t take = std::min(window, losses.size());
        result.final_loss =
            std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(take), losses.end(), 0.0) /
            static_cast<double>(take);
    }
    if (result.diverged) result.final_loss = std::numeric_limits<double>::infinity();
    return result;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "step,tokens,loss,lr,aux_z,aux_lb\n";
    out.precision(17);
    for (const auto& r : trace)
        out << r.step << ',' << r.tokens << ',' << r.loss << ',' << r.lr << ',' << r.aux_z << ','
            << r.aux_lb << '\n';
}

}  // namespace mupmoe
