// Acceptance run: one PASS/FAIL line per criterion.
//
//   mupmoe_acceptance                 criteria 1-6 and 11
//   mupmoe_acceptance --long          also the learning-rate sweeps (7-10)
//   mupmoe_acceptance --only-sweeps   sweeps only (implies --long)
//
// Sweeps read the corpus named by $MUPMOE_CORPUS and write under
// --out-root (default acceptance_sweeps). --jobs sets worker threads.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moe_oracle.hpp"
#include "mupmoe/config.hpp"
#include "mupmoe/model.hpp"
#include "mupmoe/param_rules.hpp"
#include "mupmoe/sweep.hpp"
#include "mupmoe/train.hpp"
#include "mupmoe/verify.hpp"
#include "support.hpp"

using namespace mupmoe;
namespace fs = std::filesystem;

namespace {

struct Options {
    bool long_run = false;
    bool only_sweeps = false;
    std::size_t jobs = 1;
    fs::path out_root = "acceptance_sweeps";
};

struct Outcome {
    bool passed = false;
    std::string detail;
    std::vector<std::string> lines;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.passed = false;
        o.detail = std::string("error: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << ": " << name << "  ["
              << o.detail << (o.detail.empty() ? "" : "; ") << secs << " s]\n";
    for (const auto& l : o.lines) std::cout << "    " << l << "\n";
    std::cout.flush();
    if (!o.passed) ++failures;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ----------------------------------------------------------------------

Outcome table_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t checked = 0, wrong = 0;
    Outcome o;
    for (auto s : kAllSchemes)
        for (auto c : kAllCategories)
            for (long long fan : {64LL, 256LL, 1024LL}) {
                const double inv = 1.0 / double(fan);
                const bool sp = s == Scheme::SP, mup = s == Scheme::MU_P;
                ParamRule want;
                switch (c) {
                    case WeightCategory::EMBEDDING: want = {1, 1, 1}; break;
                    case WeightCategory::UNEMBEDDING: want = {1, sp ? 1 : inv, 1}; break;
                    case WeightCategory::ROUTER:
                        want = mup ? ParamRule{1, inv, 1} : ParamRule{inv, 1, 1};
                        break;
                    default: want = {inv, 1, sp ? 1 : inv};
                }
                ++checked;
                if (!(rule_for(c, s, fan) == want)) {
                    ++wrong;
                    o.lines.push_back(to_string(c) + " " + to_string(s) + " " + std::to_string(fan));
                }
            }
    const double secs = seconds_since(t0);
    o.passed = wrong == 0 && checked == 63 && secs < 1.0;
    o.detail = std::to_string(checked - wrong) + "/" + std::to_string(checked) + " cells exact";
    return o;
}

// ---- 2 ----------------------------------------------------------------------

Outcome sparse_dense_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 g(20240901);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto style = trial % 2 ? GateStyle::SOFTMAX_THEN_TOPK : GateStyle::TOPK_THEN_SOFTMAX;
        worst = std::max(worst, testing_support::oracle_trial(g, style, 1 + (trial / 2) % 2));
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.passed = worst <= 1e-10 && secs < 10.0;
    o.detail = "50 configs, max abs diff " + fmt(worst) + " (tol 1e-10)";
    return o;
}

// ---- 3 ----------------------------------------------------------------------

Outcome gradient_correctness() {
    using testing_support::fd_max_rel_error;
    using testing_support::project;
    using testing_support::randn;
    using testing_support::randn_away;
    const auto t0 = std::chrono::steady_clock::now();
    constexpr double h = 1e-4, tol = 1e-5;
    std::mt19937_64 g(7);
    std::vector<std::pair<std::string, double>> errs;
    auto check = [&](const std::string& name, std::vector<DiffTensor> in,
                     const std::function<DiffTensor()>& f) {
        errs.emplace_back(name, fd_max_rel_error(std::move(in), f, h));
    };

    auto a = DiffTensor::variable({3, 4}, randn(12, g));
    auto b = DiffTensor::variable({4, 2}, randn(8, g));
    auto r6 = randn(6, g), r12 = randn(12, g), r15 = randn(15, g);
    check("matmul", {a, b}, [&] { return project(matmul(a, b), r6); });
    auto w = DiffTensor::variable({5, 4}, randn(20, g));
    check("linear", {a, w}, [&] { return project(linear(a, w), r15); });
    auto c = DiffTensor::variable({3, 4}, randn(12, g));
    check("add_scale", {a, c}, [&] { return project(add(a, scale(c, -0.7)), r12); });
    check("sum_mean", {a}, [&] { return add(sum(a), scale(mean(a), 5.0)); });
    check("reshape", {a}, [&] { return project(reshape(a, {6, 2}), r12); });
    auto z = DiffTensor::variable({3, 4}, randn_away(12, g));
    check("relu", {z}, [&] { return project(relu(z), r12); });
    auto v = DiffTensor::variable({6}, randn(6, g));
    check("softmax", {v}, [&] { return project(softmax(v), r6); });
    check("softmax_rows", {a}, [&] { return project(softmax_rows(a), r12); });
    std::vector<int> tg{1, 3, 0};
    check("cross_entropy", {a}, [&] { return cross_entropy_logits(a, tg); });
    auto table = DiffTensor::variable({5, 3}, randn(15, g));
    std::vector<int> ids{4, 0, 4, 2};
    check("embedding", {table}, [&] { return project(embedding(table, ids, {4, 3}), r12); });
    auto gain = DiffTensor::variable({4}, randn(4, g));
    check("layer_norm", {a, gain}, [&] { return project(layer_norm(a, gain), r12); });
    std::vector<std::size_t> rows{2, 0, 2};
    check("gather_rows", {a}, [&] { return project(gather_rows(a, rows), r12); });
    auto q = DiffTensor::variable({6, 4}, randn(24, g)), k = DiffTensor::variable({6, 4}, randn(24, g)),
         vv = DiffTensor::variable({6, 4}, randn(24, g));
    auto r24 = randn(24, g);
    check("causal_attention", {q, k, vv},
          [&] { return project(causal_attention(q, k, vv, 2, 3, 2, 0.5), r24); });
    auto rl = DiffTensor::variable({3, 4}, randn(12, g, 2.0));
    for (auto style : {GateStyle::TOPK_THEN_SOFTMAX, GateStyle::SOFTMAX_THEN_TOPK})
        check("gate_weights_" + to_string(style), {rl},
              [&] { return project(gate_weights(rl, 2, style), r12); });
    check("z_loss", {rl}, [&] { return z_loss(rl); });
    std::vector<std::size_t> top1{0, 3, 3};
    check("load_balance", {rl}, [&] { return load_balance_loss(softmax_rows(rl), top1); });

    for (auto variant : {Variant::DENSE, Variant::MOE}) {
        ModelConfig cfg;
        cfg.width = 8;
        cfg.head_dim = 4;
        cfg.depth = 2;
        cfg.vocab_size = 11;
        cfg.seq_len = 5;
        cfg.variant = variant;
        cfg.moe.n_experts = 4;
        cfg.moe.top_k = 2;
        cfg.moe.gate_style = GateStyle::SOFTMAX_THEN_TOPK;
        cfg.seed = 3;
        Model m(cfg);
        const auto tok = probe_tokens(5, 12, cfg.vocab_size);
        std::vector<int> in, tgt;
        for (std::size_t s = 0; s < 2; ++s) {
            in.insert(in.end(), tok.begin() + long(s * 6), tok.begin() + long(s * 6 + 5));
            tgt.insert(tgt.end(), tok.begin() + long(s * 6 + 1), tok.begin() + long(s * 6 + 6));
        }
        check("model_" + to_string(variant), m.parameters(),
              [&] { return training_loss(m.forward(in, 2, 5), tgt).total; });
    }

    Outcome o;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& [n, e] : errs) {
        if (e > worst) {
            worst = e;
            worst_name = n;
        }
        if (!(e <= tol)) o.lines.push_back(n + " rel err " + fmt(e));
    }
    const double secs = seconds_since(t0);
    o.passed = o.lines.empty() && secs < 60.0;
    o.detail = std::to_string(errs.size()) + " checks, worst " + worst_name + " " + fmt(worst) +
               " (tol 1e-5)";
    return o;
}

// ---- 4-6 ----------------------------------------------------------------------

ModelConfig verify_base(Scheme s, GateStyle gs) {
    ModelConfig c;
    c.scheme = s;
    c.moe.gate_style = gs;
    return c;
}

VerifyOptions verify_opts(std::size_t jobs) {
    VerifyOptions o;  // widths 64..1024, seeds 0..4
    o.jobs = jobs;
    return o;
}

void add_report_lines(const VerifyReport& r, Outcome& o) {
    for (const auto& v : r.verdicts)
        o.lines.push_back(std::string(v.passed ? "pass " : "fail ") + r.scheme + " " + v.name +
                          " (tol " + fmt(v.tolerance) + ")" +
                          (v.detail.empty() ? "" : ": " + v.detail));
}

Outcome desiderata(std::size_t jobs) {
    Outcome o;
    const auto mu = coord_check(verify_base(Scheme::MU_P, GateStyle::TOPK_THEN_SOFTMAX), verify_opts(jobs));
    add_report_lines(mu, o);
    const auto sp = coord_check(verify_base(Scheme::SP, GateStyle::TOPK_THEN_SOFTMAX), verify_opts(jobs));
    const auto& dl = sp.fit("logits", 1);
    const bool contrast = !dl.inconclusive && dl.slope >= 0.3;
    o.lines.push_back(std::string(contrast ? "pass " : "fail ") +
                      "sp delta-logits exponent " + fmt(dl.slope) + " (need >= 0.3)");
    o.passed = mu.passed() && contrast;
    o.detail = "mup logits@t1 " + fmt(mu.fit("logits", 1).slope) + ", sp logits@t1 " + fmt(dl.slope);
    return o;
}

Outcome gradient_scales(std::size_t jobs, VerifyReport* out) {
    Outcome o;
    auto r = gradient_scale_check(verify_base(Scheme::MU_P, GateStyle::SOFTMAX_THEN_TOPK), verify_opts(jobs));
    add_report_lines(r, o);
    o.passed = r.passed();
    o.detail = "expert_out " + fmt(r.fit("blk0.grad_expert_out", 0).slope) + ", router " +
               fmt(r.fit("blk0.grad_router_logits", 0).slope) + ", expert_pre " +
               fmt(r.fit("blk0.grad_expert_pre", 0).slope);
    if (out) *out = std::move(r);
    return o;
}

Outcome covariance(std::size_t jobs) {
    Outcome o;
    auto r = covariance_lemma_check(verify_base(Scheme::MU_P, GateStyle::SOFTMAX_THEN_TOPK), verify_opts(jobs));
    add_report_lines(r, o);
    o.passed = r.passed();
    o.detail = "router_grad_norm t0 " + fmt(r.fit("blk0.router_grad_norm", 0).slope) + ", t1 " +
               fmt(r.fit("blk0.router_grad_norm", 1).slope);
    return o;
}

// ---- 7-10 ---------------------------------------------------------------------

SweepSpec sweep_base(const fs::path& dir, std::size_t jobs) {
    SweepSpec s;
    s.base.depth = 2;
    s.train.total_tokens = 2'000'000;
    s.lr_log2 = {-12, -11, -10, -9, -8, -7, -6, -5, -4};
    s.seeds = {0, 1};
    s.out_dir = dir;
    s.jobs = jobs;
    return s;
}

Outcome run_and_check(SweepSpec spec, ReportKind kind, const Corpus& corpus) {
    fs::create_directories(spec.out_dir);
    run_sweep(spec, corpus, &std::cerr);
    const auto rep = emit_report(spec, load_records(spec.out_dir), kind, spec.out_dir);
    Outcome o;
    o.passed = !rep.checks.empty();
    for (const auto& c : rep.checks) {
        o.passed = o.passed && c.passed;
        o.lines.push_back(std::string(c.passed ? "pass " : "fail ") + c.name + ": " + c.detail);
    }
    for (const auto& s : rep.series) {
        std::string l = s.series + " optima:";
        for (const auto& [g, opt] : s.optima)
            l += " " + g + "->" + (opt.inconclusive ? std::string("?") : fmt(opt.best_lr_log2));
        o.lines.push_back(l);
    }
    for (const auto& n : rep.notes) o.lines.push_back("note: " + n);
    o.detail = "report in " + spec.out_dir.string();
    return o;
}

// ---- 11 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism(const VerifyReport* first) {
    Outcome o;
    VerifyReport again;
    gradient_scales(1, &again);
    const bool verify_same = first && *first == again;
    o.lines.push_back(std::string(verify_same ? "pass " : "fail ") +
                      "gradient-scale report identical on rerun at jobs 1");

    std::string text;
    for (int i = 0; i < 300; ++i) text += "a small deterministic corpus for rerun checks. ";
    const Corpus corpus = Corpus::from_bytes(text);
    const fs::path root = fs::temp_directory_path() / "mupmoe_acceptance_determinism";
    fs::remove_all(root);
    std::vector<std::string> csv;
    for (const char* sub : {"a", "b"}) {
        SweepSpec s;
        s.base.width = 16;
        s.base.head_dim = 16;
        s.base.depth = 1;
        s.base.seq_len = 16;
        s.base.moe.n_experts = 4;
        s.train.batch_size = 4;
        s.train.total_tokens = 4 * 16 * 100;
        s.widths = {16, 32};
        s.lr_log2 = {-8, -6};
        s.seeds = {0};
        s.out_dir = root / sub;
        s.jobs = 1;
        run_sweep(s, corpus);
        csv.push_back(slurp(root / sub / "records.csv"));
    }
    fs::remove_all(root);
    const bool records_same = !csv[0].empty() && csv[0] == csv[1];
    o.lines.push_back(std::string(records_same ? "pass " : "fail ") +
                      "sweep records.csv byte-identical on rerun at jobs 1");
    o.passed = verify_same && records_same;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--long") opt.long_run = true;
        else if (a == "--only-sweeps") opt.only_sweeps = opt.long_run = true;
        else if (a == "--jobs" && i + 1 < argc) opt.jobs = std::stoul(argv[++i]);
        else if (a == "--out-root" && i + 1 < argc) opt.out_root = argv[++i];
        else {
            std::cerr << "usage: mupmoe_acceptance [--long] [--only-sweeps] [--jobs N] [--out-root DIR]\n";
            return 1;
        }
    }

    if (!opt.only_sweeps) {
        report(1, "parameterization table exact", table_exactness);
        report(2, "sparse MoE matches dense oracle", sparse_dense_equivalence);
        report(3, "finite-difference gradient checks", gradient_correctness);
        report(4, "coordinate check desiderata (mup) with sp contrast",
               [&] { return desiderata(opt.jobs); });
    }
    VerifyReport grad_report;
    if (!opt.only_sweeps) {
        report(5, "gradient scales inside the MoE layer",
               [&] { return gradient_scales(1, &grad_report); });
        report(6, "expert-gradient covariance and router gradient norm",
               [&] { return covariance(opt.jobs); });
    }

    if (opt.long_run) {
        const char* env = std::getenv(kCorpusEnv);
        std::optional<Corpus> corpus;
        if (env && *env) corpus = Corpus::load(env);
        auto with_corpus = [&](auto fn) {
            return [&, fn]() -> Outcome {
                if (!corpus) return {false, std::string("set ") + kCorpusEnv + " to a corpus", {}};
                return fn(*corpus);
            };
        };
        report(7, "width transfer (mup, simplep, sp)", with_corpus([&](const Corpus& c) {
                   auto s = sweep_base(opt.out_root / "width", opt.jobs);
                   s.widths = {64, 128, 256};
                   s.schemes = {Scheme::MU_P, Scheme::SIMPLE_P, Scheme::SP};
                   return run_and_check(s, ReportKind::WIDTH_TRANSFER, c);
               }));
        report(8, "expert-count transfer (mup)", with_corpus([&](const Corpus& c) {
                   auto s = sweep_base(opt.out_root / "experts", opt.jobs);
                   s.base.width = 128;
                   s.n_experts = {4, 8, 16};
                   return run_and_check(s, ReportKind::EXPERTS_TRANSFER, c);
               }));
        report(9, "granularity observation (mup)", with_corpus([&](const Corpus& c) {
                   auto s = sweep_base(opt.out_root / "granularity", opt.jobs);
                   s.base.width = 128;
                   s.granularities = {1, 2, 4};
                   return run_and_check(s, ReportKind::GRANULARITY_TRANSFER, c);
               }));
        report(10, "dense baseline transfer (mup vs sp)", with_corpus([&](const Corpus& c) {
                   auto s = sweep_base(opt.out_root / "dense", opt.jobs);
                   s.base.variant = Variant::DENSE;
                   s.widths = {64, 128, 256};
                   s.schemes = {Scheme::MU_P, Scheme::SP};
                   return run_and_check(s, ReportKind::DENSE_BASELINE, c);
               }));
    } else {
        std::cout << "SKIP criteria 7-10: learning-rate sweeps need --long and " << kCorpusEnv
                  << "\n";
    }

    if (!opt.only_sweeps)
        report(11, "determinism at jobs 1", [&] { return determinism(&grad_report); });

    std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed\n"
                           : std::string("acceptance: all run criteria passed\n"));
    return failures ? 1 : 0;
}
