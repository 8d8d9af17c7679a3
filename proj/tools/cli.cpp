#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mupmoe/config.hpp"
#include "mupmoe/param_rules.hpp"
#include "mupmoe/sweep.hpp"
#include "mupmoe/train.hpp"
#include "mupmoe/verify.hpp"

namespace mupmoe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
    std::size_t jobs = 1;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    std::optional<double> tol;
};

void add_flags(CLI::App* sub, Flags& f, bool with_tol, bool with_force) {
    sub->add_option("--jobs", f.jobs, "worker threads (1 keeps runs bit-deterministic)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed", f.seed,
                    "first seed; a seed list of length k becomes seed..seed+k-1 (default: from config)");
    sub->add_option("--out", f.out, "output directory (default: derived from the config)");
    if (with_force)
        sub->add_flag("--force", f.force, "rerun cells that already have a record (default: false)");
    if (with_tol)
        sub->add_option("--tol", f.tol,
                        "override the subcommand's slope tolerance (default: from config)");
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

void apply_seed(std::vector<std::uint64_t>& seeds, std::uint64_t first) {
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = first + i;
}

void write_stamp(const fs::path& dir, const RunConfig& cfg, const std::string& command,
                 const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                 const std::optional<Corpus>& corpus) {
    fs::create_directories(dir);
    write_text(dir / "config.ini", resolved_text(cfg));
    json m;
    m["tool"] = "mupmoe";
    m["version"] = MUPMOE_VERSION;
    m["command"] = command;
    m["config_hash"] = config_hash(cfg);
    m["seeds"] = seeds;
    m["jobs"] = jobs;
    if (corpus) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(corpus->digest()));
        m["corpus"] = {{"source", corpus->source()}, {"tokens", corpus->size()}, {"digest", buf}};
    }
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

int print_checks(std::ostream& out, const std::vector<ReportCheck>& checks) {
    bool ok = true;
    for (const auto& c : checks) {
        out << (c.passed ? "PASS " : "FAIL ") << c.name << "  " << c.detail << "\n";
        ok = ok && c.passed;
    }
    return ok ? kExitOk : kExitFail;
}

int cmd_rules(std::ostream& out, const std::string& scheme_name, long long fan_in,
              std::size_t head_dim) {
    const Scheme s = parse_scheme(scheme_name);
    json rules = json::object();
    for (auto cat : kAllCategories) {
        const ParamRule r = rule_for(cat, s, fan_in);
        rules[to_string(cat)] = {{"init_variance", r.init_variance},
                                 {"forward_multiplier", r.forward_multiplier},
                                 {"lr_scale", r.lr_scale}};
    }
    json j = {{"scheme", to_string(s)},
              {"fan_in", fan_in},
              {"head_dim", head_dim},
              {"attention_logit_scale", attention_logit_scale(s, head_dim)},
              {"rules", rules}};
    out << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_verify(std::ostream& out, const std::string& kind, const std::string& path, Flags f) {
    RunConfig cfg = load_config(path);
    if (f.seed) apply_seed(cfg.verify.seeds, *f.seed);
    if (f.tol) {
        if (kind == "coordcheck") cfg.verify.tol = *f.tol;
        if (kind == "gradcheck") cfg.verify.grad_tol = *f.tol;
        if (kind == "covcheck") cfg.verify.cov_tol = cfg.verify.cov_coord_tol = *f.tol;
    }
    VerifyOptions o = cfg.verify;
    o.jobs = f.jobs;
    const fs::path dir = f.out.empty() ? fs::path("runs") / (kind + "-" + config_hash(cfg)) : fs::path(f.out);

    VerifyReport rep = kind == "coordcheck"  ? coord_check(cfg.model, o)
                       : kind == "gradcheck" ? gradient_scale_check(cfg.model, o)
                                             : covariance_lemma_check(cfg.model, o);
    write_stamp(dir, cfg, kind, o.seeds, o.jobs, std::nullopt);
    write_text(dir / "report.json", report_to_json(rep) + "\n");
    write_text(dir / "samples.csv", samples_to_csv(rep.samples));

    for (const auto& [key, fit] : rep.fits) {
        out << key << "  slope=";
        if (fit.inconclusive) out << "inconclusive";
        else out << fit.slope << " +/- " << fit.std_error;
        out << "\n";
    }
    for (const auto& n : rep.notes) out << "note: " << n << "\n";
    for (const auto& v : rep.verdicts)
        out << (v.passed ? "PASS " : "FAIL ") << v.name << " (tol " << v.tolerance << ")\n";
    out << "report: " << (dir / "report.json").string() << "\n";
    return rep.passed() ? kExitOk : kExitFail;
}

int cmd_train(std::ostream& out, const std::string& path, Flags f) {
    RunConfig cfg = load_config(path);
    if (f.seed) cfg.model.seed = *f.seed;
    sync_sweep(cfg);
    const Corpus corpus = Corpus::load(corpus_path(cfg));
    const fs::path dir = f.out.empty() ? fs::path("runs") / ("train-" + config_hash(cfg)) : fs::path(f.out);
    RunResult r = train(cfg.model, corpus, cfg.train);
    write_stamp(dir, cfg, "train", {cfg.model.seed}, 1, corpus);
    write_trace_csv(dir / "trace.csv", r.trace);
    json j = {{"initial_loss", r.initial_loss},
              {"final_loss", r.diverged ? json(nullptr) : json(r.final_loss)},
              {"diverged", r.diverged},
              {"steps_planned", r.steps_planned},
              {"steps_done", r.steps_done},
              {"parameter_count", r.parameter_count}};
    if (!r.group_lrs.empty()) {
        json lrs = json::object();
        for (const auto& [g, lr] : r.group_lrs.front()) lrs[g] = lr;
        j["first_step_group_lr"] = lrs;
    }
    write_text(dir / "result.json", j.dump(2) + "\n");
    out << "steps " << r.steps_done << "/" << r.steps_planned << "  initial_loss "
        << r.initial_loss << "  final_loss ";
    if (r.diverged) out << "diverged";
    else out << r.final_loss;
    out << "\nartifacts: " << dir.string() << "\n";
    return kExitOk;
}

int cmd_sweep(std::ostream& out, const std::string& path, Flags f) {
    RunConfig cfg = load_config(path);
    if (f.seed) apply_seed(cfg.sweep.seeds, *f.seed);
    if (!f.out.empty()) cfg.sweep.out_dir = f.out;
    sync_sweep(cfg);
    const fs::path dir = cfg.sweep.out_dir;
    if (fs::exists(dir / "config.ini")) {
        const RunConfig prev = load_config(dir / "config.ini");
        if (config_hash(prev) != config_hash(cfg))
            throw ConfigError(dir.string() + " holds a sweep with a different config (hash " +
                              config_hash(prev) + "); choose another --out");
    }
    const Corpus corpus = Corpus::load(corpus_path(cfg));
    write_stamp(dir, cfg, "sweep", cfg.sweep.seeds, f.jobs, corpus);

    SweepSpec spec = cfg.sweep;
    spec.jobs = f.jobs;
    spec.force = f.force;
    SweepResult res = run_sweep(spec, corpus, &out);
    out << "cells " << res.cells_planned << "  ran " << res.runs_executed << "  skipped "
        << res.runs_skipped << "\n";
    SweepReport rep = emit_report(spec, res.records, cfg.sweep_kind, dir);
    for (const auto& s : rep.series) {
        out << s.series << ": transfer_gap ";
        if (s.transfer_gap) out << *s.transfer_gap;
        else out << "inconclusive";
        out << "\n";
    }
    return print_checks(out, rep.checks);
}

int cmd_report(std::ostream& out, const std::string& dir, const std::string& kind) {
    RunConfig cfg = load_config(fs::path(dir) / "config.ini");
    SweepSpec spec = cfg.sweep;
    spec.out_dir = dir;
    const ReportKind k = kind.empty() ? cfg.sweep_kind : parse_report_kind(kind);
    SweepReport rep = emit_report(spec, load_records(dir), k, dir);
    out << report_summary_json(rep) << "\n";
    return print_checks(out, rep.checks);
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"mupmoe: width-scaling rules and checks for mixture-of-experts transformers"};
    app.set_version_flag("--version", std::string(MUPMOE_VERSION));
    app.require_subcommand(1);

    std::string scheme_name;
    long long fan_in = 0;
    std::size_t head_dim = 64;
    auto* rules = app.add_subcommand("rules", "print init variance, multiplier and LR scale per category");
    rules->add_option("--scheme", scheme_name, "sp, simplep or mup")->required();
    rules->add_option("--fan-in", fan_in, "fan-in of the weight")->required();
    rules->add_option("--head-dim", head_dim, "head dimension for the attention logit scale")
        ->capture_default_str();

    std::string config_path;
    Flags flags;
    std::map<std::string, CLI::App*> verify_cmds;
    for (const char* name : {"coordcheck", "gradcheck", "covcheck"}) {
        const std::string desc = std::string(name) == "coordcheck"
                                     ? "activation and one-step update scales across widths"
                                 : std::string(name) == "gradcheck"
                                     ? "gradient scales inside MoE layers across widths"
                                     : "expert output / gradient covariance across widths";
        auto* sub = app.add_subcommand(name, desc);
        sub->add_option("config", config_path, "config file")->required();
        add_flags(sub, flags, true, false);
        verify_cmds[name] = sub;
    }
    auto* train_cmd = app.add_subcommand("train", "train one model and write its loss trace");
    train_cmd->add_option("config", config_path, "config file")->required();
    add_flags(train_cmd, flags, false, false);

    auto* sweep_cmd = app.add_subcommand("sweep", "run a learning-rate sweep and its report");
    sweep_cmd->add_option("config", config_path, "config file")->required();
    add_flags(sweep_cmd, flags, false, true);

    std::string report_dir, kind;
    auto* report_cmd = app.add_subcommand("report", "analyse the records in a sweep directory");
    report_cmd->add_option("dir", report_dir, "sweep directory")->required();
    report_cmd->add_option("--kind", kind,
                           "width_transfer, experts_transfer, granularity_transfer or "
                           "dense_baseline (default: sweep.kind from the directory's config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (rules->parsed()) return cmd_rules(out, scheme_name, fan_in, head_dim);
        for (const auto& [name, sub] : verify_cmds)
            if (sub->parsed()) return cmd_verify(out, name, config_path, flags);
        if (train_cmd->parsed()) return cmd_train(out, config_path, flags);
        if (sweep_cmd->parsed()) return cmd_sweep(out, config_path, flags);
        if (report_cmd->parsed()) return cmd_report(out, report_dir, kind);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    err << app.help();
    return kExitUsage;
}

}  // namespace mupmoe::cli
