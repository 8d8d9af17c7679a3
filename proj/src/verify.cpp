#include "mupmoe/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mupmoe/parallel.hpp"
#include "mupmoe/rng.hpp"
#include "mupmoe/train.hpp"

namespace mupmoe {

namespace {

using nlohmann::json;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Least-squares slope of y on x.
double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxy / sxx;
}

struct CellResult {
    std::vector<ScaleSample> samples;
    std::vector<std::string> notes;
};

std::string cell_name(const ModelConfig& c) {
    return "width=" + std::to_string(c.width) + " seed=" + std::to_string(c.seed);
}

struct ProbeBatch {
    std::vector<int> inputs, targets;
};

ProbeBatch make_batch(const ModelConfig& cfg, const VerifyOptions& o) {
    const std::size_t B = o.batch_size, T = o.seq_len;
    auto raw = probe_tokens(cfg.seed, B * (T + 1), cfg.vocab_size);
    ProbeBatch pb;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            pb.inputs.push_back(raw[b * (T + 1) + t]);
            pb.targets.push_back(raw[b * (T + 1) + t + 1]);
        }
    }
    return pb;
}

void validate_ladder(const VerifyOptions& o) {
    std::set<std::size_t> distinct(o.widths.begin(), o.widths.end());
    require(distinct.size() >= 3, "verify: need >= 3 distinct widths, got " +
                                      std::to_string(distinct.size()));
    require(o.seeds.size() >= 3, "verify: need >= 3 seeds, got " + std::to_string(o.seeds.size()));
    require(o.batch_size >= 1 && o.seq_len >= 1, "verify: empty probe batch");
}

// Runs `cell` for every (width, seed) and merges results in (width, seed) order.
std::vector<CellResult> run_cells(const ModelConfig& base, const VerifyOptions& o,
                                  const std::function<CellResult(const ModelConfig&)>& cell) {
    std::vector<ModelConfig> cfgs;
    for (auto w : o.widths) {
        for (auto s : o.seeds) {
            ModelConfig c = base;
            c.width = w;
            c.seed = s;
            c.seq_len = std::max(base.seq_len, o.seq_len);
            c.validate();
            cfgs.push_back(c);
        }
    }
    std::vector<CellResult> out(cfgs.size());
    parallel_for(cfgs.size(), o.jobs, [&](std::size_t i) { out[i] = cell(cfgs[i]); });
    return out;
}

VerifyReport make_report(const std::string& kind, const ModelConfig& base,
                         const VerifyOptions& o, std::vector<CellResult> cells) {
    VerifyReport r;
    r.kind = kind;
    r.scheme = to_string(base.scheme);
    r.variant = to_string(base.variant);
    r.gate_style = base.variant == Variant::MOE ? to_string(base.moe.gate_style) : "";
    r.widths = o.widths;
    r.seeds = o.seeds;
    for (auto& c : cells) {
        r.samples.insert(r.samples.end(), c.samples.begin(), c.samples.end());
        r.notes.insert(r.notes.end(), c.notes.begin(), c.notes.end());
    }
    r.fits = fit_all(r.samples, &r.notes);
    return r;
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(4);
    os << x;
    return os.str();
}

// One verdict over every fit selected by `select`; each must satisfy
// |slope - target| <= tol (two-sided) or slope <= target + tol (upper only).
Verdict judge(const VerifyReport& r, const std::string& name,
              const std::function<bool(const std::string& quantity, int t)>& select,
              double target, double tol, bool upper_only = false,
              bool skip_inconclusive = false) {
    Verdict v;
    v.name = name;
    v.tolerance = tol;
    v.passed = true;
    std::size_t checked = 0;
    std::ostringstream detail;
    for (const auto& [key, fit] : r.fits) {
        const auto at = key.rfind("@t");
        const std::string q = key.substr(0, at);
        const int t = std::stoi(key.substr(at + 2));
        if (!select(q, t)) continue;
        if (fit.inconclusive) {
            if (skip_inconclusive) {
                detail << key << ": skipped (inconclusive); ";
                continue;
            }
            v.passed = false;
            v.inconclusive = true;
            detail << key << ": inconclusive; ";
            continue;
        }
        ++checked;
        const bool ok = upper_only ? fit.slope <= target + tol
                                   : std::abs(fit.slope - target) <= tol;
        if (!ok) v.passed = false;
        detail << key << "=" << fmt(fit.slope) << (ok ? "" : " (out of range)") << "; ";
    }
    if (checked == 0) {
        v.passed = false;
        v.inconclusive = true;
        detail << "no conclusive fits";
    }
    v.detail = detail.str();
    return v;
}

void push_scale(CellResult& cr, const ModelConfig& c, const std::string& key, int t,
                std::span<const double> v) {
    if (v.empty()) return;
    const double s = scale_of(v);
    if (!std::isfinite(s)) {
        cr.notes.push_back(cell_name(c) + ": non-finite " + key + " at t=" + std::to_string(t));
        return;
    }
    cr.samples.push_back({c.width, key, s, c.seed, t});
}

}  // namespace

double scale_of(std::span<const double> v) {
    require(!v.empty(), "scale_of: empty vector");
    double s = 0.0;
    for (double x : v) s += x * x;
    return s / static_cast<double>(v.size());
}

ExponentFit fit_exponent(std::span<const ScaleSample> samples) {
    std::set<std::size_t> widths;
    for (const auto& s : samples) widths.insert(s.width);
    require(widths.size() >= 3, "fit_exponent: need >= 3 distinct widths, got " +
                                    std::to_string(widths.size()));
    ExponentFit fit;
    if (!samples.empty()) fit.quantity_key = samples.front().quantity_key;

    std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> by_seed;
    std::map<std::uint64_t, std::set<std::size_t>> seed_widths;
    for (const auto& s : samples) {
        if (!(s.value > 0.0) || !std::isfinite(s.value)) {
            ++fit.degenerate;
            continue;
        }
        auto& [xs, ys] = by_seed[s.seed];
        xs.push_back(std::log(static_cast<double>(s.width)));
        ys.push_back(0.5 * std::log(s.value));
        seed_widths[s.seed].insert(s.width);
    }
    for (const auto& [seed, xy] : by_seed) {
        if (seed_widths[seed].size() < 3) continue;
        fit.per_seed_slopes.push_back(ls_slope(xy.first, xy.second));
        fit.n_points += xy.first.size();
    }
    if (fit.per_seed_slopes.empty()) {
        fit.inconclusive = true;
        return fit;
    }
    const auto k = static_cast<double>(fit.per_seed_slopes.size());
    double m = 0.0;
    for (double a : fit.per_seed_slopes) m += a;
    m /= k;
    fit.slope = m;
    if (fit.per_seed_slopes.size() > 1) {
        double var = 0.0;
        for (double a : fit.per_seed_slopes) var += (a - m) * (a - m);
        var /= (k - 1.0);
        fit.std_error = std::sqrt(var / k);
    }
    return fit;
}

std::string fit_key(const std::string& quantity, int t) {
    return quantity + "@t" + std::to_string(t);
}

std::map<std::string, ExponentFit> fit_all(const std::vector<ScaleSample>& samples,
                                           std::vector<std::string>* notes) {
    std::map<std::string, std::vector<ScaleSample>> grouped;
    for (const auto& s : samples) grouped[fit_key(s.quantity_key, s.t)].push_back(s);
    std::map<std::string, ExponentFit> fits;
    for (auto& [key, group] : grouped) {
        std::set<std::size_t> widths;
        for (const auto& s : group) widths.insert(s.width);
        ExponentFit f;
        if (widths.size() < 3) {
            f.quantity_key = group.front().quantity_key;
            f.inconclusive = true;
            if (notes) notes->push_back(key + ": only " + std::to_string(widths.size()) +
                                        " widths with samples; fit inconclusive");
        } else {
            f = fit_exponent(group);
            if (f.inconclusive && notes)
                notes->push_back(key + ": no seed has 3 usable widths; fit inconclusive");
        }
        if (f.degenerate && notes)
            notes->push_back(key + ": " + std::to_string(f.degenerate) +
                             " degenerate samples excluded");
        fits[key] = std::move(f);
    }
    return fits;
}

bool VerifyReport::passed() const {
    if (verdicts.empty()) return false;
    return std::all_of(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.passed; });
}

const ExponentFit& VerifyReport::fit(const std::string& quantity, int t) const {
    auto it = fits.find(fit_key(quantity, t));
    if (it == fits.end())
        throw std::out_of_range("report has no fit for " + fit_key(quantity, t));
    return it->second;
}

std::vector<int> probe_tokens(std::uint64_t seed, std::size_t count, std::size_t vocab) {
    RngStream rng(seed, "verify/tokens");
    std::vector<int> out(count);
    for (auto& t : out) t = static_cast<int>(rng.next_u64() % vocab);
    return out;
}

// ---- coordinate check -------------------------------------------------------

VerifyReport coord_check(const ModelConfig& base, const VerifyOptions& o) {
    validate_ladder(o);
    const auto keys = probe_keys(base.depth);
    auto cells = run_cells(base, o, [&](const ModelConfig& c) {
        CellResult cr;
        Model model(c);
        const ProbeBatch pb = make_batch(c, o);
        std::map<std::string, std::vector<double>> before;
        {
            ForwardResult fwd = model.forward(pb.inputs, o.batch_size, o.seq_len);
            for (const auto& k : keys) {
                const auto v = fwd.probes.at(k).values();
                before[k].assign(v.begin(), v.end());
                push_scale(cr, c, k, 0, v);
            }
            LossParts loss = training_loss(fwd, pb.targets);
            if (!std::isfinite(loss.total.item())) {
                cr.notes.push_back(cell_name(c) + ": non-finite loss at t=0 (degenerate)");
                return cr;
            }
            backward(loss.total);
        }
        OptState opt;
        if (adamw_step(model.groups(), opt, c.base_lr).aborted) {
            cr.notes.push_back(cell_name(c) + ": non-finite gradient, step aborted (degenerate)");
            return cr;
        }
        ForwardResult after = model.forward(pb.inputs, o.batch_size, o.seq_len);
        for (const auto& k : keys) {
            const auto v = after.probes.at(k).values();
            std::vector<double> delta(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) delta[i] = v[i] - before[k][i];
            push_scale(cr, c, k, 1, delta);
        }
        return cr;
    });

    VerifyReport r = make_report("coordcheck", base, o, std::move(cells));
    r.tolerances["tol"] = o.tol;
    r.verdicts.push_back(judge(
        r, "desideratum1_hidden_theta1_at_init",
        [](const std::string& q, int t) { return t == 0 && q != "logits"; }, 0.0, o.tol));
    r.verdicts.push_back(judge(
        r, "desideratum2_logits_O1_at_init",
        [](const std::string& q, int t) { return t == 0 && q == "logits"; }, 0.0, o.tol, true));
    r.verdicts.push_back(judge(
        r, "desideratum3_updates_theta1_after_step",
        [](const std::string&, int t) { return t == 1; }, 0.0, o.tol));
    return r;
}

// ---- gradient scales --------------------------------------------------------

VerifyReport gradient_scale_check(const ModelConfig& base, const VerifyOptions& o) {
    require(base.variant == Variant::MOE, "gradient_scale_check: requires the moe variant");
    validate_ladder(o);
    auto cells = run_cells(base, o, [&](const ModelConfig& c) {
        CellResult cr;
        Model model(c);
        const ProbeBatch pb = make_batch(c, o);
        ForwardResult fwd = model.forward(pb.inputs, o.batch_size, o.seq_len);
        LossParts loss = training_loss(fwd, pb.targets);
        if (!std::isfinite(loss.total.item())) {
            cr.notes.push_back(cell_name(c) + ": non-finite loss (degenerate)");
            return cr;
        }
        backward(loss.total);
        for (std::size_t l = 0; l < fwd.moe_layers.size(); ++l) {
            const MoEOutput& m = fwd.moe_layers[l];
            const std::string p = "blk" + std::to_string(fwd.moe_blocks[l]);
            std::vector<double> g_out, g_pre;
            for (const auto& ex : m.experts) {
                const auto go = ex.output.grad_or_zero();
                const auto gp = ex.pre_activation.grad_or_zero();
                g_out.insert(g_out.end(), go.begin(), go.end());
                g_pre.insert(g_pre.end(), gp.begin(), gp.end());
            }
            push_scale(cr, c, p + ".grad_expert_out", 0, g_out);
            push_scale(cr, c, p + ".grad_expert_pre", 0, g_pre);
            push_scale(cr, c, p + ".grad_router_logits", 0, m.router_logits.grad_or_zero());
            push_scale(cr, c, p + ".grad_moe_out", 0, m.y.grad_or_zero());
        }
        model.zero_grad();
        return cr;
    });

    VerifyReport r = make_report("gradcheck", base, o, std::move(cells));
    r.tolerances["grad_tol"] = o.grad_tol;
    auto ends_with = [](const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    r.verdicts.push_back(judge(
        r, "expert_output_grad_theta_inv_n",
        [&](const std::string& q, int) { return ends_with(q, ".grad_expert_out"); }, -1.0,
        o.grad_tol));
    r.verdicts.push_back(judge(
        r, "router_logit_grad_theta1",
        [&](const std::string& q, int) { return ends_with(q, ".grad_router_logits"); }, 0.0,
        o.grad_tol));
    r.verdicts.push_back(judge(
        r, "expert_preactivation_grad_theta_inv_n",
        [&](const std::string& q, int) { return ends_with(q, ".grad_expert_pre"); }, -1.0,
        o.grad_tol));
    return r;
}

// ---- expert / gradient covariance -------------------------------------------

namespace {

void record_covariance(CellResult& cr, const ModelConfig& c, const ForwardResult& fwd, int t) {
    for (std::size_t l = 0; l < fwd.moe_layers.size(); ++l) {
        const MoEOutput& m = fwd.moe_layers[l];
        const std::string p = "blk" + std::to_string(fwd.moe_blocks[l]);
        const std::size_t n = c.width;
        const auto delta = m.y.grad_or_zero();
        for (const auto& ex : m.experts) {
            const auto out = ex.output.values();
            std::vector<double> edelta, cov;
            for (std::size_t i = 0; i < ex.rows.size(); ++i) {
                const double* e = out.data() + i * n;
                const double* d = delta.data() + ex.rows[i] * n;
                double dot = 0.0, se = 0.0, sd = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += e[j] * d[j];
                    se += e[j];
                    sd += d[j];
                }
                const double nn = static_cast<double>(n);
                edelta.push_back(dot);
                cov.push_back(dot / nn - (se / nn) * (sd / nn));
            }
            const std::string q = p + ".e" + std::to_string(ex.expert);
            push_scale(cr, c, q + ".edelta", t, edelta);
            push_scale(cr, c, q + ".cov", t, cov);
        }
        const auto rg = m.router_logits.grad_or_zero();
        const std::size_t E = m.router_logits.cols();
        std::vector<double> norms(m.router_logits.rows());
        for (std::size_t tok = 0; tok < norms.size(); ++tok) {
            double s = 0.0;
            for (std::size_t e = 0; e < E; ++e) s += rg[tok * E + e] * rg[tok * E + e];
            norms[tok] = std::sqrt(s);
        }
        push_scale(cr, c, p + ".router_grad_norm", t, norms);
    }
}

}  // namespace

VerifyReport covariance_lemma_check(const ModelConfig& base, const VerifyOptions& o) {
    require(base.variant == Variant::MOE, "covariance_lemma_check: requires the moe variant");
    validate_ladder(o);
    auto cells = run_cells(base, o, [&](const ModelConfig& c) {
        CellResult cr;
        Model model(c);
        const ProbeBatch pb = make_batch(c, o);
        OptState opt;
        for (int t = 0; t <= 1; ++t) {
            ForwardResult fwd = model.forward(pb.inputs, o.batch_size, o.seq_len);
            LossParts loss = training_loss(fwd, pb.targets);
            if (!std::isfinite(loss.total.item())) {
                cr.notes.push_back(cell_name(c) + ": non-finite loss at t=" + std::to_string(t) +
                                   " (degenerate)");
                return cr;
            }
            backward(loss.total);
            record_covariance(cr, c, fwd, t);
            if (t == 0 && adamw_step(model.groups(), opt, c.base_lr).aborted) {
                cr.notes.push_back(cell_name(c) + ": non-finite gradient, step aborted (degenerate)");
                return cr;
            }
        }
        model.zero_grad();
        return cr;
    });

    VerifyReport r = make_report("covcheck", base, o, std::move(cells));
    r.tolerances["cov_tol"] = o.cov_tol;
    r.tolerances["cov_coord_tol"] = o.cov_coord_tol;
    auto has_suffix = [](const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    // Experts that were not routed at enough widths are skipped, not failed.
    r.verdicts.push_back(judge(
        r, "expert_output_dot_grad_theta1",
        [&](const std::string& q, int) { return has_suffix(q, ".edelta"); }, 0.0, o.cov_tol,
        false, true));
    r.verdicts.push_back(judge(
        r, "router_grad_norm_theta1",
        [&](const std::string& q, int) { return has_suffix(q, ".router_grad_norm"); }, 0.0,
        o.cov_tol));
    r.verdicts.push_back(judge(
        r, "per_coordinate_covariance_theta_inv_n",
        [&](const std::string& q, int) { return has_suffix(q, ".cov"); }, -1.0, o.cov_coord_tol,
        false, true));
    if (base.moe.top_k != 1 || base.moe.granularity != 1)
        r.notes.push_back("top_k or granularity scaled: outside the O(1) expert/top-k hypotheses");
    return r;
}

// ---- serialization ----------------------------------------------------------

std::string report_to_json(const VerifyReport& r) {
    json j;
    j["kind"] = r.kind;
    j["scheme"] = r.scheme;
    j["variant"] = r.variant;
    j["gate_style"] = r.gate_style;
    j["widths"] = r.widths;
    j["seeds"] = r.seeds;
    j["tolerances"] = r.tolerances;
    j["passed"] = r.passed();
    json samples = json::array();
    for (const auto& s : r.samples)
        samples.push_back({{"width", s.width}, {"quantity_key", s.quantity_key},
                           {"value", s.value}, {"seed", s.seed}, {"t", s.t}});
    j["samples"] = samples;
    json fits = json::object();
    for (const auto& [k, f] : r.fits) {
        fits[k] = {{"quantity_key", f.quantity_key}, {"slope", f.slope},
                   {"std_error", f.std_error}, {"n_points", f.n_points},
                   {"per_seed_slopes", f.per_seed_slopes}, {"degenerate", f.degenerate},
                   {"inconclusive", f.inconclusive}};
    }
    j["fits"] = fits;
    json verdicts = json::array();
    for (const auto& v : r.verdicts)
        verdicts.push_back({{"name", v.name}, {"passed", v.passed},
                            {"inconclusive", v.inconclusive}, {"tolerance", v.tolerance},
                            {"detail", v.detail}});
    j["verdicts"] = verdicts;
    j["notes"] = r.notes;
    return j.dump(2);
}

VerifyReport report_from_json(const std::string& text) {
    const json j = json::parse(text);
    VerifyReport r;
    r.kind = j.at("kind").get<std::string>();
    r.scheme = j.at("scheme").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.gate_style = j.at("gate_style").get<std::string>();
    r.widths = j.at("widths").get<std::vector<std::size_t>>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.tolerances = j.at("tolerances").get<std::map<std::string, double>>();
    for (const auto& s : j.at("samples"))
        r.samples.push_back({s.at("width").get<std::size_t>(),
                             s.at("quantity_key").get<std::string>(), s.at("value").get<double>(),
                             s.at("seed").get<std::uint64_t>(), s.at("t").get<int>()});
    for (const auto& [k, f] : j.at("fits").items()) {
        ExponentFit e;
        e.quantity_key = f.at("quantity_key").get<std::string>();
        e.slope = f.at("slope").get<double>();
        e.std_error = f.at("std_error").get<double>();
        e.n_points = f.at("n_points").get<std::size_t>();
        e.per_seed_slopes = f.at("per_seed_slopes").get<std::vector<double>>();
        e.degenerate = f.at("degenerate").get<std::size_t>();
        e.inconclusive = f.at("inconclusive").get<bool>();
        r.fits[k] = std::move(e);
    }
    for (const auto& v : j.at("verdicts"))
        r.verdicts.push_back({v.at("name").get<std::string>(), v.at("passed").get<bool>(),
                              v.at("inconclusive").get<bool>(), v.at("tolerance").get<double>(),
                              v.at("detail").get<std::string>()});
    r.notes = j.at("notes").get<std::vector<std::string>>();
    return r;
}

std::string samples_to_csv(const std::vector<ScaleSample>& samples) {
    std::ostringstream os;
    os.precision(17);
    os << "width,seed,t,quantity_key,value\n";
    for (const auto& s : samples)
        os << s.width << ',' << s.seed << ',' << s.t << ',' << s.quantity_key << ',' << s.value
           << '\n';
    return os.str();
}

}  // namespace mupmoe
