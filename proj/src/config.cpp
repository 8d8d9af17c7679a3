#include "mupmoe/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mupmoe/rng.hpp"

namespace mupmoe {

namespace {

namespace pt = boost::property_tree;

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string num(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& where, const std::string& raw) {
    const std::string s = trim(raw);
    T v{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError(where + ": expected a number, got '" + raw + "'");
    return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& where, const std::string& raw,
                          const std::function<T(const std::string&)>& one) {
    std::vector<T> out;
    if (trim(raw).empty()) return out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw ConfigError(where + ": empty list item in '" + raw + "'");
        out.push_back(one(item));
    }
    return out;
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
    return s;
}

std::string size_str(const std::size_t& x) { return std::to_string(x); }
std::string u64_str(const std::uint64_t& x) { return std::to_string(x); }
std::string dbl_str(const double& x) { return num(x); }

// One handler per key; each parses the raw string into the RunConfig.
using Setter = std::function<void(RunConfig&, const std::string& where, const std::string& v)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
    using S = std::size_t;
    static const std::map<std::string, std::map<std::string, Setter>> table = {
        {"model",
         {
             {"width", [](RunConfig& c, auto& w, auto& v) { c.model.width = parse_number<S>(w, v); }},
             {"depth", [](RunConfig& c, auto& w, auto& v) { c.model.depth = parse_number<S>(w, v); }},
             {"head_dim", [](RunConfig& c, auto& w, auto& v) { c.model.head_dim = parse_number<S>(w, v); }},
             {"vocab_size", [](RunConfig& c, auto& w, auto& v) { c.model.vocab_size = parse_number<S>(w, v); }},
             {"seq_len", [](RunConfig& c, auto& w, auto& v) { c.model.seq_len = parse_number<S>(w, v); }},
             {"variant", [](RunConfig& c, auto&, auto& v) { c.model.variant = parse_variant(trim(v)); }},
             {"init_scale", [](RunConfig& c, auto& w, auto& v) { c.model.init_scale = parse_number<double>(w, v); }},
             {"seed", [](RunConfig& c, auto& w, auto& v) { c.model.seed = parse_number<std::uint64_t>(w, v); }},
         }},
        {"moe",
         {
             {"n_experts", [](RunConfig& c, auto& w, auto& v) { c.model.moe.n_experts = parse_number<S>(w, v); }},
             {"top_k", [](RunConfig& c, auto& w, auto& v) { c.model.moe.top_k = parse_number<S>(w, v); }},
             {"granularity", [](RunConfig& c, auto& w, auto& v) { c.model.moe.granularity = parse_number<S>(w, v); }},
             {"d_expert", [](RunConfig& c, auto& w, auto& v) { c.model.moe.d_expert = parse_number<S>(w, v); }},
             {"gate_style", [](RunConfig& c, auto&, auto& v) { c.model.moe.gate_style = parse_gate_style(trim(v)); }},
             {"z_loss_weight", [](RunConfig& c, auto& w, auto& v) { c.model.moe.z_loss_weight = parse_number<double>(w, v); }},
             {"load_balance_weight", [](RunConfig& c, auto& w, auto& v) { c.model.moe.load_balance_weight = parse_number<double>(w, v); }},
             {"moe_every", [](RunConfig& c, auto& w, auto& v) { c.model.moe.moe_every = parse_number<S>(w, v); }},
         }},
        {"scheme",
         {
             {"name", [](RunConfig& c, auto&, auto& v) { c.model.scheme = parse_scheme(trim(v)); }},
             {"base_lr", [](RunConfig& c, auto& w, auto& v) { c.model.base_lr = parse_number<double>(w, v); }},
         }},
        {"train",
         {
             {"batch_size", [](RunConfig& c, auto& w, auto& v) { c.train.batch_size = parse_number<S>(w, v); }},
             {"total_tokens", [](RunConfig& c, auto& w, auto& v) { c.train.total_tokens = parse_number<S>(w, v); }},
             {"log_every", [](RunConfig& c, auto& w, auto& v) { c.train.log_every = parse_number<S>(w, v); }},
             {"beta1", [](RunConfig& c, auto& w, auto& v) { c.train.adam.beta1 = parse_number<double>(w, v); }},
             {"beta2", [](RunConfig& c, auto& w, auto& v) { c.train.adam.beta2 = parse_number<double>(w, v); }},
             {"eps", [](RunConfig& c, auto& w, auto& v) { c.train.adam.eps = parse_number<double>(w, v); }},
             {"weight_decay", [](RunConfig& c, auto& w, auto& v) { c.train.adam.weight_decay = parse_number<double>(w, v); }},
             {"final_window", [](RunConfig& c, auto& w, auto& v) { c.train.final_window = parse_number<double>(w, v); }},
             {"corpus", [](RunConfig& c, auto&, auto& v) { c.corpus = trim(v); }},
         }},
        {"sweep",
         {
             {"kind", [](RunConfig& c, auto&, auto& v) { c.sweep_kind = parse_report_kind(trim(v)); }},
             {"lr_log2", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.lr_log2 = parse_list<double>(w, v, [&](const std::string& s) { return parse_number<double>(w, s); });
              }},
             {"widths", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.widths = parse_list<S>(w, v, [&](const std::string& s) { return parse_number<S>(w, s); });
              }},
             {"schemes", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.schemes = parse_list<Scheme>(w, v, [](const std::string& s) { return parse_scheme(s); });
              }},
             {"n_experts", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.n_experts = parse_list<S>(w, v, [&](const std::string& s) { return parse_number<S>(w, s); });
              }},
             {"granularity", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.granularities = parse_list<S>(w, v, [&](const std::string& s) { return parse_number<S>(w, s); });
              }},
             {"seeds", [](RunConfig& c, auto& w, auto& v) {
                  c.sweep.seeds = parse_list<std::uint64_t>(w, v, [&](const std::string& s) { return parse_number<std::uint64_t>(w, s); });
              }},
             {"out_dir", [](RunConfig& c, auto&, auto& v) { c.sweep.out_dir = trim(v); }},
         }},
        {"verify",
         {
             {"widths", [](RunConfig& c, auto& w, auto& v) {
                  c.verify.widths = parse_list<S>(w, v, [&](const std::string& s) { return parse_number<S>(w, s); });
              }},
             {"seeds", [](RunConfig& c, auto& w, auto& v) {
                  c.verify.seeds = parse_list<std::uint64_t>(w, v, [&](const std::string& s) { return parse_number<std::uint64_t>(w, s); });
              }},
             {"tol", [](RunConfig& c, auto& w, auto& v) { c.verify.tol = parse_number<double>(w, v); }},
             {"grad_tol", [](RunConfig& c, auto& w, auto& v) { c.verify.grad_tol = parse_number<double>(w, v); }},
             {"cov_tol", [](RunConfig& c, auto& w, auto& v) { c.verify.cov_tol = parse_number<double>(w, v); }},
             {"cov_coord_tol", [](RunConfig& c, auto& w, auto& v) { c.verify.cov_coord_tol = parse_number<double>(w, v); }},
             {"batch_size", [](RunConfig& c, auto& w, auto& v) { c.verify.batch_size = parse_number<S>(w, v); }},
             {"seq_len", [](RunConfig& c, auto& w, auto& v) { c.verify.seq_len = parse_number<S>(w, v); }},
         }},
    };
    return table;
}

}  // namespace

void sync_sweep(RunConfig& cfg) {
    cfg.sweep.base = cfg.model;
    cfg.sweep.train = cfg.train;
}

RunConfig parse_config(const std::string& text) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
    }
    RunConfig cfg;
    const auto& table = schema();
    for (const auto& [section, body] : tree) {
        auto sec = table.find(section);
        if (body.empty())
            throw ConfigError("config: key '" + section + "' outside any section");
        if (sec == table.end())
            throw ConfigError("config: unknown section [" + section + "]");
        for (const auto& [key, node] : body) {
            auto it = sec->second.find(key);
            const std::string where = section + "." + key;
            if (it == sec->second.end()) throw ConfigError("config: unknown key " + where);
            try {
                it->second(cfg, where, node.data());
            } catch (const ConfigError&) {
                throw;
            } catch (const std::invalid_argument& e) {
                throw ConfigError(where + ": " + e.what());
            }
        }
    }
    try {
        cfg.model.validate();
        cfg.sweep.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    sync_sweep(cfg);
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string resolved_text(const RunConfig& c) {
    const auto& m = c.model;
    std::ostringstream os;
    os << "[model]\n"
       << "width = " << m.width << "\n"
       << "depth = " << m.depth << "\n"
       << "head_dim = " << m.head_dim << "\n"
       << "vocab_size = " << m.vocab_size << "\n"
       << "seq_len = " << m.seq_len << "\n"
       << "variant = " << to_string(m.variant) << "\n"
       << "init_scale = " << num(m.init_scale) << "\n"
       << "seed = " << m.seed << "\n\n"
       << "[moe]\n"
       << "n_experts = " << m.moe.n_experts << "\n"
       << "top_k = " << m.moe.top_k << "\n"
       << "granularity = " << m.moe.granularity << "\n"
       << "d_expert = " << m.moe.d_expert << "\n"
       << "gate_style = " << to_string(m.moe.gate_style) << "\n"
       << "z_loss_weight = " << num(m.moe.z_loss_weight) << "\n"
       << "load_balance_weight = " << num(m.moe.load_balance_weight) << "\n"
       << "moe_every = " << m.moe.moe_every << "\n\n"
       << "[scheme]\n"
       << "name = " << to_string(m.scheme) << "\n"
       << "base_lr = " << num(m.base_lr) << "\n\n"
       << "[train]\n"
       << "batch_size = " << c.train.batch_size << "\n"
       << "total_tokens = " << c.train.total_tokens << "\n"
       << "log_every = " << c.train.log_every << "\n"
       << "beta1 = " << num(c.train.adam.beta1) << "\n"
       << "beta2 = " << num(c.train.adam.beta2) << "\n"
       << "eps = " << num(c.train.adam.eps) << "\n"
       << "weight_decay = " << num(c.train.adam.weight_decay) << "\n"
       << "final_window = " << num(c.train.final_window) << "\n"
       << "corpus = " << c.corpus << "\n\n"
       << "[sweep]\n"
       << "kind = " << to_string(c.sweep_kind) << "\n"
       << "lr_log2 = " << join<double>(c.sweep.lr_log2, dbl_str) << "\n"
       << "widths = " << join<std::size_t>(c.sweep.widths, size_str) << "\n"
       << "schemes = "
       << join<Scheme>(c.sweep.schemes, [](const Scheme& s) { return to_string(s); }) << "\n"
       << "n_experts = " << join<std::size_t>(c.sweep.n_experts, size_str) << "\n"
       << "granularity = " << join<std::size_t>(c.sweep.granularities, size_str) << "\n"
       << "seeds = " << join<std::uint64_t>(c.sweep.seeds, u64_str) << "\n"
       << "out_dir = " << c.sweep.out_dir.string() << "\n\n"
       << "[verify]\n"
       << "widths = " << join<std::size_t>(c.verify.widths, size_str) << "\n"
       << "seeds = " << join<std::uint64_t>(c.verify.seeds, u64_str) << "\n"
       << "tol = " << num(c.verify.tol) << "\n"
       << "grad_tol = " << num(c.verify.grad_tol) << "\n"
       << "cov_tol = " << num(c.verify.cov_tol) << "\n"
       << "cov_coord_tol = " << num(c.verify.cov_coord_tol) << "\n"
       << "batch_size = " << c.verify.batch_size << "\n"
       << "seq_len = " << c.verify.seq_len << "\n";
    return os.str();
}

std::string config_hash(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(resolved_text(cfg))));
    return buf;
}

std::string model_config_text(const ModelConfig& m) {
    std::ostringstream os;
    os << "width=" << m.width << ";depth=" << m.depth << ";head_dim=" << m.head_dim
       << ";vocab=" << m.vocab_size << ";seq=" << m.seq_len << ";variant=" << to_string(m.variant)
       << ";experts=" << m.moe.n_experts << ";top_k=" << m.moe.top_k
       << ";G=" << m.moe.granularity << ";d_expert=" << m.moe.d_expert
       << ";gate=" << to_string(m.moe.gate_style) << ";z=" << num(m.moe.z_loss_weight)
       << ";lb=" << num(m.moe.load_balance_weight) << ";moe_every=" << m.moe.moe_every
       << ";scheme=" << to_string(m.scheme) << ";base_lr=" << num(m.base_lr)
       << ";init_scale=" << num(m.init_scale) << ";seed=" << m.seed;
    return os.str();
}

std::filesystem::path corpus_path(const RunConfig& cfg) {
    if (!cfg.corpus.empty()) return cfg.corpus;
    if (const char* env = std::getenv(kCorpusEnv); env && *env) return env;
    throw ConfigError(std::string("no corpus: set train.corpus or ") + kCorpusEnv);
}

}  // namespace mupmoe
