#pragma once

// Experiment orchestration: the sample-size sweep, the 16-cell SE-VAE
// ablation grid, CSV/JSON persistence with resume, and SVG plots.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevae/datagen.hpp"
#include "sevae/error.hpp"
#include "sevae/metrics.hpp"
#include "sevae/models.hpp"
#include "sevae/train.hpp"

namespace sevae::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kMetricNames[] = {"mig", "dci_d", "dci_c", "dci_i", "sap", "perm_align"};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---- configuration ---------------------------------------------------------

struct ModelEntry {
    std::string name;  // label used in run ids and plots
    models::ModelConfig config;
};

struct AblationConfig {
    double beta_off = 1.0, beta_on = 4.0;
    double gamma_off = 0.0, gamma_on = 5.0;
    double alpha_off = 0.0, alpha_on = 10.0;
    std::size_t anneal_warmup = 500;
    std::vector<std::size_t> sample_sizes{5000};
    std::vector<std::string> components{"beta", "gamma", "alpha", "anneal"};
};

struct ExperimentConfig {
    datagen::GenSpec generator;
    double train_fraction = 0.5;
    std::vector<ModelEntry> models;
    std::vector<std::size_t> sample_sizes{2000, 5000, 10000};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    models::TrainConfig train;
    metrics::MetricOptions metrics;
    AblationConfig ablation;
    std::string output_dir = "results";

    std::size_t train_rows() const {
        return static_cast<std::size_t>(
            std::llround(train_fraction * static_cast<double>(generator.N)));
    }

    void validate() const {
        generator.validate();
        if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
            throw ConfigError("train_fraction must lie strictly between 0 and 1");
        }
        if (models.empty()) throw ConfigError("model grid is empty");
        if (sample_sizes.empty()) throw ConfigError("sample_sizes is empty");
        if (seeds.empty()) throw ConfigError("seeds is empty");
        std::set<std::string> names;
        for (const auto& m : models) {
            if (m.name.empty() || m.name.find_first_of(",|\"\n") != std::string::npos) {
                throw ConfigError("model name '" + m.name + "' is empty or contains , | \" or newline");
            }
            if (!names.insert(m.name).second) throw ConfigError("duplicate model name '" + m.name + "'");
            if (m.config.arch.K != generator.K || m.config.arch.J != generator.J) {
                throw DimensionError("model '" + m.name + "' has K=" + std::to_string(m.config.arch.K) +
                                     ", J=" + std::to_string(m.config.arch.J) + " but the generator has K=" +
                                     std::to_string(generator.K) + ", J=" + std::to_string(generator.J));
            }
            m.config.arch.validate();
        }
        const std::size_t cap = train_rows();
        auto check_sizes = [&](const std::vector<std::size_t>& sizes, const char* what) {
            for (std::size_t n : sizes) {
                if (n < 2 || n > cap) {
                    throw ConfigError(std::string(what) + " " + std::to_string(n) + " outside [2, " +
                                      std::to_string(cap) + "] (training split size)");
                }
            }
        };
        check_sizes(sample_sizes, "sample size");
        check_sizes(ablation.sample_sizes, "ablation sample size");
        if (generator.N - cap < 100) throw ConfigError("evaluation split has fewer than 100 rows");
        if (train.batch < 2) throw ConfigError("train.batch must be >= 2");
        if (ablation.anneal_warmup == 0) throw ConfigError("ablation.anneal_warmup must be >= 1");
    }
};

inline void to_json(json& j, const ExperimentConfig& c) {
    json ms = json::array();
    for (const auto& m : c.models) {
        json mj = m.config;
        mj["name"] = m.name;
        ms.push_back(std::move(mj));
    }
    const auto& a = c.ablation;
    j = json{{"generator", c.generator},
             {"train_fraction", c.train_fraction},
             {"models", ms},
             {"sample_sizes", c.sample_sizes},
             {"seeds", c.seeds},
             {"train", c.train},
             {"metrics",
              {{"bins", c.metrics.bins},
               {"lasso_lambda", c.metrics.lasso_lambda},
               {"split_seed", c.metrics.split_seed},
               {"include_nuisance", c.metrics.include_nuisance}}},
             {"ablation",
              {{"beta", {a.beta_off, a.beta_on}},
               {"gamma", {a.gamma_off, a.gamma_on}},
               {"alpha", {a.alpha_off, a.alpha_on}},
               {"anneal_warmup", a.anneal_warmup},
               {"sample_sizes", a.sample_sizes},
               {"components", a.components}}},
             {"output_dir", c.output_dir}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
    const ExperimentConfig d;
    c.generator = j.value("generator", d.generator);
    c.train_fraction = j.value("train_fraction", d.train_fraction);
    c.sample_sizes = j.value("sample_sizes", d.sample_sizes);
    c.seeds = j.value("seeds", d.seeds);
    c.train = j.value("train", d.train);
    c.output_dir = j.value("output_dir", d.output_dir);
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        c.metrics.bins = m.value("bins", d.metrics.bins);
        c.metrics.lasso_lambda = m.value("lasso_lambda", d.metrics.lasso_lambda);
        c.metrics.split_seed = m.value("split_seed", d.metrics.split_seed);
        c.metrics.include_nuisance = m.value("include_nuisance", d.metrics.include_nuisance);
    }
    c.models.clear();
    json default_models = json::array();
    for (auto k : models::kAllKinds) default_models.push_back(json{{"kind", std::string(models::to_string(k))}});
    const json models_j = j.value("models", default_models);
    for (json mj : models_j) {
        // Architecture size follows the generator unless stated.
        if (!mj.contains("K")) mj["K"] = c.generator.K;
        if (!mj.contains("J")) mj["J"] = c.generator.J;
        ModelEntry e;
        e.config = mj.get<models::ModelConfig>();
        e.name = mj.value("name", std::string(models::to_string(e.config.kind)));
        c.models.push_back(std::move(e));
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        auto pair = [&](const char* key, double& off, double& on) {
            if (!a.contains(key)) return;
            const auto v = a.at(key).get<std::vector<double>>();
            if (v.size() != 2) throw ConfigError(std::string("ablation.") + key + " must be [inactive, active]");
            off = v[0];
            on = v[1];
        };
        pair("beta", c.ablation.beta_off, c.ablation.beta_on);
        pair("gamma", c.ablation.gamma_off, c.ablation.gamma_on);
        pair("alpha", c.ablation.alpha_off, c.ablation.alpha_on);
        c.ablation.anneal_warmup = a.value("anneal_warmup", d.ablation.anneal_warmup);
        c.ablation.sample_sizes = a.value("sample_sizes", d.ablation.sample_sizes);
        c.ablation.components = a.value("components", d.ablation.components);
    }
}

/// Parses and validates a config document. Malformed JSON or wrong field
/// types surface as ConfigError.
inline ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    try {
        c = j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// Hash of the normalized config document (object keys sorted).
inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(json(c).dump())); }

// ---- data ------------------------------------------------------------------

/// First n rows of a seeded shuffle, so smaller draws nest inside larger ones.
inline datagen::Dataset subsample(const datagen::Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n > ds.rows()) {
        throw ConfigError("subsample: requested " + std::to_string(n) + " rows from " +
                          std::to_string(ds.rows()));
    }
    std::seed_seq seq{seed, std::uint64_t{0x5b5a}};
    nn::Rng rng(seq);
    const auto idx = datagen::shuffled_indices(ds.rows(), rng());
    return ds.select(std::span<const std::size_t>(idx).first(n));
}

struct Splits {
    datagen::Dataset train, eval;
};

inline Splits make_splits(const ExperimentConfig& cfg) {
    const auto ds = datagen::generate(cfg.generator);
    auto [tr, ev] = datagen::split(ds, cfg.train_fraction, cfg.generator.seed ^ 0x59117ULL);
    return {std::move(tr), std::move(ev)};
}

// ---- reports ---------------------------------------------------------------

struct MetricsReport {
    std::string run_id;
    std::string model;
    std::size_t K = 0, J = 0, N = 0;
    std::uint64_t seed = 0;
    metrics::MetricScores scores;
    std::string status = "ok";  // "ok" or "error"
};

inline std::string results_header() {
    return "run_id,model,K,J,N,seed,mig,dci_d,dci_c,dci_i,sap,perm_align,status";
}

inline std::string to_csv_row(const MetricsReport& r) {
    std::ostringstream os;
    const auto& s = r.scores;
    os << r.run_id << "," << r.model << "," << r.K << "," << r.J << "," << r.N << "," << r.seed;
    for (double v : {s.mig, s.dci_d, s.dci_c, s.dci_i, s.sap, s.perm_align}) {
        os << "," << datagen::format_double(v);
    }
    os << "," << r.status;
    return os.str();
}

inline MetricsReport parse_csv_row(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 13) throw ConfigError("results row has " + std::to_string(f.size()) + " fields: " + line);
    MetricsReport r;
    try {
        r.run_id = f[0];
        r.model = f[1];
        r.K = std::stoul(f[2]);
        r.J = std::stoul(f[3]);
        r.N = std::stoul(f[4]);
        r.seed = std::stoull(f[5]);
        double* dst[] = {&r.scores.mig, &r.scores.dci_d, &r.scores.dci_c,
                         &r.scores.dci_i, &r.scores.sap, &r.scores.perm_align};
        for (std::size_t i = 0; i < 6; ++i) *dst[i] = std::strtod(f[6 + i].c_str(), nullptr);
    } catch (const std::logic_error&) {
        throw ConfigError("malformed results row: " + line);
    }
    r.status = f[12];
    // A line cut off inside the status field still has 13 fields.
    if (r.status != "ok" && r.status != "error") throw ConfigError("malformed results row: " + line);
    return r;
}

inline std::vector<MetricsReport> read_results(const fs::path& path) {
    std::vector<MetricsReport> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    if (!std::getline(in, line)) return rows;
    if (line != results_header()) throw ConfigError(path.string() + " is not a results table");
    std::vector<std::string> lines;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            rows.push_back(parse_csv_row(lines[i]));
        } catch (const ConfigError&) {
            // A run interrupted mid-write leaves a partial last line; it is rerun.
            if (i + 1 != lines.size()) throw;
        }
    }
    return rows;
}

inline double metric_value(const metrics::MetricScores& s, std::string_view name) {
    if (name == "mig") return s.mig;
    if (name == "dci_d") return s.dci_d;
    if (name == "dci_c") return s.dci_c;
    if (name == "dci_i") return s.dci_i;
    if (name == "sap") return s.sap;
    if (name == "perm_align") return s.perm_align;
    throw ConfigError("unknown metric '" + std::string(name) + "'");
}

inline void sort_rows(std::vector<MetricsReport>& rows) {
    std::sort(rows.begin(), rows.end(), [](const MetricsReport& a, const MetricsReport& b) {
        return std::tie(a.model, a.N, a.seed, a.run_id) < std::tie(b.model, b.N, b.seed, b.run_id);
    });
}

inline void write_results(const fs::path& path, std::vector<MetricsReport> rows) {
    sort_rows(rows);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out << results_header() << "\n";
        for (const auto& r : rows) out << to_csv_row(r) << "\n";
    }
    fs::rename(tmp, path);
}

// ---- single run ------------------------------------------------------------

struct RunSpec {
    std::string run_id;
    std::string model_name;
    models::ModelConfig model;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::uint64_t train_seed = 0;
};

inline std::string run_id(std::string_view model, std::size_t n, std::uint64_t seed) {
    return std::string(model) + "|n=" + std::to_string(n) + "|seed=" + std::to_string(seed);
}

/// Training seed owned by one run, a function of its key and the seed only.
inline std::uint64_t derive_seed(std::string_view key, std::uint64_t seed) {
    std::seed_seq seq{fnv1a(key), seed};
    std::uint32_t words[2];
    seq.generate(std::begin(words), std::end(words));
    return (std::uint64_t{words[0]} << 32) | words[1];
}

struct RunOutcome {
    MetricsReport report;
    json document;
};

inline RunOutcome execute_run(const RunSpec& spec, const Splits& data, const ExperimentConfig& cfg,
                              const std::string& hash) {
    RunOutcome out;
    auto& r = out.report;
    r.run_id = spec.run_id;
    r.model = spec.model_name;
    r.K = spec.model.arch.K;
    r.J = spec.model.arch.J;
    r.N = spec.n;
    r.seed = spec.seed;
    json doc{{"run_id", spec.run_id},
             {"model", spec.model},
             {"N", spec.n},
             {"seed", spec.seed},
             {"train_seed", spec.train_seed},
             {"config_hash", hash},
             {"dci_probe", {{"kind", "lasso"}, {"lambda", cfg.metrics.lasso_lambda}}},
             {"mig_bins", cfg.metrics.bins},
             {"include_nuisance", cfg.metrics.include_nuisance}};
    try {
        const auto sub = subsample(data.train, spec.n, spec.seed);
        models::TrainConfig tc = cfg.train;
        tc.seed = spec.train_seed;
        auto trained = models::train(spec.model, sub.X, tc);
        const auto codes = trained.model.encode(data.eval.X);
        const Matrix all = models::latent_means(codes, cfg.metrics.include_nuisance);
        const Matrix aligned = models::latent_means(codes, false);
        r.scores = metrics::score_all(all, aligned, data.eval.factors, cfg.metrics);
        const auto& last = trained.history.empty() ? models::LossBreakdown{} : trained.history.back();
        doc["final_loss"] = {{"recon", last.recon}, {"kl", last.kl}, {"tc", last.tc},
                             {"ortho", last.ortho}, {"adv", last.adv}, {"total", last.total}};
        r.status = "ok";
    } catch (const std::exception& e) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        r.scores = {nan, nan, nan, nan, nan, nan};
        r.status = "error";
        doc["error"] = e.what();
    }
    doc["status"] = r.status;
    doc["metrics"] = {{"mig", r.scores.mig},   {"dci_d", r.scores.dci_d}, {"dci_c", r.scores.dci_c},
                      {"dci_i", r.scores.dci_i}, {"sap", r.scores.sap},     {"perm_align", r.scores.perm_align}};
    out.document = std::move(doc);
    return out;
}

// ---- run pool --------------------------------------------------------------

/// Worker count: SEVAE_THREADS if set, else the requested value, else the
/// hardware concurrency.
inline std::size_t resolve_threads(std::size_t requested) {
    if (const char* env = std::getenv("SEVAE_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw ConfigError(std::string("SEVAE_THREADS must be a positive integer, got '") + env + "'");
        return static_cast<std::size_t>(v);
    }
    if (requested > 0) return requested;
    return std::max(1u, std::thread::hardware_concurrency());
}

inline std::string file_stem(std::string_view run_id) {
    std::string s(run_id);
    for (char& c : s) {
        if (c == '|' || c == '=' || c == '[' || c == ']' || c == '/') c = '_';
    }
    return s;
}

/// Executes the runs not yet present in `results_path`, appending and flushing
/// each row as it completes, then rewrites the table in sorted order.
inline std::vector<MetricsReport> run_pool(const std::vector<RunSpec>& runs, const Splits& data,
                                           const ExperimentConfig& cfg, const fs::path& results_path,
                                           std::size_t threads,
                                           const std::function<void(const MetricsReport&)>& on_done = {}) {
    fs::create_directories(results_path.parent_path().empty() ? fs::path(".") : results_path.parent_path());
    const fs::path runs_dir = results_path.parent_path() / "runs";
    fs::create_directories(runs_dir);

    std::vector<MetricsReport> rows = read_results(results_path);
    std::set<std::string> done;
    for (const auto& r : rows) done.insert(r.run_id);
    std::vector<const RunSpec*> todo;
    for (const auto& r : runs) {
        if (!done.count(r.run_id)) todo.push_back(&r);
    }
    // Rewrite before appending so a partial last line never sits mid-file.
    write_results(results_path, rows);

    const std::string hash = config_hash(cfg);
    std::mutex mu;
    std::ofstream sink(results_path, std::ios::app);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < todo.size(); i = next++) {
            RunOutcome o = execute_run(*todo[i], data, cfg, hash);
            std::lock_guard lock(mu);
            std::ofstream(runs_dir / (file_stem(o.report.run_id) + ".json")) << o.document.dump(2) << "\n";
            sink << to_csv_row(o.report) << "\n";
            sink.flush();
            rows.push_back(o.report);
            if (on_done) on_done(o.report);
        }
    };
    const std::size_t n_threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(todo.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    sink.close();

    write_results(results_path, rows);
    sort_rows(rows);
    return rows;
}

// ---- sweep -----------------------------------------------------------------

inline std::vector<RunSpec> sweep_runs(const ExperimentConfig& cfg) {
    std::vector<RunSpec> out;
    for (const auto& m : cfg.models) {
        for (std::size_t n : cfg.sample_sizes) {
            for (std::uint64_t seed : cfg.seeds) {
                RunSpec r;
                r.run_id = run_id(m.name, n, seed);
                r.model_name = m.name;
                r.model = m.config;
                r.n = n;
                r.seed = seed;
                r.train_seed = derive_seed(r.run_id, seed);
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

inline std::vector<MetricsReport> run_sweep(const ExperimentConfig& cfg, std::size_t threads = 0,
                                            const std::function<void(const MetricsReport&)>& on_done = {}) {
    cfg.validate();
    const Splits data = make_splits(cfg);
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << json(cfg).dump(2) << "\n";
    return run_pool(sweep_runs(cfg), data, cfg, out_dir / "results.csv", resolve_threads(threads), on_done);
}

// ---- ablation --------------------------------------------------------------

enum class Flag : unsigned { beta = 0, gamma = 1, alpha = 2, anneal = 3 };
inline constexpr Flag kAllFlags[] = {Flag::beta, Flag::gamma, Flag::alpha, Flag::anneal};

inline std::string_view to_string(Flag f) {
    switch (f) {
        case Flag::beta: return "beta";
        case Flag::gamma: return "gamma";
        case Flag::alpha: return "alpha";
        case Flag::anneal: return "anneal";
    }
    return "?";
}

inline Flag parse_flag(std::string_view s) {
    for (Flag f : kAllFlags) {
        if (to_string(f) == s) return f;
    }
    throw ConfigError("unknown ablation component '" + std::string(s) + "'");
}

/// The component label reported in ablation.csv.
inline std::string_view component_name(Flag f) {
    switch (f) {
        case Flag::beta: return "kl_beta";
        case Flag::gamma: return "total_correlation";
        case Flag::alpha: return "orthogonality";
        case Flag::anneal: return "kl_annealing";
    }
    return "?";
}

struct AblationCell {
    unsigned bits = 0;  // bit i set: flag i active

    bool active(Flag f) const { return (bits >> static_cast<unsigned>(f)) & 1u; }
    AblationCell toggled(Flag f) const { return {bits ^ (1u << static_cast<unsigned>(f))}; }

    /// Stable label, e.g. "b1g0a0n1".
    std::string label() const {
        std::string s;
        const char tags[] = {'b', 'g', 'a', 'n'};
        for (Flag f : kAllFlags) {
            s += tags[static_cast<unsigned>(f)];
            s += active(f) ? '1' : '0';
        }
        return s;
    }

    models::SevaeConfig apply(models::SevaeConfig arch, const AblationConfig& a) const {
        arch.beta = active(Flag::beta) ? a.beta_on : a.beta_off;
        arch.gamma = active(Flag::gamma) ? a.gamma_on : a.gamma_off;
        arch.alpha = active(Flag::alpha) ? a.alpha_on : a.alpha_off;
        arch.anneal.enabled = active(Flag::anneal);
        arch.anneal.warmup_steps = a.anneal_warmup;
        return arch;
    }
};

inline std::vector<AblationCell> ablation_cells() {
    std::vector<AblationCell> out;
    for (unsigned b = 0; b < 16; ++b) out.push_back({b});
    return out;
}

/// The 8 (inactive, active) cell pairs that differ only in `f`.
inline std::vector<std::pair<AblationCell, AblationCell>> ablation_pairs(Flag f) {
    std::vector<std::pair<AblationCell, AblationCell>> out;
    for (const auto& c : ablation_cells()) {
        if (!c.active(f)) out.emplace_back(c, c.toggled(f));
    }
    return out;
}

/// Components requested for the delta table. A component listed twice would
/// pair cells with themselves and is rejected.
inline std::vector<Flag> resolve_components(const std::vector<std::string>& names) {
    if (names.empty()) throw ConfigError("ablation: no components requested");
    std::vector<Flag> out;
    for (const auto& n : names) {
        const Flag f = parse_flag(n);
        if (std::find(out.begin(), out.end(), f) != out.end()) {
            throw ConfigError("ablation: component '" + n + "' paired with itself");
        }
        out.push_back(f);
    }
    return out;
}

struct AblationDelta {
    std::string component;
    std::size_t N = 0;
    std::string metric;
    double mean = 0.0, sd = 0.0;
    std::size_t pairs = 0;
};

inline std::string ablation_model_name(AblationCell c) { return "sevae[" + c.label() + "]"; }

inline std::vector<RunSpec> ablation_runs(const ExperimentConfig& cfg) {
    models::SevaeConfig base;
    base.K = cfg.generator.K;
    base.J = cfg.generator.J;
    for (const auto& m : cfg.models) {
        if (m.config.kind == models::ModelKind::sevae) {
            base = m.config.arch;
            break;
        }
    }
    std::vector<RunSpec> out;
    for (std::size_t n : cfg.ablation.sample_sizes) {
        for (std::uint64_t seed : cfg.seeds) {
            // Cells share initialization and sampling noise at a given (N, seed).
            const std::uint64_t train_seed = derive_seed(run_id("sevae-ablation", n, seed), seed);
            for (const auto& cell : ablation_cells()) {
                RunSpec r;
                r.model_name = ablation_model_name(cell);
                r.run_id = run_id(r.model_name, n, seed);
                r.model.kind = models::ModelKind::sevae;
                r.model.arch = cell.apply(base, cfg.ablation);
                r.n = n;
                r.seed = seed;
                r.train_seed = train_seed;
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

/// Mean and sample SD of the metric change when switching `f` on, over the
/// 8 pairs per (N, seed) and all seeds. Error rows are skipped.
inline std::vector<AblationDelta> ablation_deltas(const std::vector<MetricsReport>& rows,
                                                  const std::vector<Flag>& components) {
    std::map<std::tuple<std::string, std::size_t, std::uint64_t>, const MetricsReport*> index;
    std::set<std::size_t> sizes;
    std::set<std::uint64_t> seeds;
    for (const auto& r : rows) {
        index[{r.model, r.N, r.seed}] = &r;
        sizes.insert(r.N);
        seeds.insert(r.seed);
    }
    std::vector<AblationDelta> out;
    for (Flag f : components) {
        for (std::size_t n : sizes) {
            for (const char* metric : kMetricNames) {
                std::vector<double> deltas;
                for (std::uint64_t seed : seeds) {
                    for (const auto& [off, on] : ablation_pairs(f)) {
                        auto a = index.find({ablation_model_name(off), n, seed});
                        auto b = index.find({ablation_model_name(on), n, seed});
                        if (a == index.end() || b == index.end()) continue;
                        if (a->second->status != "ok" || b->second->status != "ok") continue;
                        deltas.push_back(metric_value(b->second->scores, metric) -
                                         metric_value(a->second->scores, metric));
                    }
                }
                AblationDelta d{std::string(component_name(f)), n, metric, 0.0, 0.0, deltas.size()};
                if (!deltas.empty()) {
                    for (double v : deltas) d.mean += v;
                    d.mean /= static_cast<double>(deltas.size());
                }
                if (deltas.size() > 1) {
                    double ss = 0.0;
                    for (double v : deltas) ss += (v - d.mean) * (v - d.mean);
                    d.sd = std::sqrt(ss / static_cast<double>(deltas.size() - 1));
                }
                out.push_back(std::move(d));
            }
        }
    }
    return out;
}

inline void write_ablation(const fs::path& path, const std::vector<AblationDelta>& deltas) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << "component,N,metric,mean_delta,sd_delta,pairs\n";
    for (const auto& d : deltas) {
        out << d.component << "," << d.N << "," << d.metric << "," << datagen::format_double(d.mean) << ","
            << datagen::format_double(d.sd) << "," << d.pairs << "\n";
    }
}

struct AblationResult {
    std::vector<MetricsReport> runs;
    std::vector<AblationDelta> deltas;
};

inline AblationResult run_ablation(const ExperimentConfig& cfg, std::size_t threads = 0,
                                   const std::function<void(const MetricsReport&)>& on_done = {}) {
    cfg.validate();
    const auto components = resolve_components(cfg.ablation.components);
    const Splits data = make_splits(cfg);
    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << json(cfg).dump(2) << "\n";
    AblationResult res;
    res.runs = run_pool(ablation_runs(cfg), data, cfg, out_dir / "ablation_runs.csv", resolve_threads(threads),
                        on_done);
    res.deltas = ablation_deltas(res.runs, components);
    write_ablation(out_dir / "ablation.csv", res.deltas);
    return res;
}

// ---- plots -----------------------------------------------------------------

struct SeriesPoint {
    std::size_t N = 0;
    double mean = 0.0, sd = 0.0;
    std::size_t count = 0;
};

/// Per-model mean and sample SD over seeds for one metric; error rows skipped.
inline std::map<std::string, std::vector<SeriesPoint>> summarize(const std::vector<MetricsReport>& rows,
                                                                 std::string_view metric) {
    std::map<std::string, std::map<std::size_t, std::vector<double>>> acc;
    for (const auto& r : rows) {
        if (r.status != "ok") continue;
        acc[r.model][r.N].push_back(metric_value(r.scores, metric));
    }
    std::map<std::string, std::vector<SeriesPoint>> out;
    for (const auto& [model, by_n] : acc) {
        for (const auto& [n, vals] : by_n) {
            SeriesPoint p{n, 0.0, 0.0, vals.size()};
            for (double v : vals) p.mean += v;
            p.mean /= static_cast<double>(vals.size());
            if (vals.size() > 1) {
                double ss = 0.0;
                for (double v : vals) ss += (v - p.mean) * (v - p.mean);
                p.sd = std::sqrt(ss / static_cast<double>(vals.size() - 1));
            }
            out[model].push_back(p);
        }
    }
    return out;
}

inline std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string svg_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// Line chart with log-scaled x, one mean line and shaded +-1 SD band per model.
inline std::string render_metric_svg(const std::map<std::string, std::vector<SeriesPoint>>& series,
                                     std::string_view metric) {
    constexpr double W = 640, H = 420, left = 64, right = 150, top = 36, bottom = 52;
    const double pw = W - left - right, ph = H - top - bottom;

    std::set<std::size_t> xs;
    double lo = 0.0, hi = 1.0;
    for (const auto& [_, pts] : series) {
        for (const auto& p : pts) {
            xs.insert(p.N);
            lo = std::min(lo, p.mean - p.sd);
            hi = std::max(hi, p.mean + p.sd);
        }
    }
    const double lx0 = std::log10(static_cast<double>(*xs.begin()));
    const double lx1 = std::log10(static_cast<double>(*xs.rbegin()));
    const double span_x = lx1 > lx0 ? lx1 - lx0 : 1.0;
    auto px = [&](std::size_t n) { return left + (std::log10(static_cast<double>(n)) - lx0) / span_x * pw; };
    auto py = [&](double v) { return top + (hi - v) / (hi - lo) * ph; };

    static constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 "
       << W << " " << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
       << "<text x=\"" << svg_number(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
       << xml_escape(metric) << "</text>\n";

    // Axes, gridlines and ticks.
    os << "<g stroke=\"#888\" stroke-width=\"1\">\n"
       << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
       << "\"/>\n"
       << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\"/>\n"
       << "</g>\n";
    for (int i = 0; i <= 5; ++i) {
        const double v = lo + (hi - lo) * i / 5.0;
        const double y = py(v);
        os << "<line x1=\"" << left << "\" y1=\"" << svg_number(y) << "\" x2=\"" << left + pw << "\" y2=\""
           << svg_number(y) << "\" stroke=\"#eee\"/>\n"
           << "<text x=\"" << left - 6 << "\" y=\"" << svg_number(y + 4) << "\" text-anchor=\"end\">"
           << svg_number(v) << "</text>\n";
    }
    for (std::size_t n : xs) {
        const double x = px(n);
        os << "<line x1=\"" << svg_number(x) << "\" y1=\"" << top + ph << "\" x2=\"" << svg_number(x) << "\" y2=\""
           << top + ph + 5 << "\" stroke=\"#888\"/>\n"
           << "<text x=\"" << svg_number(x) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << n
           << "</text>\n";
    }
    os << "<text x=\"" << svg_number(left + pw / 2) << "\" y=\"" << H - 12
       << "\" text-anchor=\"middle\">training samples (log scale)</text>\n";

    std::size_t color = 0;
    double legend_y = top + 10;
    for (const auto& [model, pts] : series) {
        const char* col = palette[color++ % std::size(palette)];
        os << "<g>\n<polygon fill=\"" << col << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
        for (const auto& p : pts) os << svg_number(px(p.N)) << "," << svg_number(py(p.mean + p.sd)) << " ";
        for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
            os << svg_number(px(it->N)) << "," << svg_number(py(it->mean - it->sd)) << " ";
        }
        os << "\"/>\n<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
        for (const auto& p : pts) os << svg_number(px(p.N)) << "," << svg_number(py(p.mean)) << " ";
        os << "\"/>\n";
        for (const auto& p : pts) {
            os << "<circle cx=\"" << svg_number(px(p.N)) << "\" cy=\"" << svg_number(py(p.mean))
               << "\" r=\"3\" fill=\"" << col << "\"/>\n";
        }
        os << "</g>\n";
        const double lx = left + pw + 16;
        os << "<rect x=\"" << lx << "\" y=\"" << svg_number(legend_y - 9) << "\" width=\"14\" height=\"10\" fill=\""
           << col << "\"/>\n"
           << "<text x=\"" << lx + 20 << "\" y=\"" << svg_number(legend_y) << "\">" << xml_escape(model)
           << "</text>\n";
        legend_y += 18;
    }
    os << "</svg>\n";
    return os.str();
}

/// Writes metric_<name>.svg for each of the six metrics; returns the paths.
inline std::vector<fs::path> emit_plots(const std::vector<MetricsReport>& rows, const fs::path& out_dir) {
    if (rows.empty()) throw ConfigError("plot: results table is empty");
    std::set<std::size_t> sizes;
    std::set<std::string> names;
    for (const auto& r : rows) {
        if (r.status != "ok") continue;
        sizes.insert(r.N);
        names.insert(r.model);
    }
    if (names.empty()) throw ConfigError("plot: no successful runs in the results table");
    if (sizes.size() < 2) throw ConfigError("plot: need at least 2 sample sizes");
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (const char* metric : kMetricNames) {
        const fs::path p = out_dir / (std::string("metric_") + metric + ".svg");
        std::ofstream out(p, std::ios::trunc);
        if (!out) throw Error("cannot write " + p.string());
        out << render_metric_svg(summarize(rows, metric), metric);
        written.push_back(p);
    }
    return written;
}

}  // namespace sevae::harness
