#include <gtest/gtest.h>

#include <expat.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "sevae/harness.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace H = sevae::harness;
using nlohmann::json;
using sevae::testing::TempDir;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::size_t count_lines(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

json tiny_json(const fs::path& out) {
    return json{{"generator", {{"K", 2}, {"J", 3}, {"N", 600}, {"seed", 3}}},
                {"models",
                 {{{"kind", "sevae"}, {"hidden", {8}}, {"d_c", 2}}, {{"kind", "vae"}, {"hidden", {8}}}}},
                {"sample_sizes", {100, 200}},
                {"seeds", {0, 1, 2}},
                {"train", {{"epochs", 1}, {"batch", 32}}},
                {"ablation", {{"sample_sizes", {100}}}},
                {"output_dir", out.string()}};
}

H::ExperimentConfig tiny(const fs::path& out) { return H::parse_config(tiny_json(out)); }

// Scoped SEVAE_THREADS value.
class EnvThreads {
public:
    explicit EnvThreads(const char* v) {
        if (const char* old = std::getenv("SEVAE_THREADS")) old_ = old;
        if (v) {
            ::setenv("SEVAE_THREADS", v, 1);
        } else {
            ::unsetenv("SEVAE_THREADS");
        }
    }
    ~EnvThreads() {
        if (old_) {
            ::setenv("SEVAE_THREADS", old_->c_str(), 1);
        } else {
            ::unsetenv("SEVAE_THREADS");
        }
    }

private:
    std::optional<std::string> old_;
};

bool well_formed_xml(const std::string& text) {
    XML_Parser p = XML_ParserCreate("UTF-8");
    const bool ok = XML_Parse(p, text.data(), static_cast<int>(text.size()), 1) == XML_STATUS_OK;
    XML_ParserFree(p);
    return ok;
}

struct PolygonCollector {
    std::vector<std::string> points;
    static void start(void* data, const XML_Char* name, const XML_Char** attrs) {
        if (std::string(name) != "polygon") return;
        for (std::size_t i = 0; attrs[i]; i += 2) {
            if (std::string(attrs[i]) == "points") static_cast<PolygonCollector*>(data)->points.emplace_back(attrs[i + 1]);
        }
    }
};

std::vector<std::string> polygon_points(const std::string& svg) {
    PolygonCollector c;
    XML_Parser p = XML_ParserCreate("UTF-8");
    XML_SetUserData(p, &c);
    XML_SetStartElementHandler(p, &PolygonCollector::start);
    XML_Parse(p, svg.data(), static_cast<int>(svg.size()), 1);
    XML_ParserFree(p);
    return c.points;
}

H::MetricsReport synthetic_row(const std::string& model, std::size_t n, std::uint64_t seed, double value) {
    H::MetricsReport r;
    r.model = model;
    r.run_id = H::run_id(model, n, seed);
    r.K = 4;
    r.J = 6;
    r.N = n;
    r.seed = seed;
    r.scores = {value, value, value, value, value, value};
    return r;
}

}  // namespace

TEST(Config, ShippedConfigsParse) {
    for (const char* name : {"default.json", "smoke.json"}) {
        const auto cfg = H::load_config(fs::path(SEVAE_SOURCE_DIR) / "configs" / name);
        EXPECT_FALSE(cfg.models.empty()) << name;
    }
    const auto d = H::load_config(fs::path(SEVAE_SOURCE_DIR) / "configs" / "default.json");
    EXPECT_EQ(d.generator.K, 4u);
    EXPECT_EQ(d.generator.J, 6u);
    EXPECT_EQ(d.models.size(), 6u);
    EXPECT_EQ(d.sample_sizes, (std::vector<std::size_t>{2000, 5000, 10000}));
    EXPECT_EQ(d.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
    EXPECT_EQ(d.train.epochs, 30u);
}

TEST(Config, EmptyDocumentGivesDefaults) {
    json j = json::object();
    j["sample_sizes"] = {2000, 5000};
    j["generator"] = {{"N", 20000}};
    const auto cfg = H::parse_config(j);
    EXPECT_EQ(cfg.models.size(), 6u);
    for (const auto& m : cfg.models) EXPECT_EQ(m.config.arch.K, 4u);
}

TEST(Config, JsonRoundTripPreservesHash) {
    TempDir dir("cfg");
    const auto cfg = tiny(dir.path());
    const auto back = H::parse_config(json(cfg));
    EXPECT_EQ(H::config_hash(back), H::config_hash(cfg));
    auto changed = cfg;
    changed.train.lr *= 2;
    EXPECT_NE(H::config_hash(changed), H::config_hash(cfg));
}

TEST(Config, Errors) {
    TempDir dir("cfg");
    auto j = tiny_json(dir.path());
    j["models"][0]["K"] = 3;
    EXPECT_THROW(H::parse_config(j), sevae::DimensionError);

    j = tiny_json(dir.path());
    j["sample_sizes"] = {100, 301};
    EXPECT_THROW(H::parse_config(j), sevae::ConfigError);

    j = tiny_json(dir.path());
    j["seeds"] = "zero";
    EXPECT_THROW(H::parse_config(j), sevae::ConfigError);

    j = tiny_json(dir.path());
    j["models"][1]["name"] = "sevae";
    EXPECT_THROW(H::parse_config(j), sevae::ConfigError);

    j = tiny_json(dir.path());
    j["models"] = json::array();
    EXPECT_THROW(H::parse_config(j), sevae::ConfigError);

    j = tiny_json(dir.path());
    j["ablation"]["beta"] = {1.0};
    EXPECT_THROW(H::parse_config(j), sevae::ConfigError);

    EXPECT_THROW(H::load_config(dir.path() / "missing.json"), sevae::ConfigError);
    std::ofstream(dir.path() / "bad.json") << "{ not json";
    EXPECT_THROW(H::load_config(dir.path() / "bad.json"), sevae::ConfigError);
}

TEST(Subsample, FullSizeIsAPermutation) {
    sevae::datagen::GenSpec s;
    s.N = 300;
    const auto ds = sevae::datagen::generate(s);
    const auto sub = H::subsample(ds, 300, 4);
    std::multiset<double> a, b;
    for (std::size_t r = 0; r < 300; ++r) {
        a.insert(ds.confounder(r, 0));
        b.insert(sub.confounder(r, 0));
    }
    EXPECT_EQ(a, b);
}

TEST(Subsample, SmallerDrawsNest) {
    sevae::datagen::GenSpec s;
    s.N = 2000;
    const auto ds = sevae::datagen::generate(s);
    const auto small = H::subsample(ds, 100, 9), large = H::subsample(ds, 1000, 9);
    std::set<double> in_large;
    for (std::size_t r = 0; r < 1000; ++r) in_large.insert(large.confounder(r, 0));
    for (std::size_t r = 0; r < 100; ++r) EXPECT_TRUE(in_large.count(small.confounder(r, 0)));
    EXPECT_EQ(H::subsample(ds, 100, 9).X, small.X);
    EXPECT_NE(H::subsample(ds, 100, 10).X, small.X);
    EXPECT_THROW(H::subsample(ds, 2001, 9), sevae::ConfigError);
}

TEST(ResultsCsv, RowRoundTripIsExact) {
    auto r = synthetic_row("beta_vae", 5000, 2, 0.1);
    r.scores.sap = 1.0 / 3.0;
    r.scores.perm_align = 0.987654321012345;
    const auto back = H::parse_csv_row(H::to_csv_row(r));
    EXPECT_EQ(H::to_csv_row(back), H::to_csv_row(r));
    EXPECT_EQ(back.scores.sap, r.scores.sap);
    EXPECT_EQ(back.scores.perm_align, r.scores.perm_align);
    EXPECT_EQ(H::results_header(), "run_id,model,K,J,N,seed,mig,dci_d,dci_c,dci_i,sap,perm_align,status");
}

TEST(ResultsCsv, TruncatedLastLineIsDropped) {
    TempDir dir("csv");
    const auto good = H::to_csv_row(synthetic_row("vae", 100, 0, 0.5));
    const auto full = H::to_csv_row(synthetic_row("vae", 100, 1, 0.5));
    for (std::size_t cut : {std::size_t{5}, full.size() - 1}) {
        std::ofstream(dir.path() / "r.csv") << H::results_header() << "\n" << good << "\n" << full.substr(0, cut);
        EXPECT_EQ(H::read_results(dir.path() / "r.csv").size(), 1u) << "cut at " << cut;
    }
    std::ofstream(dir.path() / "r.csv") << H::results_header() << "\n" << full.substr(0, 9) << "\n" << good << "\n";
    EXPECT_THROW(H::read_results(dir.path() / "r.csv"), sevae::ConfigError);
}

TEST(Sweep, TwoModelsTwoSizesThreeSeedsGiveTwelveRows) {
    TempDir dir("sweep");
    const auto cfg = tiny(dir.path() / "a");
    const auto rows = H::run_sweep(cfg, 1);
    ASSERT_EQ(rows.size(), 12u);
    std::set<std::string> ids;
    for (const auto& r : rows) {
        EXPECT_EQ(r.status, "ok") << r.run_id;
        ids.insert(r.run_id);
    }
    EXPECT_EQ(ids.size(), 12u);
    const auto table = slurp(dir.path() / "a" / "results.csv");
    EXPECT_EQ(count_lines(table), 13u);
    EXPECT_TRUE(fs::exists(dir.path() / "a" / "config.json"));
    EXPECT_TRUE(fs::exists(dir.path() / "a" / "runs" / "sevae_n_100_seed_0.json"));
    const auto doc = json::parse(slurp(dir.path() / "a" / "runs" / "vae_n_200_seed_2.json"));
    EXPECT_EQ(doc.at("config_hash"), H::config_hash(cfg));
    EXPECT_EQ(doc.at("status"), "ok");

    // Rerunning a finished sweep adds nothing and leaves the bytes alone.
    EXPECT_EQ(H::run_sweep(cfg, 1).size(), 12u);
    EXPECT_EQ(slurp(dir.path() / "a" / "results.csv"), table);

    // Same config elsewhere, different thread count: identical bytes.
    auto other = cfg;
    other.output_dir = (dir.path() / "b").string();
    H::run_sweep(other, 3);
    EXPECT_EQ(slurp(dir.path() / "b" / "results.csv"), table);
}

TEST(Sweep, InterruptedRunResumesToSameTable) {
    TempDir dir("resume");
    const auto cfg = tiny(dir.path() / "full");
    H::run_sweep(cfg, 1);
    const auto full = slurp(dir.path() / "full" / "results.csv");

    // Keep the header, four finished rows and half of a fifth.
    std::istringstream in(full);
    std::string line, partial;
    for (int i = 0; i < 5 && std::getline(in, line); ++i) partial += line + "\n";
    std::getline(in, line);
    partial += line.substr(0, line.size() / 2);
    auto resumed = cfg;
    resumed.output_dir = (dir.path() / "resumed").string();
    fs::create_directories(resumed.output_dir);
    std::ofstream(dir.path() / "resumed" / "results.csv") << partial;

    std::vector<std::string> executed;
    H::run_sweep(resumed, 2, [&](const H::MetricsReport& r) { executed.push_back(r.run_id); });
    EXPECT_EQ(executed.size(), 8u);
    EXPECT_EQ(slurp(dir.path() / "resumed" / "results.csv"), full);
}

TEST(Sweep, FailingRunBecomesErrorRow) {
    TempDir dir("fail");
    const auto cfg = tiny(dir.path());
    const auto splits = H::make_splits(cfg);
    H::RunSpec spec = H::sweep_runs(cfg).front();
    spec.n = 100000;
    const auto o = H::execute_run(spec, splits, cfg, H::config_hash(cfg));
    EXPECT_EQ(o.report.status, "error");
    EXPECT_TRUE(std::isnan(o.report.scores.mig));
    EXPECT_TRUE(o.document.contains("error"));
    EXPECT_EQ(H::parse_csv_row(H::to_csv_row(o.report)).status, "error");
}

TEST(Sweep, TrainSeedDependsOnlyOnRunIdAndSeed) {
    TempDir dir("seeds");
    const auto a = H::sweep_runs(tiny(dir.path()));
    auto j = tiny_json(dir.path());
    j["models"] = {j["models"][1]};
    const auto b = H::sweep_runs(H::parse_config(j));
    for (const auto& rb : b) {
        const auto it = std::find_if(a.begin(), a.end(), [&](const H::RunSpec& ra) { return ra.run_id == rb.run_id; });
        ASSERT_NE(it, a.end());
        EXPECT_EQ(it->train_seed, rb.train_seed);
    }
}

TEST(Threads, EnvironmentOverridesRequest) {
    {
        EnvThreads e("3");
        EXPECT_EQ(H::resolve_threads(7), 3u);
    }
    {
        EnvThreads e(nullptr);
        EXPECT_EQ(H::resolve_threads(7), 7u);
        EXPECT_GE(H::resolve_threads(0), 1u);
    }
    {
        EnvThreads e("zero");
        EXPECT_THROW(H::resolve_threads(1), sevae::ConfigError);
    }
}

TEST(Ablation, SixteenDistinctCells) {
    const auto cells = H::ablation_cells();
    ASSERT_EQ(cells.size(), 16u);
    std::set<std::string> labels;
    for (const auto& c : cells) labels.insert(c.label());
    EXPECT_EQ(labels.size(), 16u);
    EXPECT_EQ(cells.front().label(), "b0g0a0n0");
    EXPECT_EQ(cells.back().label(), "b1g1a1n1");
}

TEST(Ablation, EightPairsPerFlagWithoutReuse) {
    for (auto f : H::kAllFlags) {
        const auto pairs = H::ablation_pairs(f);
        ASSERT_EQ(pairs.size(), 8u);
        std::set<unsigned> used;
        for (const auto& [off, on] : pairs) {
            EXPECT_FALSE(off.active(f));
            EXPECT_TRUE(on.active(f));
            EXPECT_EQ(off.bits ^ on.bits, 1u << static_cast<unsigned>(f));
            EXPECT_TRUE(used.insert(off.bits).second);
            EXPECT_TRUE(used.insert(on.bits).second);
        }
        EXPECT_EQ(used.size(), 16u);
    }
}

TEST(Ablation, CellsMapFlagsToConfiguredValues) {
    H::AblationConfig a;
    const H::AblationCell on{0b1111}, off{0};
    const auto hi = on.apply({}, a), lo = off.apply({}, a);
    EXPECT_EQ(hi.beta, 4.0);
    EXPECT_EQ(hi.gamma, 5.0);
    EXPECT_EQ(hi.alpha, 10.0);
    EXPECT_TRUE(hi.anneal.enabled);
    EXPECT_EQ(lo.beta, 1.0);
    EXPECT_EQ(lo.gamma, 0.0);
    EXPECT_EQ(lo.alpha, 0.0);
    EXPECT_FALSE(lo.anneal.enabled);
    EXPECT_EQ(hi.lambda_adv, lo.lambda_adv);
}

TEST(Ablation, RunsShareTrainingStreamWithinNAndSeed) {
    TempDir dir("abl");
    const auto runs = H::ablation_runs(tiny(dir.path()));
    ASSERT_EQ(runs.size(), 16u * 3u);
    std::map<std::uint64_t, std::set<std::uint64_t>> by_seed;
    for (const auto& r : runs) by_seed[r.seed].insert(r.train_seed);
    for (const auto& [seed, ts] : by_seed) EXPECT_EQ(ts.size(), 1u) << "seed " << seed;
    EXPECT_NE(*by_seed[0].begin(), *by_seed[1].begin());
}

TEST(Ablation, DegenerateAndUnknownComponentsAreRejected) {
    EXPECT_THROW(H::resolve_components({"gamma", "gamma"}), sevae::ConfigError);
    EXPECT_THROW(H::resolve_components({"delta"}), sevae::ConfigError);
    EXPECT_THROW(H::resolve_components({}), sevae::ConfigError);
    EXPECT_EQ(H::resolve_components({"anneal", "beta"}), (std::vector<H::Flag>{H::Flag::anneal, H::Flag::beta}));
}

TEST(Ablation, DeltaMeanAndSampleSd) {
    // Metric = gamma_bit * (0.2 + 0.1 * seed) + 0.01 * bits.
    std::vector<H::MetricsReport> rows;
    for (std::uint64_t seed : {0u, 1u}) {
        for (const auto& c : H::ablation_cells()) {
            const double v = (c.active(H::Flag::gamma) ? 0.2 + 0.1 * seed : 0.0) + 0.01 * c.bits;
            rows.push_back(synthetic_row(H::ablation_model_name(c), 5000, seed, v));
        }
    }
    const auto deltas = H::ablation_deltas(rows, {H::Flag::gamma, H::Flag::beta});
    ASSERT_EQ(deltas.size(), 12u);
    const auto& g = deltas.front();
    EXPECT_EQ(g.component, "total_correlation");
    EXPECT_EQ(g.N, 5000u);
    EXPECT_EQ(g.metric, "mig");
    EXPECT_EQ(g.pairs, 16u);
    // Eight deltas of 0.22 and eight of 0.32.
    EXPECT_NEAR(g.mean, 0.27, 1e-12);
    EXPECT_NEAR(g.sd, std::sqrt(16 * 0.05 * 0.05 / 15), 1e-12);
    const auto& b = deltas[6];
    EXPECT_EQ(b.component, "kl_beta");
    EXPECT_NEAR(b.mean, 0.01, 1e-12);
    EXPECT_NEAR(b.sd, 0.0, 1e-12);

    // Error rows drop their pairs.
    rows[1].status = "error";
    EXPECT_EQ(H::ablation_deltas(rows, {H::Flag::gamma}).front().pairs, 15u);
}

TEST(Ablation, EndToEndWritesTables) {
    TempDir dir("ablate");
    auto j = tiny_json(dir.path());
    j["seeds"] = {0};
    const auto res = H::run_ablation(H::parse_config(j), 1);
    EXPECT_EQ(res.runs.size(), 16u);
    EXPECT_EQ(res.deltas.size(), 4u * 6u);
    const auto table = slurp(dir.path() / "ablation.csv");
    EXPECT_EQ(table.substr(0, table.find('\n')), "component,N,metric,mean_delta,sd_delta,pairs");
    EXPECT_EQ(count_lines(table), 25u);
    EXPECT_EQ(count_lines(slurp(dir.path() / "ablation_runs.csv")), 17u);
}

TEST(Plots, SixWellFormedFiles) {
    TempDir dir("plots");
    std::vector<H::MetricsReport> rows;
    for (const char* model : {"sevae", "vae", "a&b<c>"}) {
        for (std::size_t n : {2000u, 5000u, 10000u}) {
            for (std::uint64_t seed : {0u, 1u, 2u}) rows.push_back(synthetic_row(model, n, seed, 0.1 * seed + n * 1e-5));
        }
    }
    const auto files = H::emit_plots(rows, dir.path());
    ASSERT_EQ(files.size(), 6u);
    std::set<std::string> names;
    for (const auto& f : files) {
        names.insert(f.filename().string());
        const auto svg = slurp(f);
        EXPECT_TRUE(well_formed_xml(svg)) << f;
        EXPECT_EQ(polygon_points(svg).size(), 3u);
    }
    EXPECT_EQ(names, (std::set<std::string>{"metric_mig.svg", "metric_dci_d.svg", "metric_dci_c.svg",
                                            "metric_dci_i.svg", "metric_sap.svg", "metric_perm_align.svg"}));
}

TEST(Plots, SingleSeedGivesZeroWidthBands) {
    TempDir dir("plots1");
    std::vector<H::MetricsReport> rows;
    for (std::size_t n : {2000u, 5000u, 10000u}) rows.push_back(synthetic_row("sevae", n, 0, n * 1e-5));
    const auto files = H::emit_plots(rows, dir.path());
    const auto pts = polygon_points(slurp(files.front()));
    ASSERT_EQ(pts.size(), 1u);
    std::vector<std::string> v;
    std::istringstream in(pts.front());
    for (std::string p; in >> p;) v.push_back(p);
    ASSERT_EQ(v.size(), 6u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(v[i], v[5 - i]);
}

TEST(Plots, Errors) {
    TempDir dir("plots2");
    EXPECT_THROW(H::emit_plots({}, dir.path()), sevae::ConfigError);
    EXPECT_THROW(H::emit_plots({synthetic_row("vae", 100, 0, 0.1), synthetic_row("vae", 100, 1, 0.2)}, dir.path()),
                 sevae::ConfigError);
    auto bad = synthetic_row("vae", 100, 0, 0.1);
    bad.status = "error";
    EXPECT_THROW(H::emit_plots({bad}, dir.path()), sevae::ConfigError);
}
