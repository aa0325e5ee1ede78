// sevae: data generation, training, evaluation, sweeps, ablations and plots.
//
// Exit codes: 0 success, 1 configuration / dimension / usage error, 2 runtime error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sevae/datagen.hpp"
#include "sevae/error.hpp"
#include "sevae/harness.hpp"
#include "sevae/metrics.hpp"
#include "sevae/models.hpp"
#include "sevae/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sevae;

namespace {

struct GlobalOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t threads = 0;
};

harness::ExperimentConfig load(const GlobalOptions& g) {
    harness::ExperimentConfig cfg =
        g.config.empty() ? harness::parse_config(json::object()) : harness::load_config(g.config);
    if (!g.out.empty()) cfg.output_dir = g.out;
    return cfg;
}

datagen::Dataset read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset " + path);
    try {
        return datagen::read_csv(in);
    } catch (const std::invalid_argument&) {
        throw ConfigError("dataset " + path + " contains a non-numeric field");
    }
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

void log_run(const harness::MetricsReport& r) {
    std::cerr << r.run_id << " " << r.status;
    if (r.status == "ok") {
        std::cerr << " mig=" << r.scores.mig << " dci_c=" << r.scores.dci_c << " perm_align=" << r.scores.perm_align;
    }
    std::cerr << "\n";
}

int cmd_gen(const GlobalOptions& g) {
    auto cfg = load(g);
    if (g.seed) cfg.generator.seed = *g.seed;
    const fs::path out = g.out.empty() ? fs::path("data") : fs::path(g.out);
    const auto ds = datagen::generate(cfg.generator);
    std::ostringstream csv;
    datagen::write_csv(ds, csv);
    write_file(out / "dataset.csv", csv.str());
    write_file(out / "spec.json", datagen::spec_document(ds).dump(2) + "\n");
    std::cerr << "wrote " << (out / "dataset.csv").string() << " and " << (out / "spec.json").string() << "\n";
    return 0;
}

const harness::ModelEntry& pick_model(const harness::ExperimentConfig& cfg, const std::string& name) {
    if (name.empty()) return cfg.models.front();
    for (const auto& m : cfg.models) {
        if (m.name == name) return m;
    }
    throw ConfigError("model '" + name + "' is not in the config's model list");
}

int cmd_train(const GlobalOptions& g, const std::string& data_path, const std::string& model_name,
              std::size_t n) {
    auto cfg = load(g);
    const auto& entry = pick_model(cfg, model_name);
    datagen::Dataset train_set = data_path.empty() ? harness::make_splits(cfg).train : read_dataset(data_path);
    if (n > 0) train_set = harness::subsample(train_set, n, g.seed.value_or(0));
    models::TrainConfig tc = cfg.train;
    tc.seed = g.seed.value_or(0);
    const auto result = models::train(entry.config, train_set.X, tc);

    const fs::path out = g.out.empty() ? fs::path("run") : fs::path(g.out);
    write_file(out / "checkpoint.json", result.model.checkpoint().dump() + "\n");
    std::ostringstream curves;
    models::write_loss_curves(result.history, curves);
    write_file(out / "loss_curves.csv", curves.str());
    std::cerr << "trained " << entry.name << " on " << train_set.rows() << " rows; wrote "
              << (out / "checkpoint.json").string() << "\n";
    return 0;
}

int cmd_eval(const GlobalOptions& g, const std::string& checkpoint, const std::string& data_path) {
    auto cfg = load(g);
    const models::Model model = models::Model::from_checkpoint(read_json(checkpoint));
    const datagen::Dataset eval_set = data_path.empty() ? harness::make_splits(cfg).eval : read_dataset(data_path);
    const auto codes = model.encode(eval_set.X);
    const Matrix all = models::latent_means(codes, cfg.metrics.include_nuisance);
    const Matrix aligned = models::latent_means(codes, false);
    harness::MetricsReport r;
    r.run_id = fs::path(checkpoint).stem().string();
    r.model = std::string(models::to_string(model.kind()));
    r.K = model.config().arch.K;
    r.J = model.config().arch.J;
    r.N = eval_set.rows();
    r.seed = g.seed.value_or(0);
    r.scores = metrics::score_all(all, aligned, eval_set.factors, cfg.metrics);

    const json doc{{"run_id", r.run_id},
                   {"model", model.config()},
                   {"checkpoint", checkpoint},
                   {"N", r.N},
                   {"config_hash", harness::config_hash(cfg)},
                   {"dci_probe", {{"kind", "lasso"}, {"lambda", cfg.metrics.lasso_lambda}}},
                   {"mig_bins", cfg.metrics.bins},
                   {"include_nuisance", cfg.metrics.include_nuisance},
                   {"metrics",
                    {{"mig", r.scores.mig},
                     {"dci_d", r.scores.dci_d},
                     {"dci_c", r.scores.dci_c},
                     {"dci_i", r.scores.dci_i},
                     {"sap", r.scores.sap},
                     {"perm_align", r.scores.perm_align}}}};
    const std::string row = harness::results_header() + "\n" + harness::to_csv_row(r) + "\n";
    if (!g.out.empty()) {
        write_file(fs::path(g.out) / "metrics.json", doc.dump(2) + "\n");
        write_file(fs::path(g.out) / "metrics.csv", row);
    }
    std::cout << row;
    return 0;
}

int cmd_sweep(const GlobalOptions& g) {
    auto cfg = load(g);
    if (g.seed) cfg.seeds = {*g.seed};
    const auto rows = harness::run_sweep(cfg, g.threads, log_run);
    std::cerr << rows.size() << " rows in " << (fs::path(cfg.output_dir) / "results.csv").string() << "\n";
    return 0;
}

int cmd_ablate(const GlobalOptions& g, const std::vector<std::string>& components) {
    auto cfg = load(g);
    if (g.seed) cfg.seeds = {*g.seed};
    if (!components.empty()) cfg.ablation.components = components;
    const auto res = harness::run_ablation(cfg, g.threads, log_run);
    for (const auto& d : res.deltas) {
        if (d.metric == "sap" || d.metric == "dci_i") {
            std::cerr << d.component << " N=" << d.N << " " << d.metric << ": " << d.mean << " +- " << d.sd << "\n";
        }
    }
    std::cerr << "wrote " << (fs::path(cfg.output_dir) / "ablation.csv").string() << "\n";
    return 0;
}

int cmd_plot(const GlobalOptions& g, std::string results) {
    const fs::path out = g.out.empty() ? fs::path("results") : fs::path(g.out);
    if (results.empty()) results = (out / "results.csv").string();
    if (!fs::exists(results)) throw ConfigError("results table " + results + " does not exist");
    for (const auto& p : harness::emit_plots(harness::read_results(results), out)) {
        std::cerr << "wrote " << p.string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Structured-encoder VAE experiments on synthetic grouped tabular data"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    auto* seed_opt = app.add_option("--seed", seed, "Seed override");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads for sweep/ablate (SEVAE_THREADS overrides)");

    auto* gen = app.add_subcommand("gen", "Write dataset.csv and spec.json");

    auto* train = app.add_subcommand("train", "Train one model; write checkpoint.json and loss_curves.csv");
    std::string train_data, model_name;
    std::size_t train_n = 0;
    train->add_option("--data", train_data, "Dataset CSV (default: training split of the config generator)");
    train->add_option("--model", model_name, "Model name from the config (default: first)");
    train->add_option("-n,--samples", train_n, "Subsample the training rows");

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    std::string checkpoint, eval_data;
    eval->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required();
    eval->add_option("--data", eval_data, "Dataset CSV (default: evaluation split of the config generator)");

    auto* sweep = app.add_subcommand("sweep", "Models x sample sizes x seeds; writes results.csv");

    auto* ablate = app.add_subcommand("ablate", "16-cell SE-VAE ablation grid; writes ablation.csv");
    std::vector<std::string> components;
    ablate->add_option("--component", components, "Restrict the delta table (beta, gamma, alpha, anneal)");

    auto* plot = app.add_subcommand("plot", "Write metric_<name>.svg from a results table");
    std::string results;
    plot->add_option("--results", results, "results.csv (default: <out>/results.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        if (gen->parsed()) return cmd_gen(g);
        if (train->parsed()) return cmd_train(g, train_data, model_name, train_n);
        if (eval->parsed()) return cmd_eval(g, checkpoint, eval_data);
        if (sweep->parsed()) return cmd_sweep(g);
        if (ablate->parsed()) return cmd_ablate(g, components);
        if (plot->parsed()) return cmd_plot(g, results);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
