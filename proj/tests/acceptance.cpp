// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Criteria 6, 7 and 9 train real models and take
// several minutes; pass criterion numbers as arguments to run a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "sevae/harness.hpp"
#include "sevae/losses.hpp"
#include "sevae/metrics.hpp"
#include "sevae/models.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace ad = sevae::ad;
namespace H = sevae::harness;
namespace L = sevae::losses;
namespace M = sevae::models;
namespace mt = sevae::metrics;
using sevae::Matrix;
using sevae::testing::random_matrix;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

H::ExperimentConfig default_config(const fs::path& out) {
    auto cfg = H::load_config(fs::path(SEVAE_SOURCE_DIR) / "configs" / "default.json");
    cfg.output_dir = out.string();
    return cfg;
}

// 1. Gradient oracle.
Verdict gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    std::string where;
    std::size_t draws = 0;
    for (int round = 0; round < 9; ++round) {
        for (auto kind : M::kAllKinds) {
            auto cfg = sevae::testing::tiny_config(kind);
            cfg.arch.anneal = {round % 2 == 0, 10};
            auto m = M::Model::create(cfg, 100 + round);
            sevae::testing::randomize_parameters(m, rng);
            const Matrix X = random_matrix(8, 9, rng);
            const auto rep = sevae::testing::gradcheck_model(m, X, 1000 + round, round, 500.0);
            ++draws;
            if (rep.worst > worst) {
                worst = rep.worst;
                where = std::string(M::to_string(kind)) + " " + rep.worst_where;
            }
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst < 1e-4 && draws >= 50 && secs < 60,
            std::to_string(draws) + " draws, worst rel err " + fmt(worst) + " (" + where + "), " + fmt(secs, 3) + " s"};
}

double brute_force(const Matrix& c) {
    std::vector<std::size_t> p(c.rows());
    std::iota(p.begin(), p.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) s += c(i, p[i]);
        best = std::min(best, s);
    } while (std::next_permutation(p.begin(), p.end()));
    return best;
}

// 2. Hungarian oracle.
Verdict hungarian() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> small(0, 2);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::size_t mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        Matrix c(3, 3);
        for (double& v : c.data()) v = small(rng);
        if (mt::hungarian(c).cost != brute_force(c)) ++mismatches;
    }
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        Matrix c(6, 6);
        for (double& v : c.data()) v = u(rng);
        worst = std::max(worst, std::abs(mt::hungarian(c).cost - brute_force(c)));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {mismatches == 0 && worst < 1e-9 && secs < 10,
            "3x3 mismatches " + std::to_string(mismatches) + "/1000, 6x6 worst gap " + fmt(worst) + ", " +
                fmt(secs, 3) + " s"};
}

// 3. Metric identity suite.
Verdict identity_suite() {
    std::mt19937_64 rng(31);
    const Matrix f = random_matrix(10000, 4, rng);
    const auto s = mt::score_all(f, f, f);
    const Matrix noise = random_matrix(10000, 4, rng);
    const auto n = mt::score_all(noise, noise, f);
    const bool ok = std::abs(s.perm_align - 1.0) <= 1e-9 && s.sap >= 0.9 && s.mig >= 0.7 &&
                    std::abs(s.dci_d - 1.0) <= 1e-6 && std::abs(s.dci_c - 1.0) <= 1e-6 && n.mig < 0.05 &&
                    n.perm_align < 0.05;
    return {ok, "identity PA " + fmt(s.perm_align, 12) + " SAP " + fmt(s.sap) + " MIG " + fmt(s.mig) + " DCI-D " +
                    fmt(s.dci_d, 9) + " DCI-C " + fmt(s.dci_c, 9) + "; noise MIG " + fmt(n.mig) + " PA " +
                    fmt(n.perm_align)};
}

double tc_value(const Matrix& z, const Matrix& mu, const Matrix& lv) {
    ad::Tape t(false);
    return L::total_correlation_mws(t.constant(z), t.constant(mu), t.constant(lv), 1.0).scalar();
}

// 4. TC estimator oracle.
Verdict tc_oracle() {
    std::mt19937_64 rng(44);
    double total = 0;
    for (int b = 0; b < 20; ++b) total += tc_value(random_matrix(256, 4, rng), Matrix(256, 4), Matrix(256, 4));
    const double factorized = total / 20;

    Matrix mu = random_matrix(256, 4, rng);
    const Matrix lv(256, 4, std::log(0.1));
    Matrix z = random_matrix(256, 4, rng, std::sqrt(0.1));
    for (std::size_t i = 0; i < 256; ++i) {
        mu(i, 1) = mu(i, 0);
        z(i, 1) = z(i, 0);
    }
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += mu[i];
    const double duplicated = tc_value(z, mu, lv);
    return {std::abs(factorized) < 0.15 && duplicated > 0.5,
            "factorized mean over 20 batches " + fmt(factorized) + " nats, duplicated " + fmt(duplicated) + " nats"};
}

// 5. KL closed form.
Verdict kl_closed_form() {
    auto kl = [](const Matrix& mu, const Matrix& lv) {
        ad::Tape t(false);
        return L::kl_gaussian(t.constant(mu), t.constant(lv)).scalar();
    };
    const double half = kl(Matrix{{1.0}}, Matrix{{0.0}});
    std::mt19937_64 rng(55);
    double lowest = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 1000; ++t) {
        lowest = std::min(lowest, kl(random_matrix(4, 3, rng, 2.0), random_matrix(4, 3, rng, 2.0)));
    }
    return {half == 0.5 && lowest >= 0.0,
            "kl(1, 0) = " + fmt(half, 17) + ", min over 1000 draws " + fmt(lowest)};
}

double mean_of(const std::vector<H::MetricsReport>& rows, const std::string& model, double mt::MetricScores::*f) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.model == model && r.status == "ok") {
            s += r.scores.*f;
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// 6. SE-VAE against the plain VAE at N = 10,000.
Verdict ordering(const fs::path& work) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = default_config(work / "ordering");
    std::erase_if(cfg.models, [](const H::ModelEntry& m) { return m.name != "sevae" && m.name != "vae"; });
    cfg.sample_sizes = {10000};
    const auto rows = H::run_sweep(cfg, 0);
    const double se_c = mean_of(rows, "sevae", &mt::MetricScores::dci_c);
    const double va_c = mean_of(rows, "vae", &mt::MetricScores::dci_c);
    const double se_p = mean_of(rows, "sevae", &mt::MetricScores::perm_align);
    const double va_p = mean_of(rows, "vae", &mt::MetricScores::perm_align);
    const double mins = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
    return {se_c - va_c >= 0.10 && se_p - va_p >= 0.10 && se_p >= 0.6,
            "DCI-C " + fmt(se_c) + " vs " + fmt(va_c) + ", PermAlign " + fmt(se_p) + " vs " + fmt(va_p) + ", " +
                fmt(mins, 3) + " min"};
}

// 7. Ablation signs at N = 5,000.
Verdict ablation_signs(const fs::path& work) {
    auto cfg = default_config(work / "ablation");
    cfg.ablation.sample_sizes = {5000};
    const auto res = H::run_ablation(cfg, 0);
    auto find = [&](std::string_view comp, std::string_view metric) -> const H::AblationDelta& {
        for (const auto& d : res.deltas) {
            if (d.component == comp && d.metric == metric && d.N == 5000) return d;
        }
        throw sevae::Error("missing ablation row");
    };
    const auto& sap = find("total_correlation", "sap");
    const auto& dci_i = find("total_correlation", "dci_i");
    bool anneal_null = true;
    std::string worst_anneal;
    double worst_ratio = 0.0;
    for (const char* m : H::kMetricNames) {
        const auto& d = find("kl_annealing", m);
        const double ratio = d.sd > 0 ? std::abs(d.mean) / d.sd : std::numeric_limits<double>::infinity();
        if (!(std::abs(d.mean) < 2 * d.sd)) anneal_null = false;
        if (ratio > worst_ratio) {
            worst_ratio = ratio;
            worst_anneal = std::string(m) + " " + fmt(d.mean) + " +- " + fmt(d.sd);
        }
    }
    return {sap.mean > 0 && dci_i.mean > 0 && anneal_null,
            "gamma dSAP " + fmt(sap.mean) + " +- " + fmt(sap.sd) + ", dDCI-I " + fmt(dci_i.mean) + " +- " +
                fmt(dci_i.sd) + "; anneal largest |mean|/SD " + fmt(worst_ratio, 3) + " (" + worst_anneal + ")"};
}

// 8. Decoder locality at K = 4.
Verdict locality() {
    M::ModelConfig c;
    c.arch.K = 4;
    c.arch.J = 6;
    const auto m = M::Model::create(c, 3);
    std::mt19937_64 rng(8);
    const std::size_t B = 5;
    const Matrix zc = random_matrix(B, 4, rng), zm = random_matrix(B, c.arch.d_m, rng);
    std::size_t nonzero_cross = 0, zero_own = 0;
    // One backward pass per output entry gives the full Jacobian.
    for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t col = 0; col < 24; ++col) {
            ad::Tape t;
            ad::Var z = t.parameter("z", zc);
            const auto dec = M::sevae_decode(t, m.sevae(), z, t.constant(zm));
            Matrix pick(B, 24);
            pick(r, col) = 1.0;
            const auto g = t.backward(ad::sum(ad::mul(dec.x_hat, t.constant(pick)))).at("z");
            const std::size_t k = col / 6;
            for (std::size_t j = 0; j < 4; ++j) {
                if (j != k && g(r, j) != 0.0) ++nonzero_cross;
            }
            if (g(r, k) == 0.0) ++zero_own;
        }
    }
    return {nonzero_cross == 0,
            std::to_string(B * 24 * 3) + " cross entries checked, " + std::to_string(nonzero_cross) +
                " nonzero; own-group zero entries " + std::to_string(zero_own) + "/" + std::to_string(B * 24)};
}

int run_cli(const std::string& env, const std::string& args) {
    const std::string cmd = env + " '" SEVAE_CLI "' " + args + " >/dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// 9. Byte-identical sweeps across thread counts.
Verdict determinism(const fs::path& work) {
    const std::string cfg = "'" + (fs::path(SEVAE_SOURCE_DIR) / "configs" / "smoke.json").string() + "'";
    const fs::path a = work / "det1", b = work / "det4";
    const int ra = run_cli("SEVAE_THREADS=1", "--config " + cfg + " --out '" + a.string() + "' sweep");
    const int rb = run_cli("SEVAE_THREADS=4", "--config " + cfg + " --out '" + b.string() + "' sweep");
    const std::string ta = slurp(a / "results.csv"), tb = slurp(b / "results.csv");
    const auto lines = std::count(ta.begin(), ta.end(), '\n');
    return {ra == 0 && rb == 0 && !ta.empty() && ta == tb,
            "exit codes " + std::to_string(ra) + "/" + std::to_string(rb) + ", " + std::to_string(lines) +
                " lines, " + (ta == tb ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto wanted = [&](int n) { return only.empty() || only.count(n); };

    sevae::testing::TempDir work("acceptance");
    const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
        {1, gradients},
        {2, hungarian},
        {3, identity_suite},
        {4, tc_oracle},
        {5, kl_closed_form},
        {6, [&] { return ordering(work.path()); }},
        {7, [&] { return ablation_signs(work.path()); }},
        {8, locality},
        {9, [&] { return determinism(work.path()); }},
    };
    static const char* names[] = {"",
                                  "gradient oracle",
                                  "hungarian oracle",
                                  "metric identity suite",
                                  "tc estimator oracle",
                                  "kl closed form",
                                  "sevae vs vae ordering",
                                  "ablation signs",
                                  "decoder locality",
                                  "pipeline determinism"};
    int failures = 0;
    for (const auto& [n, check] : criteria) {
        if (!wanted(n)) continue;
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        if (!v.pass) ++failures;
        std::cout << (v.pass ? "PASS " : "FAIL ") << n << " " << names[n] << ": " << v.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
