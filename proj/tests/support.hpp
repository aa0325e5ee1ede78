#pragma once

// Shared oracles for the test suites: central finite differences over model
// parameters and small helpers for temporary directories.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sevae/autodiff.hpp"
#include "sevae/matrix.hpp"
#include "sevae/models.hpp"
#include "sevae/nn.hpp"

namespace sevae::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps round-off in near-zero
/// entries from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Central finite difference of a scalar function of one matrix.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, Matrix x, double eps = 1e-5) {
    Matrix g(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2 * eps);
    }
    return g;
}

/// Builds f on a fresh tape with x as a parameter named "x"; returns the
/// worst relative error between autodiff and central differences.
inline double gradcheck(const std::function<ad::Var(ad::Tape&, ad::Var)>& f, const Matrix& x0,
                        double eps = 1e-5) {
    ad::Tape tape;
    ad::Var x = tape.parameter("x", x0);
    const Matrix analytic = tape.backward(f(tape, x)).at("x");
    const Matrix numeric = numeric_gradient(
        [&](const Matrix& xv) {
            ad::Tape t;
            return f(t, t.parameter("x", xv)).scalar();
        },
        x0, eps);
    double worst = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i]));
    return worst;
}

enum class LossPart { recon, kl, tc, ortho, adv, total };

inline constexpr LossPart kLossParts[] = {LossPart::recon, LossPart::kl, LossPart::tc,
                                          LossPart::ortho, LossPart::adv};

inline const char* part_name(LossPart p) {
    switch (p) {
        case LossPart::recon: return "recon";
        case LossPart::kl: return "kl";
        case LossPart::tc: return "tc";
        case LossPart::ortho: return "ortho";
        case LossPart::adv: return "adv";
        case LossPart::total: return "total";
    }
    return "?";
}

inline ad::Var pick(const models::LossGraph& g, LossPart p) {
    switch (p) {
        case LossPart::recon: return g.recon;
        case LossPart::kl: return g.kl;
        case LossPart::tc: return g.tc;
        case LossPart::ortho: return g.ortho;
        case LossPart::adv: return g.adv;
        case LossPart::total: return g.total;
    }
    return g.total;
}

inline double pick(const models::LossBreakdown& b, LossPart p) {
    switch (p) {
        case LossPart::recon: return b.recon;
        case LossPart::kl: return b.kl;
        case LossPart::tc: return b.tc;
        case LossPart::ortho: return b.ortho;
        case LossPart::adv: return b.adv;
        case LossPart::total: return b.total;
    }
    return b.total;
}

struct GradcheckReport {
    double worst = 0.0;
    std::string worst_where;
    std::size_t checked = 0;
};

/// Compares the autodiff gradient of every loss component against central
/// differences for every parameter entry (main and discriminator).
///
/// The adversarial component is differentiated through a gradient-reversal
/// node, so its autodiff gradient on the nuisance encoder is the negated
/// finite difference; the comparison applies that sign.
inline GradcheckReport gradcheck_model(models::Model& model, const Matrix& X, std::uint64_t noise_seed,
                                       std::size_t step, double dataset_size, double eps = 1e-5) {
    const nn::Rng rng0(noise_seed);
    auto params = model.all_parameters();

    std::vector<std::pair<LossPart, ad::Gradients>> analytic;
    {
        ad::Tape tape;
        nn::Rng rng = rng0;
        auto g = model.loss_graph(tape, X, rng, step, dataset_size);
        for (LossPart p : kLossParts) analytic.emplace_back(p, tape.backward(pick(g, p)));
    }
    auto evaluate = [&] {
        nn::Rng rng = rng0;
        ad::Tape tape(false);
        return model.loss_graph(tape, X, rng, step, dataset_size).breakdown;
    };

    GradcheckReport rep;
    for (auto& [id, p] : params) {
        const bool reversed = id.rfind("nuisance.", 0) == 0;
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double orig = (*p)[i];
            (*p)[i] = orig + eps;
            const auto up = evaluate();
            (*p)[i] = orig - eps;
            const auto down = evaluate();
            (*p)[i] = orig;
            for (const auto& [part, grads] : analytic) {
                double numeric = (pick(up, part) - pick(down, part)) / (2 * eps);
                if (part == LossPart::adv && reversed) numeric = -numeric;
                const auto it = grads.find(id);
                const double a = it == grads.end() ? 0.0 : it->second[i];
                const double err = relative_error(a, numeric);
                ++rep.checked;
                if (err > rep.worst) {
                    rep.worst = err;
                    rep.worst_where = std::string(part_name(part)) + " / " + id + "[" + std::to_string(i) +
                                      "] analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
                }
            }
        }
    }
    return rep;
}

/// Replaces every parameter entry with a N(0, sd^2) draw.
inline void randomize_parameters(models::Model& model, std::mt19937_64& rng, double sd = 0.5) {
    std::normal_distribution<double> n(0.0, sd);
    for (auto& [id, p] : model.all_parameters()) {
        for (double& v : p->data()) v = n(rng);
    }
}

/// Small architecture that keeps finite-difference sweeps cheap.
inline models::ModelConfig tiny_config(models::ModelKind kind) {
    models::ModelConfig c;
    c.kind = kind;
    c.arch.K = 3;
    c.arch.J = 3;
    c.arch.d_k = 1;
    c.arch.d_m = 2;
    c.arch.d_c = 3;
    c.arch.hidden = {5, 4};
    c.arch.beta = 1.3;
    c.arch.gamma = 0.7;
    c.arch.alpha = 2.0;
    c.arch.lambda_adv = 0.9;
    c.baseline.disc_hidden = {4, 4, 4};
    return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("sevae-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace sevae::testing
