#pragma once

// Disentanglement scores computed on posterior means against ground-truth
// factors: MIG, DCI (lasso probe), SAP (regression form) and Hungarian
// permutation alignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sevae/datagen.hpp"
#include "sevae/error.hpp"
#include "sevae/matrix.hpp"

namespace sevae::metrics {

struct EvalInput {
    Matrix latents;  // N x D
    Matrix factors;  // N x K

    void validate() const {
        if (latents.rows() != factors.rows()) {
            throw DimensionError("EvalInput: latents have " + std::to_string(latents.rows()) +
                                 " rows, factors " + std::to_string(factors.rows()));
        }
        if (latents.rows() < 100) throw ConfigError("EvalInput: metrics need at least 100 samples");
        if (latents.cols() == 0 || factors.cols() == 0) throw DimensionError("EvalInput: empty latent or factor set");
        if (!latents.all_finite() || !factors.all_finite()) throw DomainError("EvalInput: non-finite entries");
    }
};

// ---- discretization and information ----------------------------------------

struct Discretized {
    std::vector<std::size_t> labels;
    bool degenerate = false;
};

/// Equal-frequency binning: rank by (value, index), label = rank * bins / N.
inline Discretized quantile_discretize(std::span<const double> values, std::size_t bins) {
    if (bins < 2) throw ConfigError("quantile_discretize: bins must be >= 2");
    const std::size_t n = values.size();
    if (n < bins) throw ConfigError("quantile_discretize: fewer samples than bins");
    Discretized out;
    out.labels.assign(n, 0);
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) {
        out.degenerate = true;
        return out;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    for (std::size_t r = 0; r < n; ++r) out.labels[order[r]] = r * bins / n;
    return out;
}

inline std::size_t label_count(std::span<const std::size_t> labels) {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

/// Plug-in entropy in nats.
inline double entropy(std::span<const std::size_t> labels) {
    std::vector<double> counts(label_count(labels), 0.0);
    for (std::size_t l : labels) counts[l] += 1.0;
    const double n = static_cast<double>(labels.size());
    double h = 0.0;
    for (double c : counts) {
        if (c > 0) h -= (c / n) * std::log(c / n);
    }
    return h;
}

/// Plug-in mutual information in nats from the joint histogram.
inline double mutual_information(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) throw DimensionError("mutual_information: label vectors differ in length");
    if (a.empty()) return 0.0;
    const std::size_t na = label_count(a), nb = label_count(b);
    std::vector<double> joint(na * nb, 0.0), pa(na, 0.0), pb(nb, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[a[i] * nb + b[i]] += 1.0;
        pa[a[i]] += 1.0;
        pb[b[i]] += 1.0;
    }
    const double n = static_cast<double>(a.size());
    double mi = 0.0;
    // Summation order is fixed by (a, b) label order; swap the roles so the
    // result is bit-identical under argument exchange.
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = 0; j < nb; ++j) {
            const double c = joint[i * nb + j];
            if (c > 0) mi += (c / n) * std::log(c * n / (pa[i] * pb[j]));
        }
    }
    double mi_swapped = 0.0;
    for (std::size_t j = 0; j < nb; ++j) {
        for (std::size_t i = 0; i < na; ++i) {
            const double c = joint[i * nb + j];
            if (c > 0) mi_swapped += (c / n) * std::log(c * n / (pb[j] * pa[i]));
        }
    }
    return std::max(0.0, std::min(mi, mi_swapped));
}

// ---- MIG -------------------------------------------------------------------

struct MigResult {
    double score = 0.0;
    std::vector<std::size_t> skipped_factors;  // zero-entropy factors
};

inline MigResult mig_detailed(const EvalInput& ev, std::size_t bins = 20) {
    ev.validate();
    const std::size_t D = ev.latents.cols(), K = ev.factors.cols();
    std::vector<Discretized> lat(D);
    for (std::size_t d = 0; d < D; ++d) lat[d] = quantile_discretize(ev.latents.column(d), bins);
    MigResult out;
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto f = quantile_discretize(ev.factors.column(k), bins);
        const double h = entropy(f.labels);
        if (f.degenerate || h <= 0.0) {
            out.skipped_factors.push_back(k);
            continue;
        }
        std::vector<double> mi(D);
        for (std::size_t d = 0; d < D; ++d) mi[d] = mutual_information(lat[d].labels, f.labels);
        std::sort(mi.begin(), mi.end(), std::greater<>());
        const double second = D > 1 ? mi[1] : 0.0;
        total += (mi[0] - second) / h;
        ++used;
    }
    out.score = used > 0 ? total / static_cast<double>(used) : 0.0;
    return out;
}

inline double mig(const EvalInput& ev, std::size_t bins = 20) { return mig_detailed(ev, bins).score; }

// ---- DCI -------------------------------------------------------------------

struct ImportanceMatrix {
    Matrix R;                 // D x K, |lasso coefficients|
    std::vector<double> r2;   // held-out R^2 per factor
    std::vector<bool> zero_columns;
    bool degenerate = false;  // every importance is zero
    bool converged = true;
};

namespace detail {

struct Standardized {
    Matrix m;
    std::vector<bool> constant;
};

inline Standardized standardize(const Matrix& in) {
    Standardized s{in, std::vector<bool>(in.cols(), false)};
    const double n = static_cast<double>(in.rows());
    for (std::size_t c = 0; c < in.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < in.rows(); ++r) mean += in(r, c);
        mean /= n;
        double ss = 0.0;
        for (std::size_t r = 0; r < in.rows(); ++r) ss += (in(r, c) - mean) * (in(r, c) - mean);
        const double sd = std::sqrt(ss / n);
        if (!(sd > 0.0)) s.constant[c] = true;
        for (std::size_t r = 0; r < in.rows(); ++r) s.m(r, c) = sd > 0.0 ? (in(r, c) - mean) / sd : 0.0;
    }
    return s;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (!(saa > 0.0) || !(sbb > 0.0)) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double soft_threshold(double x, double t) {
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
}

}  // namespace detail

struct LassoFit {
    std::vector<double> coef;
    bool converged = true;
};

/// Coordinate descent on (1/2n)||y - Xw||^2 + lambda*||w||_1 for centered X, y.
inline LassoFit lasso_coordinate_descent(const Matrix& X, std::span<const double> y, double lambda,
                                         std::size_t max_iter = 20000, double tol = 1e-13) {
    const std::size_t n = X.rows(), p = X.cols();
    LassoFit fit{std::vector<double>(p, 0.0), false};
    std::vector<double> resid(y.begin(), y.end());
    std::vector<double> sq(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t i = 0; i < n; ++i) sq[j] += X(i, j) * X(i, j);
        sq[j] /= static_cast<double>(n);
    }
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        double max_delta = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (!(sq[j] > 0.0)) continue;
            double rho = 0.0;
            for (std::size_t i = 0; i < n; ++i) rho += X(i, j) * resid[i];
            rho = rho / static_cast<double>(n) + sq[j] * fit.coef[j];
            const double w = detail::soft_threshold(rho, lambda) / sq[j];
            const double delta = w - fit.coef[j];
            if (delta != 0.0) {
                for (std::size_t i = 0; i < n; ++i) resid[i] -= X(i, j) * delta;
                fit.coef[j] = w;
            }
            max_delta = std::max(max_delta, std::abs(delta));
        }
        if (max_delta < tol) {
            fit.converged = true;
            break;
        }
    }
    return fit;
}

/// Per-factor L1 probe on standardized data: fit on one half (seeded split),
/// importances = |coefficients|, R^2 measured on the other half.
inline ImportanceMatrix lasso_importance(const EvalInput& ev, double lambda = 0.01, std::uint64_t split_seed = 0) {
    ev.validate();
    const auto lat = detail::standardize(ev.latents);
    const auto fac = detail::standardize(ev.factors);
    const std::size_t N = ev.latents.rows(), D = ev.latents.cols(), K = ev.factors.cols();
    const auto order = datagen::shuffled_indices(N, split_seed);
    const std::size_t n_fit = N / 2;
    const std::span<const std::size_t> all(order);
    const Matrix X_fit = linalg::select_rows(lat.m, all.first(n_fit));
    const Matrix X_test = linalg::select_rows(lat.m, all.subspan(n_fit));
    const Matrix Y_fit = linalg::select_rows(fac.m, all.first(n_fit));
    const Matrix Y_test = linalg::select_rows(fac.m, all.subspan(n_fit));

    ImportanceMatrix out;
    out.R = Matrix(D, K);
    out.r2.assign(K, 0.0);
    out.zero_columns.assign(K, false);
    for (std::size_t k = 0; k < K; ++k) {
        // Center on the fitting half so the probe needs no intercept.
        auto y = Y_fit.column(k);
        const double ym = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
        for (double& v : y) v -= ym;
        Matrix Xc = X_fit;
        std::vector<double> xm(D, 0.0);
        for (std::size_t r = 0; r < Xc.rows(); ++r)
            for (std::size_t d = 0; d < D; ++d) xm[d] += Xc(r, d);
        for (double& v : xm) v /= static_cast<double>(Xc.rows());
        for (std::size_t r = 0; r < Xc.rows(); ++r)
            for (std::size_t d = 0; d < D; ++d) Xc(r, d) -= xm[d];

        const LassoFit fit = lasso_coordinate_descent(Xc, y, lambda);
        out.converged = out.converged && fit.converged;
        bool any = false;
        for (std::size_t d = 0; d < D; ++d) {
            out.R(d, k) = std::abs(fit.coef[d]);
            any = any || out.R(d, k) > 0.0;
        }
        out.zero_columns[k] = !any;

        const auto yt = Y_test.column(k);
        const double ytm = std::accumulate(yt.begin(), yt.end(), 0.0) / static_cast<double>(yt.size());
        double ss_res = 0.0, ss_tot = 0.0;
        for (std::size_t r = 0; r < X_test.rows(); ++r) {
            double pred = ym;
            for (std::size_t d = 0; d < D; ++d) pred += fit.coef[d] * (X_test(r, d) - xm[d]);
            ss_res += (yt[r] - pred) * (yt[r] - pred);
            ss_tot += (yt[r] - ytm) * (yt[r] - ytm);
        }
        out.r2[k] = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
    }
    out.degenerate = std::all_of(out.zero_columns.begin(), out.zero_columns.end(), [](bool z) { return z; });
    return out;
}

struct DciScores {
    double disentanglement = 0.0;
    double completeness = 0.0;
    double informativeness = 0.0;
    bool degenerate = false;
};

namespace detail {

// 1 - H(p)/log(n) for a nonnegative weight vector; a single category counts
// as perfectly concentrated.
inline double concentration(std::span<const double> w) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0) || w.size() < 2) return w.size() < 2 && total > 0.0 ? 1.0 : 0.0;
    double h = 0.0;
    for (double v : w) {
        const double p = v / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return 1.0 - h / std::log(static_cast<double>(w.size()));
}

}  // namespace detail

inline DciScores dci(const ImportanceMatrix& imp) {
    const Matrix& R = imp.R;
    const std::size_t D = R.rows(), K = R.cols();
    DciScores s;
    double total = 0.0;
    for (double v : R.data()) {
        if (v < 0.0 || !std::isfinite(v)) throw DomainError("dci: importances must be finite and >= 0");
        total += v;
    }
    if (!imp.r2.empty()) {
        double r2 = 0.0;
        for (double v : imp.r2) r2 += std::clamp(v, 0.0, 1.0);
        s.informativeness = r2 / static_cast<double>(imp.r2.size());
    }
    if (!(total > 0.0)) {
        s.degenerate = true;
        return s;
    }
    for (std::size_t d = 0; d < D; ++d) {
        const auto row = R.row(d);
        const double mass = std::accumulate(row.begin(), row.end(), 0.0);
        s.disentanglement += (mass / total) * detail::concentration(row);
    }
    for (std::size_t k = 0; k < K; ++k) {
        const auto col = R.column(k);
        const double mass = std::accumulate(col.begin(), col.end(), 0.0);
        s.completeness += (mass / total) * detail::concentration(col);
    }
    return s;
}

// ---- SAP -------------------------------------------------------------------

/// Mean over factors of the gap between the best and second-best univariate
/// linear R^2 (squared correlation) among latents.
inline double sap(const EvalInput& ev) {
    ev.validate();
    const std::size_t D = ev.latents.cols(), K = ev.factors.cols();
    std::vector<std::vector<double>> lat(D);
    for (std::size_t d = 0; d < D; ++d) lat[d] = ev.latents.column(d);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto f = ev.factors.column(k);
        std::vector<double> r2(D);
        for (std::size_t d = 0; d < D; ++d) {
            const double c = detail::pearson(lat[d], f);
            r2[d] = c * c;
        }
        std::sort(r2.begin(), r2.end(), std::greater<>());
        total += r2[0] - (D > 1 ? r2[1] : 0.0);
    }
    return total / static_cast<double>(K);
}

// ---- Hungarian -------------------------------------------------------------

struct Assignment {
    std::vector<long> row_to_col;  // -1 where a row is matched only to padding
    double cost = 0.0;
};

/// Minimum-cost one-to-one assignment (Kuhn-Munkres with potentials, O(n^3)).
/// Rectangular inputs are padded to square with max-cost + 1.
inline Assignment hungarian(const Matrix& cost) {
    if (cost.empty()) return {};
    if (!cost.all_finite()) throw ContractError("hungarian: non-finite cost entry");
    const std::size_t n = cost.rows(), m = cost.cols(), s = std::max(n, m);
    const double pad = *std::max_element(cost.data().begin(), cost.data().end()) + 1.0;
    const auto c = [&](std::size_t i, std::size_t j) { return i < n && j < m ? cost(i, j) : pad; };

    const double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials; p[j] = row matched to column j.
    std::vector<double> u(s + 1, 0.0), v(s + 1, 0.0);
    std::vector<std::size_t> p(s + 1, 0), way(s + 1, 0);
    for (std::size_t i = 1; i <= s; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(s + 1, inf);
        std::vector<char> used(s + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= s; ++j) {
                if (used[j]) continue;
                const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= s; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment a;
    a.row_to_col.assign(n, -1);
    std::vector<std::size_t> full(s);
    for (std::size_t j = 1; j <= s; ++j) full[p[j] - 1] = j - 1;
    double padded_total = 0.0, identity_total = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
        padded_total += c(i, full[i]);
        identity_total += c(i, i);
        if (i < n && full[i] < m) {
            a.row_to_col[i] = static_cast<long>(full[i]);
            a.cost += cost(i, full[i]);
        }
    }
    const double slack = 1e-9 * (1.0 + std::abs(identity_total));
    if (padded_total > identity_total + slack) {
        throw ContractError("hungarian: assignment worse than the identity assignment");
    }
    return a;
}

// ---- permutation alignment -------------------------------------------------

inline Matrix abs_correlation(const EvalInput& ev) {
    const std::size_t D = ev.latents.cols(), K = ev.factors.cols();
    std::vector<std::vector<double>> f(K);
    for (std::size_t k = 0; k < K; ++k) f[k] = ev.factors.column(k);
    Matrix out(D, K);
    for (std::size_t d = 0; d < D; ++d) {
        const auto l = ev.latents.column(d);
        for (std::size_t k = 0; k < K; ++k) out(d, k) = std::abs(detail::pearson(l, f[k]));
    }
    return out;
}

/// Mean |corr| over latent/factor pairs matched by the Hungarian algorithm on
/// cost 1 - |corr|.
inline double permutation_alignment(const EvalInput& ev) {
    ev.validate();
    const Matrix corr = abs_correlation(ev);
    Matrix cost(corr.rows(), corr.cols());
    for (std::size_t i = 0; i < corr.size(); ++i) cost[i] = 1.0 - corr[i];
    const Assignment a = hungarian(cost);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t d = 0; d < a.row_to_col.size(); ++d) {
        if (a.row_to_col[d] < 0) continue;
        total += corr(d, static_cast<std::size_t>(a.row_to_col[d]));
        ++pairs;
    }
    return pairs > 0 ? total / static_cast<double>(pairs) : 0.0;
}

// ---- report ----------------------------------------------------------------

struct MetricOptions {
    std::size_t bins = 20;
    double lasso_lambda = 0.01;
    std::uint64_t split_seed = 0;
    bool include_nuisance = true;
};

struct MetricScores {
    double mig = 0, dci_d = 0, dci_c = 0, dci_i = 0, sap = 0, perm_align = 0;
};

/// All six scores. `aligned` holds the latents submitted to permutation
/// alignment (construct block only for SE-VAE); `all` feeds the others.
inline MetricScores score_all(const Matrix& all, const Matrix& aligned, const Matrix& factors,
                              const MetricOptions& opt = {}) {
    const EvalInput ev{all, factors};
    MetricScores s;
    s.mig = mig(ev, opt.bins);
    const auto d = dci(lasso_importance(ev, opt.lasso_lambda, opt.split_seed));
    s.dci_d = d.disentanglement;
    s.dci_c = d.completeness;
    s.dci_i = d.informativeness;
    s.sap = sap(ev);
    s.perm_align = permutation_alignment(EvalInput{aligned, factors});
    return s;
}

}  // namespace sevae::metrics
