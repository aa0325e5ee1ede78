#pragma once

// Synthetic tabular benchmark: K latent constructs, J indicators each.
//
// For item (k, j):
//   x = a*z_k + b*tanh(z_k)
//       + [c*z_{k'}          if the item is cross-loaded]
//       + [d*z_k*z_{k''}     if the item carries an interaction]
//       + s*scale*(sin(u) + 0.5*u^2)
//       + noise
// with every loading drawn once per item and kept in the dataset provenance.
// Columns are standardized (zero mean, unit sample SD) after generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevae/error.hpp"
#include "sevae/matrix.hpp"

namespace sevae::datagen {

struct GenSpec {
    std::size_t K = 4;
    std::size_t J = 6;
    std::size_t N = 20000;
    double cross_loading_rate = 0.15;
    double interaction_rate = 0.15;
    double noise_sd = 0.3;
    double confounder_scale = 1.0;
    std::uint64_t seed = 0;

    std::size_t items() const noexcept { return K * J; }

    void validate() const {
        if (K < 2) throw ConfigError("GenSpec: K must be >= 2");
        if (J < 2) throw ConfigError("GenSpec: J must be >= 2");
        if (N < 1) throw ConfigError("GenSpec: N must be >= 1");
        const auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
        if (!rate_ok(cross_loading_rate)) throw ConfigError("GenSpec: cross_loading_rate outside [0,1]");
        if (!rate_ok(interaction_rate)) throw ConfigError("GenSpec: interaction_rate outside [0,1]");
        if (!(noise_sd > 0.0)) throw ConfigError("GenSpec: noise_sd must be > 0");
        if (!(confounder_scale >= 0.0)) throw ConfigError("GenSpec: confounder_scale must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const GenSpec& s) {
    j = nlohmann::json{{"K", s.K},
                       {"J", s.J},
                       {"N", s.N},
                       {"cross_loading_rate", s.cross_loading_rate},
                       {"interaction_rate", s.interaction_rate},
                       {"noise_sd", s.noise_sd},
                       {"confounder_scale", s.confounder_scale},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, GenSpec& s) {
    GenSpec d;
    s.K = j.value("K", d.K);
    s.J = j.value("J", d.J);
    s.N = j.value("N", d.N);
    s.cross_loading_rate = j.value("cross_loading_rate", d.cross_loading_rate);
    s.interaction_rate = j.value("interaction_rate", d.interaction_rate);
    s.noise_sd = j.value("noise_sd", d.noise_sd);
    s.confounder_scale = j.value("confounder_scale", d.confounder_scale);
    s.seed = j.value("seed", d.seed);
}

/// Loadings of one indicator, fixed at generation time.
struct ItemLoading {
    std::size_t construct = 0;
    double primary = 0.0;     // a
    double saturating = 0.0;  // b, on tanh(z_k)
    std::optional<std::size_t> cross_partner;
    double cross = 0.0;  // c
    std::optional<std::size_t> interaction_partner;
    double interaction = 0.0;  // d
    double confounding = 0.0;  // s
};

inline void to_json(nlohmann::json& j, const ItemLoading& it) {
    j = nlohmann::json{{"construct", it.construct},
                       {"a", it.primary},
                       {"b", it.saturating},
                       {"cross_partner", it.cross_partner ? nlohmann::json(*it.cross_partner) : nlohmann::json()},
                       {"c", it.cross},
                       {"interaction_partner",
                        it.interaction_partner ? nlohmann::json(*it.interaction_partner) : nlohmann::json()},
                       {"d", it.interaction},
                       {"s", it.confounding}};
}

struct Dataset {
    Matrix X;           // N x K*J
    Matrix factors;     // N x K
    Matrix confounder;  // N x 1
    GenSpec spec;
    std::vector<ItemLoading> items;

    std::size_t rows() const noexcept { return X.rows(); }
    std::size_t group_of(std::size_t column) const noexcept { return column / spec.J; }

    Dataset select(std::span<const std::size_t> idx) const {
        Dataset out;
        out.X = linalg::select_rows(X, idx);
        out.factors = linalg::select_rows(factors, idx);
        out.confounder = linalg::select_rows(confounder, idx);
        out.spec = spec;
        out.spec.N = idx.size();
        out.items = items;
        return out;
    }
};

namespace detail {

inline void standardize_columns(Matrix& m) {
    const std::size_t n = m.rows();
    if (n < 2) return;
    for (std::size_t c = 0; c < m.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += m(r, c);
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t r = 0; r < n; ++r) ss += (m(r, c) - mean) * (m(r, c) - mean);
        const double sd = std::sqrt(ss / static_cast<double>(n - 1));
        const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
        for (std::size_t r = 0; r < n; ++r) m(r, c) = (m(r, c) - mean) * inv;
    }
}

// Uniform draw over {0..K-1} \ {exclude}.
inline std::size_t other_construct(std::size_t K, std::size_t exclude, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, K - 2);
    const std::size_t r = pick(rng);
    return r >= exclude ? r + 1 : r;
}

}  // namespace detail

inline std::vector<ItemLoading> draw_loadings(const GenSpec& spec) {
    std::seed_seq seq{spec.seed, std::uint64_t{0x10ad}};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> ua(0.7, 1.3), ub(0.3, 0.8), uc(0.2, 0.5), ud(0.1, 0.3),
        us(0.3, 0.9), coin(0.0, 1.0);
    std::vector<ItemLoading> items;
    items.reserve(spec.items());
    for (std::size_t k = 0; k < spec.K; ++k) {
        for (std::size_t j = 0; j < spec.J; ++j) {
            ItemLoading it;
            it.construct = k;
            it.primary = ua(rng);
            it.saturating = ub(rng);
            // Draws happen unconditionally so the stream layout does not
            // depend on the rates.
            const double cross_roll = coin(rng);
            const std::size_t cross_k = detail::other_construct(spec.K, k, rng);
            const double cross_w = uc(rng);
            const double inter_roll = coin(rng);
            const std::size_t inter_k = detail::other_construct(spec.K, k, rng);
            const double inter_w = ud(rng);
            it.confounding = us(rng);
            if (cross_roll < spec.cross_loading_rate) {
                it.cross_partner = cross_k;
                it.cross = cross_w;
            }
            if (inter_roll < spec.interaction_rate) {
                it.interaction_partner = inter_k;
                it.interaction = inter_w;
            }
            items.push_back(it);
        }
    }
    return items;
}

inline Dataset generate(const GenSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.items = draw_loadings(spec);

    std::seed_seq seq{spec.seed, std::uint64_t{0xda7a}};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);

    const std::size_t N = spec.N, K = spec.K, P = spec.items();
    ds.factors = Matrix(N, K);
    ds.confounder = Matrix(N, 1);
    ds.X = Matrix(N, P);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) ds.factors(n, k) = normal(rng);
        const double u = normal(rng);
        ds.confounder(n, 0) = u;
        const double conf = spec.confounder_scale * (std::sin(u) + 0.5 * u * u);
        for (std::size_t c = 0; c < P; ++c) {
            const ItemLoading& it = ds.items[c];
            const double z = ds.factors(n, it.construct);
            double x = it.primary * z + it.saturating * std::tanh(z);
            if (it.cross_partner) x += it.cross * ds.factors(n, *it.cross_partner);
            if (it.interaction_partner) x += it.interaction * z * ds.factors(n, *it.interaction_partner);
            x += it.confounding * conf;
            x += spec.noise_sd * normal(rng);
            ds.X(n, c) = x;
        }
    }
    detail::standardize_columns(ds.X);
    return ds;
}

// ---- cross-loading audit ---------------------------------------------------

struct CrossLoadingAudit {
    std::size_t items = 0;
    std::size_t realized = 0;
    double expected = 0.0;
    std::size_t lower = 0;  // two-sided 99% binomial bounds
    std::size_t upper = 0;
    bool passes = false;
};

namespace detail {

// Smallest k with P(X <= k) >= q for X ~ Binomial(n, p).
inline std::size_t binomial_quantile(std::size_t n, double p, double q) {
    if (p <= 0.0) return 0;
    if (p >= 1.0) return n;
    double cdf = 0.0;
    for (std::size_t k = 0; k <= n; ++k) {
        const double lp = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                          k * std::log(p) + (n - k) * std::log1p(-p);
        cdf += std::exp(lp);
        if (cdf >= q) return k;
    }
    return n;
}

}  // namespace detail

inline CrossLoadingAudit expected_cross_loading_count(const Dataset& ds) {
    CrossLoadingAudit a;
    a.items = ds.items.size();
    a.realized = static_cast<std::size_t>(std::count_if(
        ds.items.begin(), ds.items.end(), [](const ItemLoading& it) { return it.cross_partner.has_value(); }));
    const double p = ds.spec.cross_loading_rate;
    a.expected = p * static_cast<double>(a.items);
    a.lower = detail::binomial_quantile(a.items, p, 0.005);
    a.upper = detail::binomial_quantile(a.items, p, 0.995);
    a.passes = a.realized >= a.lower && a.realized <= a.upper;
    return a;
}

// ---- splitting -------------------------------------------------------------

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw ConfigError("split: train_frac must lie strictly between 0 and 1");
    }
    const std::size_t n = ds.rows();
    const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
    if (n_train == 0 || n_train == n) {
        throw ConfigError("split: degenerate partition (" + std::to_string(n_train) + " of " +
                          std::to_string(n) + " rows)");
    }
    const auto idx = shuffled_indices(n, seed);
    const std::span<const std::size_t> all(idx);
    return {ds.select(all.first(n_train)), ds.select(all.subspan(n_train))};
}

// ---- CSV / JSON export -----------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_header(std::size_t K, std::size_t J) {
    std::ostringstream os;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < J; ++j) os << "x_" << k << "_" << j << ",";
    for (std::size_t k = 0; k < K; ++k) os << "factor_" << k << ",";
    os << "confounder";
    return os.str();
}

inline void write_csv(const Dataset& ds, std::ostream& os) {
    os << csv_header(ds.spec.K, ds.spec.J) << "\n";
    for (std::size_t r = 0; r < ds.rows(); ++r) {
        for (double v : ds.X.row(r)) os << format_double(v) << ",";
        for (double v : ds.factors.row(r)) os << format_double(v) << ",";
        os << format_double(ds.confounder(r, 0)) << "\n";
    }
}

inline nlohmann::json spec_document(const Dataset& ds) {
    return nlohmann::json{{"spec", ds.spec}, {"items", ds.items}};
}

/// Reads a CSV written by write_csv. K and J are recovered from the header.
inline Dataset read_csv(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw ConfigError("dataset CSV is empty");
    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
    }
    const std::regex item_re(R"(x_(\d+)_(\d+))");
    std::size_t K = 0, J = 0, n_items = 0;
    for (const auto& c : cols) {
        std::smatch m;
        if (std::regex_match(c, m, item_re)) {
            K = std::max<std::size_t>(K, std::stoul(m[1]) + 1);
            J = std::max<std::size_t>(J, std::stoul(m[2]) + 1);
            ++n_items;
        }
    }
    if (n_items == 0 || n_items != K * J || cols.size() != K * J + K + 1 || cols.back() != "confounder") {
        throw ConfigError("dataset CSV header does not match x_k_j,...,factor_k,...,confounder");
    }
    if (header != csv_header(K, J)) throw ConfigError("dataset CSV columns are out of order");

    std::vector<double> x, f, u;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::size_t c = 0;
        while (std::getline(ss, tok, ',')) {
            const double v = std::stod(tok);
            if (c < K * J) x.push_back(v);
            else if (c < K * J + K) f.push_back(v);
            else u.push_back(v);
            ++c;
        }
        if (c != cols.size()) throw ConfigError("dataset CSV row " + std::to_string(n + 1) + " is ragged");
        ++n;
    }
    Dataset ds;
    ds.X = Matrix(n, K * J, std::move(x));
    ds.factors = Matrix(n, K, std::move(f));
    ds.confounder = Matrix(n, 1, std::move(u));
    ds.spec.K = K;
    ds.spec.J = J;
    ds.spec.N = n;
    return ds;
}

}  // namespace sevae::datagen
