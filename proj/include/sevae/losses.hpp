#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <vector>

#include "sevae/autodiff.hpp"
#include "sevae/error.hpp"
#include "sevae/matrix.hpp"

namespace sevae::losses {

using ad::Var;

/// z = mu + exp(0.5 * logvar) * noise, with noise a constant draw.
inline Var reparameterize(Var mu, Var logvar, const Matrix& noise) {
    if (!mu.value().same_shape(logvar.value()) || !mu.value().same_shape(noise)) {
        throw DimensionError("reparameterize: mu " + mu.value().shape() + ", logvar " +
                             logvar.value().shape() + ", noise " + noise.shape());
    }
    Var eps = mu.tape->constant(noise);
    return ad::add(mu, ad::mul(ad::exp(ad::scale(logvar, 0.5)), eps));
}

/// Batch mean of 0.5 * sum_d (exp(logvar) + mu^2 - 1 - logvar).
inline Var kl_gaussian(Var mu, Var logvar) {
    if (!mu.value().same_shape(logvar.value())) {
        throw DimensionError("kl_gaussian: mu " + mu.value().shape() + " vs logvar " +
                             logvar.value().shape());
    }
    const double batch = static_cast<double>(mu.rows());
    Var terms = ad::sub(ad::add(ad::exp(logvar), ad::square(mu)), ad::add_scalar(logvar, 1.0));
    return ad::scale(ad::sum(terms), 0.5 / batch);
}

/// Minibatch-weighted-sampling estimate of the total correlation of q(z):
///   mean_i [ log q(z_i) - sum_d log q(z_id) ]
/// where log q(z_i) ~= logsumexp_j log q(z_i | x_j) - log(B * dataset_size)
/// and each marginal uses the same normalization.
inline Var total_correlation_mws(Var z, Var mu, Var logvar, double dataset_size) {
    const Matrix& zv = z.value();
    const Matrix& mv = mu.value();
    const Matrix& lv = logvar.value();
    if (!zv.same_shape(mv) || !zv.same_shape(lv)) {
        throw DimensionError("total_correlation_mws: z " + zv.shape() + ", mu " + mv.shape() +
                             ", logvar " + lv.shape());
    }
    const std::size_t B = zv.rows(), D = zv.cols();
    if (B < 2) throw ContractError("total_correlation_mws needs a batch of at least 2");
    if (!(dataset_size >= 1.0)) throw ContractError("total_correlation_mws: dataset_size < 1");

    const double log2pi = std::log(2.0 * std::numbers::pi);
    // logq[(i*B + j)*D + d] = log N(z_id; mu_jd, exp(lv_jd))
    auto logq = std::make_shared<std::vector<double>>(B * B * D);
    auto joint = std::make_shared<std::vector<double>>(B);
    auto marg = std::make_shared<std::vector<double>>(B * D);
    auto inv_var = std::make_shared<std::vector<double>>(B * D);
    for (std::size_t k = 0; k < B * D; ++k) (*inv_var)[k] = std::exp(-lv[k]);

    std::vector<double> rowsum(B);
    double acc = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < B; ++j) {
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = zv(i, d) - mv(j, d);
                const double l = -0.5 * (log2pi + lv(j, d) + diff * diff * (*inv_var)[j * D + d]);
                (*logq)[(i * B + j) * D + d] = l;
                s += l;
            }
            rowsum[j] = s;
        }
        double mx = rowsum[0];
        for (std::size_t j = 1; j < B; ++j) mx = std::max(mx, rowsum[j]);
        double se = 0.0;
        for (std::size_t j = 0; j < B; ++j) se += std::exp(rowsum[j] - mx);
        (*joint)[i] = mx + std::log(se);

        double marg_total = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            double md = (*logq)[(i * B) * D + d];
            for (std::size_t j = 1; j < B; ++j) md = std::max(md, (*logq)[(i * B + j) * D + d]);
            double sd = 0.0;
            for (std::size_t j = 0; j < B; ++j) sd += std::exp((*logq)[(i * B + j) * D + d] - md);
            (*marg)[i * D + d] = md + std::log(sd);
            marg_total += (*marg)[i * D + d];
        }
        acc += (*joint)[i] - marg_total;
    }
    const double offset =
        static_cast<double>(D - 1) * std::log(static_cast<double>(B) * dataset_size);
    const double tc = acc / static_cast<double>(B) + offset;

    return z.tape->record(
        Matrix(1, 1, tc), {z, mu, logvar},
        [z, mu, logvar, logq, joint, marg, inv_var, B, D](ad::Tape& t, const Matrix& g) {
            const Matrix& zv = z.value();
            const Matrix& mv = mu.value();
            Matrix gz(B, D), gmu(B, D), glv(B, D);
            const double w0 = g[0] / static_cast<double>(B);
            std::vector<double> p(B);
            for (std::size_t i = 0; i < B; ++i) {
                for (std::size_t j = 0; j < B; ++j) {
                    double s = 0.0;
                    for (std::size_t d = 0; d < D; ++d) s += (*logq)[(i * B + j) * D + d];
                    p[j] = std::exp(s - (*joint)[i]);
                }
                for (std::size_t j = 0; j < B; ++j) {
                    for (std::size_t d = 0; d < D; ++d) {
                        const double l = (*logq)[(i * B + j) * D + d];
                        const double r = std::exp(l - (*marg)[i * D + d]);
                        const double w = w0 * (p[j] - r);
                        if (w == 0.0) continue;
                        const double iv = (*inv_var)[j * D + d];
                        const double diff = zv(i, d) - mv(j, d);
                        gz(i, d) -= w * diff * iv;
                        gmu(j, d) += w * diff * iv;
                        glv(j, d) += w * (-0.5 + 0.5 * diff * diff * iv);
                    }
                }
            }
            t.accumulate(z, std::move(gz));
            t.accumulate(mu, std::move(gmu));
            t.accumulate(logvar, std::move(glv));
        });
}

/// Centered batch covariance, (1/B) * Zc^T Zc.
inline Var batch_covariance(Var z) {
    if (z.rows() < 2) throw ContractError("batch_covariance needs a batch of at least 2");
    Var centered = ad::add_row(z, ad::neg(ad::col_mean(z)));
    return ad::scale(ad::matmul(ad::transpose(centered), centered),
                     1.0 / static_cast<double>(z.rows()));
}

/// Mean over cross-block dimension pairs of the squared centered batch
/// covariance between construct blocks of width block_dim.
inline Var orthogonality_penalty(Var z_constructs, std::size_t blocks, std::size_t block_dim) {
    if (blocks < 2) throw ContractError("orthogonality_penalty needs at least 2 blocks");
    if (z_constructs.cols() != blocks * block_dim) {
        throw DimensionError("orthogonality_penalty: " + z_constructs.value().shape() + " is not " +
                             std::to_string(blocks) + " blocks of width " + std::to_string(block_dim));
    }
    const std::size_t D = blocks * block_dim;
    Matrix mask(D, D);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < D; ++a) {
        for (std::size_t b = 0; b < D; ++b) {
            if (a / block_dim < b / block_dim) {
                mask(a, b) = 1.0;
                ++pairs;
            }
        }
    }
    Var cov = batch_covariance(z_constructs);
    Var masked = ad::mul(ad::square(cov), z_constructs.tape->constant(std::move(mask)));
    return ad::scale(ad::sum(masked), 1.0 / static_cast<double>(pairs));
}

/// DIP-VAE-II moment matching on Cov_q[z] = Cov[mu] + E[diag(sigma^2)]:
///   sum_{i != j} Cov_ij^2 + diag_ratio * sum_i (Cov_ii - 1)^2
inline Var dip_penalty(Var mu, Var logvar, double diag_ratio) {
    if (!mu.value().same_shape(logvar.value())) {
        throw DimensionError("dip_penalty: mu " + mu.value().shape() + " vs logvar " +
                             logvar.value().shape());
    }
    const std::size_t D = mu.cols();
    Matrix off(D, D, 1.0);
    for (std::size_t d = 0; d < D; ++d) off(d, d) = 0.0;
    Var cov_mu = batch_covariance(mu);
    Var off_term = ad::sum(ad::mul(ad::square(cov_mu), mu.tape->constant(std::move(off))));
    Var centered = ad::add_row(mu, ad::neg(ad::col_mean(mu)));
    Var diag = ad::add(ad::col_mean(ad::square(centered)), ad::col_mean(ad::exp(logvar)));
    Var diag_term = ad::sum(ad::square(ad::add_scalar(diag, -1.0)));
    return ad::add(off_term, ad::scale(diag_term, diag_ratio));
}

struct AnnealSchedule {
    bool enabled = false;
    std::size_t warmup_steps = 500;
};

/// Linear KL warm-up: min(1, step / warmup_steps); 1 when disabled.
inline double kl_anneal_weight(std::size_t step, const AnnealSchedule& s) {
    if (!s.enabled) return 1.0;
    if (s.warmup_steps == 0) throw ConfigError("KL annealing enabled with warmup_steps = 0");
    return std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
}

}  // namespace sevae::losses
