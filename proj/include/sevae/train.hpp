#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevae/datagen.hpp"
#include "sevae/error.hpp"
#include "sevae/models.hpp"
#include "sevae/nn.hpp"

namespace sevae::models {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch = 128;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
    j = nlohmann::json{{"epochs", t.epochs}, {"batch", t.batch}, {"lr", t.lr}, {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
    const TrainConfig d;
    t.epochs = j.value("epochs", d.epochs);
    t.batch = j.value("batch", d.batch);
    t.lr = j.value("lr", d.lr);
    t.seed = j.value("seed", d.seed);
}

struct TrainResult {
    Model model;
    std::vector<LossBreakdown> history;  // batch-size weighted epoch means
};

namespace detail {

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
    acc.recon += w * b.recon;
    acc.kl += w * b.kl;
    acc.tc += w * b.tc;
    acc.ortho += w * b.ortho;
    acc.adv += w * b.adv;
    acc.total += w * b.total;
    acc.anneal_weight += w * b.anneal_weight;
}

inline LossBreakdown weights_only(const LossBreakdown& b) {
    LossBreakdown out;
    out.anneal_weight = 0.0;
    out.beta = b.beta;
    out.gamma = b.gamma;
    out.alpha = b.alpha;
    out.lambda_adv = b.lambda_adv;
    return out;
}

inline void scale(LossBreakdown& b, double s) {
    b.recon *= s;
    b.kl *= s;
    b.tc *= s;
    b.ortho *= s;
    b.adv *= s;
    b.total *= s;
    b.anneal_weight *= s;
}

}  // namespace detail

/// Mini-batch Adam. Shuffling, sampling noise and initialization each draw
/// from their own stream derived from cfg.seed.
inline TrainResult train(const ModelConfig& model_cfg, const Matrix& X, const TrainConfig& cfg) {
    if (X.cols() != model_cfg.arch.items()) {
        throw DimensionError("train: data has " + std::to_string(X.cols()) + " columns, model expects K*J = " +
                             std::to_string(model_cfg.arch.items()));
    }
    if (cfg.batch < 2) throw ConfigError("train: batch size must be >= 2");
    if (X.rows() < 2) throw ConfigError("train: need at least 2 rows");

    TrainResult result{Model::create(model_cfg, cfg.seed), {}};
    Model& model = result.model;

    std::seed_seq shuffle_seq{cfg.seed, std::uint64_t{0x5f}};
    std::seed_seq noise_seq{cfg.seed, std::uint64_t{0x2015e}};
    nn::Rng shuffle_rng(shuffle_seq);
    nn::Rng noise_rng(noise_seq);

    nn::AdamState opt;
    opt.config.lr = cfg.lr;
    nn::AdamState disc_opt;
    disc_opt.config.lr = model_cfg.baseline.disc_lr;
    const bool has_disc = !model.is_sevae() && model.baseline().discriminator.has_value();

    const auto params = model.parameters();
    const auto disc_params = has_disc ? model.baseline().discriminator_parameters() : nn::ParameterRefs{};
    const double dataset_size = static_cast<double>(X.rows());

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = datagen::shuffled_indices(X.rows(), shuffle_rng());
        LossBreakdown epoch_acc;
        bool have_weights = false;
        double seen = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            if (n < 2) continue;  // batch statistics need two rows
            const Matrix xb = linalg::select_rows(X, std::span(order).subspan(start, n));

            ad::Tape tape;
            LossGraph g;
            try {
                g = model.loss_graph(tape, xb, noise_rng, step, dataset_size);
            } catch (const TrainingError& e) {
                throw TrainingError("divergence at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!have_weights) {
                epoch_acc = detail::weights_only(g.breakdown);
                have_weights = true;
            }
            auto grads = tape.backward(g.total);
            nn::adam_step(params, grads, opt);

            if (has_disc) {
                ad::Tape disc_tape;
                Var dl = discriminator_loss(disc_tape, model.baseline(), g.z->value(), noise_rng);
                nn::adam_step(disc_params, disc_tape.backward(dl), disc_opt);
            }
            detail::accumulate(epoch_acc, g.breakdown, static_cast<double>(n));
            seen += static_cast<double>(n);
            ++step;
        }
        if (seen > 0) detail::scale(epoch_acc, 1.0 / seen);
        if (!std::isfinite(epoch_acc.total)) {
            throw TrainingError("divergence at epoch " + std::to_string(epoch) + ": non-finite total loss");
        }
        result.history.push_back(epoch_acc);
    }
    return result;
}

/// Loss components averaged over the whole matrix in batches, without training.
inline LossBreakdown evaluate_loss(const Model& model, const Matrix& X, std::size_t batch,
                                   std::uint64_t seed, std::size_t step = 0) {
    nn::Rng rng(seed);
    LossBreakdown acc;
    bool have_weights = false;
    double seen = 0.0;
    for (std::size_t start = 0; start < X.rows(); start += batch) {
        const std::size_t n = std::min(batch, X.rows() - start);
        if (n < 2) continue;
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        ad::Tape tape(false);
        auto g = model.loss_graph(tape, linalg::select_rows(X, idx), rng, step, static_cast<double>(X.rows()));
        if (!have_weights) {
            acc = detail::weights_only(g.breakdown);
            have_weights = true;
        }
        detail::accumulate(acc, g.breakdown, static_cast<double>(n));
        seen += static_cast<double>(n);
    }
    if (seen > 0) detail::scale(acc, 1.0 / seen);
    return acc;
}

inline void write_loss_curves(const std::vector<LossBreakdown>& history, std::ostream& os) {
    os << "epoch,recon,kl,tc,ortho,adv,total,anneal_weight\n";
    for (std::size_t e = 0; e < history.size(); ++e) {
        const auto& h = history[e];
        os << e << "," << datagen::format_double(h.recon) << "," << datagen::format_double(h.kl) << ","
           << datagen::format_double(h.tc) << "," << datagen::format_double(h.ortho) << ","
           << datagen::format_double(h.adv) << "," << datagen::format_double(h.total) << ","
           << datagen::format_double(h.anneal_weight) << "\n";
    }
}

}  // namespace sevae::models
