#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevae/autodiff.hpp"
#include "sevae/error.hpp"
#include "sevae/losses.hpp"
#include "sevae/matrix.hpp"
#include "sevae/nn.hpp"

namespace sevae::models {

using ad::Tape;
using ad::Var;
using losses::AnnealSchedule;

enum class ModelKind { sevae, vae, beta_vae, factor_vae, dip_vae, beta_tcvae };

inline constexpr ModelKind kAllKinds[] = {ModelKind::sevae,      ModelKind::vae,
                                          ModelKind::beta_vae,   ModelKind::factor_vae,
                                          ModelKind::dip_vae,    ModelKind::beta_tcvae};

inline std::string_view to_string(ModelKind k) {
    switch (k) {
        case ModelKind::sevae: return "sevae";
        case ModelKind::vae: return "vae";
        case ModelKind::beta_vae: return "beta_vae";
        case ModelKind::factor_vae: return "factor_vae";
        case ModelKind::dip_vae: return "dip_vae";
        case ModelKind::beta_tcvae: return "beta_tcvae";
    }
    return "?";
}

inline ModelKind parse_kind(std::string_view s) {
    for (ModelKind k : kAllKinds) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

/// Architecture and loss weights. The SE-VAE uses every field; baselines use
/// K, J, hidden and the baseline block.
struct SevaeConfig {
    std::size_t K = 4;
    std::size_t J = 6;
    std::size_t d_k = 1;
    std::size_t d_m = 2;
    std::size_t d_c = 8;
    std::vector<std::size_t> hidden{64, 64};
    double beta = 1.0;
    double gamma = 0.0;
    double alpha = 0.0;
    double lambda_adv = 1.0;
    AnnealSchedule anneal;
    bool tc_include_nuisance = true;

    std::size_t items() const noexcept { return K * J; }

    void validate() const {
        if (K < 1 || J < 1 || d_k < 1 || d_c < 1) {
            throw ConfigError("SevaeConfig: K, J, d_k and d_c must be >= 1");
        }
        for (std::size_t h : hidden) {
            if (h == 0) throw ConfigError("SevaeConfig: zero hidden width");
        }
        if (beta < 0 || gamma < 0 || alpha < 0 || lambda_adv < 0) {
            throw ConfigError("SevaeConfig: loss weights must be >= 0");
        }
        if (anneal.enabled && anneal.warmup_steps == 0) {
            throw ConfigError("SevaeConfig: annealing enabled with warmup_steps = 0");
        }
    }
};

/// Regularization strengths for the baseline objectives.
struct BaselineHyper {
    double beta = 4.0;         // beta_vae KL weight
    double factor_gamma = 10;  // factor_vae TC weight
    double tc_beta = 6.0;      // beta_tcvae weight on the TC term of the KL decomposition
    double lambda_od = 10.0;   // dip_vae off-diagonal weight
    double lambda_d = 10.0;    // dip_vae diagonal weight
    std::size_t latent_dim = 0;  // 0 means "match K"
    std::vector<std::size_t> disc_hidden{64, 64, 64};
    double disc_lr = 1e-4;
};

struct ModelConfig {
    ModelKind kind = ModelKind::sevae;
    SevaeConfig arch;
    BaselineHyper baseline;

    std::size_t baseline_latent_dim() const {
        return baseline.latent_dim == 0 ? arch.K : baseline.latent_dim;
    }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Posterior parameters for a batch.
struct LatentCodes {
    Matrix mu_constructs;      // N x K*d_k (baselines: N x D)
    Matrix logvar_constructs;  // same
    Matrix mu_m;               // N x d_m (baselines: N x 0)
    Matrix logvar_m;
};

struct LossBreakdown {
    double recon = 0, kl = 0, tc = 0, ortho = 0, adv = 0, total = 0;
    double anneal_weight = 1.0;
    // Weights the total was assembled with.
    double beta = 1.0, gamma = 0.0, alpha = 0.0, lambda_adv = 0.0;

    double recomposed() const {
        return recon + anneal_weight * beta * kl + gamma * tc + alpha * ortho + lambda_adv * adv;
    }
};

/// Tape handles for one loss evaluation.
struct LossGraph {
    Var total;
    Var recon, kl, tc, ortho, adv;
    LossBreakdown breakdown;
    // Sampled latent (baselines) used by the FactorVAE discriminator.
    std::optional<Var> z;
};

// ---- SE-VAE ----------------------------------------------------------------

struct SevaeModel {
    SevaeConfig config;
    nn::Mlp context_encoder;               // K*J -> d_c
    std::vector<nn::Mlp> group_encoders;   // J + d_c -> 2*d_k
    std::optional<nn::Mlp> nuisance_encoder;  // K*J -> 2*d_m
    std::vector<nn::Mlp> decoders;         // d_k + d_m -> J
    std::vector<nn::Mlp> adversaries;      // d_m -> J

    static SevaeModel create(const SevaeConfig& cfg, nn::Rng& rng) {
        cfg.validate();
        SevaeModel m;
        m.config = cfg;
        const auto& h = cfg.hidden;
        m.context_encoder = nn::init_mlp("context", nn::chain_dims(cfg.items(), h, cfg.d_c), rng);
        for (std::size_t k = 0; k < cfg.K; ++k) {
            m.group_encoders.push_back(nn::init_mlp(
                "encoder" + std::to_string(k), nn::chain_dims(cfg.J + cfg.d_c, h, 2 * cfg.d_k), rng));
        }
        if (cfg.d_m > 0) {
            m.nuisance_encoder =
                nn::init_mlp("nuisance", nn::chain_dims(cfg.items(), h, 2 * cfg.d_m), rng);
        }
        for (std::size_t k = 0; k < cfg.K; ++k) {
            m.decoders.push_back(nn::init_mlp("decoder" + std::to_string(k),
                                              nn::chain_dims(cfg.d_k + cfg.d_m, h, cfg.J), rng));
        }
        if (cfg.d_m > 0) {
            for (std::size_t k = 0; k < cfg.K; ++k) {
                m.adversaries.push_back(nn::init_mlp("adversary" + std::to_string(k),
                                                     nn::chain_dims(cfg.d_m, h, cfg.J), rng));
            }
        }
        return m;
    }

    nn::ParameterRefs parameters() {
        nn::ParameterRefs out;
        context_encoder.append_parameters(out);
        for (auto& e : group_encoders) e.append_parameters(out);
        if (nuisance_encoder) nuisance_encoder->append_parameters(out);
        for (auto& d : decoders) d.append_parameters(out);
        for (auto& a : adversaries) a.append_parameters(out);
        return out;
    }
};

struct SevaeEncoded {
    Var mu_c, logvar_c;
    std::optional<Var> mu_m, logvar_m;
    Var context;
};

inline SevaeEncoded sevae_encode(Tape& tape, const SevaeModel& m, Var x) {
    const auto& c = m.config;
    if (x.cols() != c.items()) {
        throw DimensionError("encode: batch has " + std::to_string(x.cols()) + " columns, model expects K*J = " +
                             std::to_string(c.items()));
    }
    SevaeEncoded out;
    // One context vector shared by every group encoder.
    out.context = nn::mlp_forward(tape, m.context_encoder, x);
    std::vector<Var> mus, lvs;
    for (std::size_t k = 0; k < c.K; ++k) {
        Var xk = ad::slice_cols(x, k * c.J, c.J);
        Var h = nn::mlp_forward(tape, m.group_encoders[k], ad::concat_cols({xk, out.context}));
        mus.push_back(ad::slice_cols(h, 0, c.d_k));
        lvs.push_back(ad::slice_cols(h, c.d_k, c.d_k));
    }
    out.mu_c = ad::concat_cols(mus);
    out.logvar_c = ad::concat_cols(lvs);
    if (m.nuisance_encoder) {
        Var h = nn::mlp_forward(tape, *m.nuisance_encoder, x);
        out.mu_m = ad::slice_cols(h, 0, c.d_m);
        out.logvar_m = ad::slice_cols(h, c.d_m, c.d_m);
    }
    return out;
}

struct SevaeDecoded {
    Var x_hat;
    std::optional<Var> x_adv;
};

/// Main reconstruction D_k([z_k, z_m]) and adversarial reconstruction A_k(z_m).
/// adversary_input replaces z_m on the adversarial path when given.
inline SevaeDecoded sevae_decode(Tape& tape, const SevaeModel& m, Var z_c, std::optional<Var> z_m,
                                 std::optional<Var> adversary_input = std::nullopt) {
    const auto& c = m.config;
    if (z_c.cols() != c.K * c.d_k) {
        throw DimensionError("decode: construct latent has " + std::to_string(z_c.cols()) +
                             " columns, expected " + std::to_string(c.K * c.d_k));
    }
    if ((c.d_m > 0) != z_m.has_value() || (z_m && z_m->cols() != c.d_m)) {
        throw DimensionError("decode: nuisance latent does not match d_m = " + std::to_string(c.d_m));
    }
    SevaeDecoded out;
    std::vector<Var> parts;
    for (std::size_t k = 0; k < c.K; ++k) {
        Var zk = ad::slice_cols(z_c, k * c.d_k, c.d_k);
        Var in = z_m ? ad::concat_cols({zk, *z_m}) : zk;
        parts.push_back(nn::mlp_forward(tape, m.decoders[k], in));
    }
    out.x_hat = ad::concat_cols(parts);
    if (z_m) {
        Var a_in = adversary_input.value_or(*z_m);
        std::vector<Var> adv;
        for (std::size_t k = 0; k < c.K; ++k) adv.push_back(nn::mlp_forward(tape, m.adversaries[k], a_in));
        out.x_adv = ad::concat_cols(adv);
    }
    return out;
}

namespace detail {

inline Matrix normal_matrix(std::size_t rows, std::size_t cols, nn::Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = n(rng);
    return m;
}

inline void check_finite(const LossBreakdown& b) {
    const std::pair<const char*, double> parts[] = {{"recon", b.recon}, {"kl", b.kl}, {"tc", b.tc},
                                                    {"ortho", b.ortho}, {"adv", b.adv}, {"total", b.total}};
    for (const auto& [name, v] : parts) {
        if (!std::isfinite(v)) throw TrainingError(std::string("non-finite loss component '") + name + "'");
    }
}

inline Var zero(Tape& tape) { return tape.constant(Matrix(1, 1)); }

// Weighted sum assembled on the tape so the scalar equals recomposed().
inline Var assemble_total(Tape& tape, LossGraph& g) {
    const auto& b = g.breakdown;
    Var total = g.recon;
    const auto term = [&](Var v, double w) {
        if (w != 0.0) total = ad::add(total, ad::scale(v, w));
    };
    term(g.kl, b.anneal_weight * b.beta);
    term(g.tc, b.gamma);
    term(g.ortho, b.alpha);
    term(g.adv, b.lambda_adv);
    (void)tape;
    return total;
}

inline void fill_values(LossGraph& g) {
    auto& b = g.breakdown;
    b.recon = g.recon.scalar();
    b.kl = g.kl.scalar();
    b.tc = g.tc.scalar();
    b.ortho = g.ortho.scalar();
    b.adv = g.adv.scalar();
}

}  // namespace detail

/// (1/K) * sum_k MSE(x_k, x_hat_k), where the per-group MSE is the squared error
/// summed over the group's J indicators and averaged over the batch.
inline Var grouped_mse(Var x, Var x_hat, std::size_t K, std::size_t J) {
    if (x.cols() != K * J || !x.value().same_shape(x_hat.value())) {
        throw DimensionError("grouped_mse: " + x.value().shape() + " vs " + x_hat.value().shape() +
                             " for K*J = " + std::to_string(K * J));
    }
    const double B = static_cast<double>(x.rows());
    Var acc = ad::sum(ad::square(ad::sub(ad::slice_cols(x_hat, 0, J), ad::slice_cols(x, 0, J))));
    for (std::size_t k = 1; k < K; ++k) {
        acc = ad::add(acc, ad::sum(ad::square(
                               ad::sub(ad::slice_cols(x_hat, k * J, J), ad::slice_cols(x, k * J, J)))));
    }
    return ad::scale(acc, 1.0 / (B * static_cast<double>(K)));
}

/// Full SE-VAE objective on a batch. The adversarial decoders see z_m through
/// a gradient-reversal node: they descend on their reconstruction error while
/// the nuisance encoder receives the negated gradient.
inline LossGraph sevae_loss_graph(Tape& tape, const SevaeModel& m, const Matrix& X, nn::Rng& rng,
                                  std::size_t step, double dataset_size) {
    const auto& c = m.config;
    const std::size_t B = X.rows();
    Var x = tape.constant(X);
    SevaeEncoded enc = sevae_encode(tape, m, x);
    Var z_c = losses::reparameterize(enc.mu_c, enc.logvar_c, detail::normal_matrix(B, c.K * c.d_k, rng));
    std::optional<Var> z_m;
    if (enc.mu_m) {
        z_m = losses::reparameterize(*enc.mu_m, *enc.logvar_m, detail::normal_matrix(B, c.d_m, rng));
    }
    std::optional<Var> adv_in;
    if (z_m) adv_in = ad::grad_reverse(*z_m);
    SevaeDecoded dec = sevae_decode(tape, m, z_c, z_m, adv_in);

    LossGraph g;
    g.recon = grouped_mse(x, dec.x_hat, c.K, c.J);
    g.adv = dec.x_adv ? grouped_mse(x, *dec.x_adv, c.K, c.J) : detail::zero(tape);

    Var all_mu = enc.mu_c, all_lv = enc.logvar_c, all_z = z_c;
    if (z_m) {
        all_mu = ad::concat_cols({enc.mu_c, *enc.mu_m});
        all_lv = ad::concat_cols({enc.logvar_c, *enc.logvar_m});
        all_z = ad::concat_cols({z_c, *z_m});
    }
    g.kl = losses::kl_gaussian(all_mu, all_lv);
    if (c.tc_include_nuisance) {
        g.tc = losses::total_correlation_mws(all_z, all_mu, all_lv, dataset_size);
    } else {
        g.tc = losses::total_correlation_mws(z_c, enc.mu_c, enc.logvar_c, dataset_size);
    }
    g.ortho = c.K >= 2 ? losses::orthogonality_penalty(z_c, c.K, c.d_k) : detail::zero(tape);

    auto& b = g.breakdown;
    b.anneal_weight = losses::kl_anneal_weight(step, c.anneal);
    b.beta = c.beta;
    b.gamma = c.gamma;
    b.alpha = c.alpha;
    b.lambda_adv = c.lambda_adv;
    detail::fill_values(g);
    g.total = detail::assemble_total(tape, g);
    b.total = g.total.scalar();
    detail::check_finite(b);
    return g;
}

// ---- baselines -------------------------------------------------------------

struct BaselineModel {
    ModelKind kind = ModelKind::vae;
    SevaeConfig arch;
    BaselineHyper hyper;
    std::size_t latent_dim = 0;
    nn::Mlp encoder;  // K*J -> 2*D
    nn::Mlp decoder;  // D -> K*J
    std::optional<nn::Mlp> discriminator;  // FactorVAE: D -> 1 logit

    static BaselineModel create(const ModelConfig& cfg, nn::Rng& rng) {
        if (cfg.kind == ModelKind::sevae) throw ConfigError("BaselineModel cannot be an sevae");
        BaselineModel m;
        m.kind = cfg.kind;
        m.arch = cfg.arch;
        m.hyper = cfg.baseline;
        m.latent_dim = cfg.baseline_latent_dim();
        const auto& h = cfg.arch.hidden;
        const std::size_t P = cfg.arch.items();
        m.encoder = nn::init_mlp("encoder", nn::chain_dims(P, h, 2 * m.latent_dim), rng);
        m.decoder = nn::init_mlp("decoder", nn::chain_dims(m.latent_dim, h, P), rng);
        if (cfg.kind == ModelKind::factor_vae) {
            nn::Mlp d = nn::init_mlp("discriminator",
                                     nn::chain_dims(m.latent_dim, cfg.baseline.disc_hidden, 1), rng);
            // Zero output layer: the density-ratio logit starts at exactly 0.
            d.layers.back().weight = Matrix(d.layers.back().in_dim(), 1);
            m.discriminator = std::move(d);
        }
        return m;
    }

    nn::ParameterRefs parameters() {
        nn::ParameterRefs out;
        encoder.append_parameters(out);
        decoder.append_parameters(out);
        return out;
    }
    nn::ParameterRefs discriminator_parameters() {
        nn::ParameterRefs out;
        if (discriminator) discriminator->append_parameters(out);
        return out;
    }
};

inline std::pair<Var, Var> baseline_encode(Tape& tape, const BaselineModel& m, Var x) {
    if (x.cols() != m.arch.items()) {
        throw DimensionError("encode: batch has " + std::to_string(x.cols()) + " columns, model expects K*J = " +
                             std::to_string(m.arch.items()));
    }
    Var h = nn::mlp_forward(tape, m.encoder, x);
    return {ad::slice_cols(h, 0, m.latent_dim), ad::slice_cols(h, m.latent_dim, m.latent_dim)};
}

/// Each latent column permuted independently across the batch.
inline Matrix permute_dims(const Matrix& z, nn::Rng& rng) {
    Matrix out(z.rows(), z.cols());
    std::vector<std::size_t> idx(z.rows());
    for (std::size_t d = 0; d < z.cols(); ++d) {
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < idx.size(); ++i) out(i, d) = z(idx[i], d);
    }
    return out;
}

inline LossGraph baseline_loss_graph(Tape& tape, const BaselineModel& m, const Matrix& X, nn::Rng& rng,
                                     std::size_t step, double dataset_size) {
    const std::size_t B = X.rows();
    Var x = tape.constant(X);
    auto [mu, lv] = baseline_encode(tape, m, x);
    Var z = losses::reparameterize(mu, lv, detail::normal_matrix(B, m.latent_dim, rng));
    Var x_hat = nn::mlp_forward(tape, m.decoder, z);

    LossGraph g;
    g.z = z;
    g.recon = grouped_mse(x, x_hat, m.arch.K, m.arch.J);
    g.kl = losses::kl_gaussian(mu, lv);
    g.tc = detail::zero(tape);
    g.ortho = detail::zero(tape);
    g.adv = detail::zero(tape);

    auto& b = g.breakdown;
    b.anneal_weight = losses::kl_anneal_weight(step, m.arch.anneal);
    b.beta = 1.0;
    b.gamma = 0.0;
    b.alpha = 0.0;
    b.lambda_adv = 0.0;
    switch (m.kind) {
        case ModelKind::vae: break;
        case ModelKind::beta_vae: b.beta = m.hyper.beta; break;
        case ModelKind::beta_tcvae:
            // KL = MI + TC + dimension-wise KL; reweighting TC by tc_beta adds
            // (tc_beta - 1) * TC on top of the plain KL.
            g.tc = losses::total_correlation_mws(z, mu, lv, dataset_size);
            b.gamma = m.hyper.tc_beta - 1.0;
            break;
        case ModelKind::factor_vae:
            g.tc = ad::mean(nn::mlp_forward(tape, *m.discriminator, z));
            b.gamma = m.hyper.factor_gamma;
            break;
        case ModelKind::dip_vae:
            g.ortho = losses::dip_penalty(mu, lv, m.hyper.lambda_d / m.hyper.lambda_od);
            b.alpha = m.hyper.lambda_od;
            break;
        case ModelKind::sevae: throw ConfigError("baseline_loss_graph called for sevae");
    }
    detail::fill_values(g);
    g.total = detail::assemble_total(tape, g);
    b.total = g.total.scalar();
    detail::check_finite(b);
    return g;
}

/// FactorVAE discriminator objective on a detached latent sample: real
/// samples labelled 1, dimension-permuted samples labelled 0.
inline Var discriminator_loss(Tape& tape, const BaselineModel& m, const Matrix& z, nn::Rng& rng) {
    if (!m.discriminator) throw ConfigError("discriminator_loss: model has no discriminator");
    Var real = nn::mlp_forward(tape, *m.discriminator, tape.constant(z));
    Var fake = nn::mlp_forward(tape, *m.discriminator, tape.constant(permute_dims(z, rng)));
    return ad::add(ad::mean(ad::softplus(ad::neg(real))), ad::mean(ad::softplus(fake)));
}

// ---- type-erased model -----------------------------------------------------

class Model {
public:
    static Model create(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.arch.validate();
        std::seed_seq seq{seed, std::uint64_t{0x1417}};
        nn::Rng rng(seq);
        Model m;
        m.config_ = cfg;
        if (cfg.kind == ModelKind::sevae) {
            m.impl_ = SevaeModel::create(cfg.arch, rng);
        } else {
            m.impl_ = BaselineModel::create(cfg, rng);
        }
        return m;
    }

    const ModelConfig& config() const noexcept { return config_; }
    ModelKind kind() const noexcept { return config_.kind; }
    bool is_sevae() const noexcept { return std::holds_alternative<SevaeModel>(impl_); }
    const SevaeModel& sevae() const { return std::get<SevaeModel>(impl_); }
    SevaeModel& sevae() { return std::get<SevaeModel>(impl_); }
    const BaselineModel& baseline() const { return std::get<BaselineModel>(impl_); }
    BaselineModel& baseline() { return std::get<BaselineModel>(impl_); }

    /// Parameters updated by the main optimizer.
    nn::ParameterRefs parameters() {
        return std::visit([](auto& m) { return m.parameters(); }, impl_);
    }
    /// Everything persisted in a checkpoint.
    nn::ParameterRefs all_parameters() {
        auto out = parameters();
        if (auto* b = std::get_if<BaselineModel>(&impl_)) {
            auto d = b->discriminator_parameters();
            out.insert(out.end(), d.begin(), d.end());
        }
        return out;
    }

    LossGraph loss_graph(Tape& tape, const Matrix& X, nn::Rng& rng, std::size_t step,
                         double dataset_size) const {
        if (const auto* s = std::get_if<SevaeModel>(&impl_)) {
            return sevae_loss_graph(tape, *s, X, rng, step, dataset_size);
        }
        return baseline_loss_graph(tape, std::get<BaselineModel>(impl_), X, rng, step, dataset_size);
    }

    /// Posterior parameters, evaluated in chunks without gradient tracking.
    LatentCodes encode(const Matrix& X, std::size_t chunk = 2048) const {
        if (X.cols() != config_.arch.items()) {
            throw DimensionError("encode: data has " + std::to_string(X.cols()) +
                                 " columns, model expects K*J = " + std::to_string(config_.arch.items()));
        }
        std::vector<Matrix> mc, lc, mm, lm;
        for (std::size_t start = 0; start < X.rows(); start += chunk) {
            const std::size_t n = std::min(chunk, X.rows() - start);
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
            Tape tape(false);
            Var x = tape.constant(linalg::select_rows(X, idx));
            if (const auto* s = std::get_if<SevaeModel>(&impl_)) {
                SevaeEncoded e = sevae_encode(tape, *s, x);
                mc.push_back(e.mu_c.value());
                lc.push_back(e.logvar_c.value());
                mm.push_back(e.mu_m ? e.mu_m->value() : Matrix(n, 0));
                lm.push_back(e.logvar_m ? e.logvar_m->value() : Matrix(n, 0));
            } else {
                auto [mu, lv] = baseline_encode(tape, std::get<BaselineModel>(impl_), x);
                mc.push_back(mu.value());
                lc.push_back(lv.value());
                mm.push_back(Matrix(n, 0));
                lm.push_back(Matrix(n, 0));
            }
        }
        return LatentCodes{stack_rows(mc), stack_rows(lc), stack_rows(mm), stack_rows(lm)};
    }

    nlohmann::json checkpoint() const;
    static Model from_checkpoint(const nlohmann::json& j);

private:
    static Matrix stack_rows(const std::vector<Matrix>& parts) {
        std::size_t rows = 0, cols = parts.empty() ? 0 : parts.front().cols();
        for (const auto& p : parts) rows += p.rows();
        std::vector<double> data;
        data.reserve(rows * cols);
        for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
        return Matrix(rows, cols, std::move(data));
    }

    ModelConfig config_;
    std::variant<SevaeModel, BaselineModel> impl_;
};

/// Matrix-level encode for callers that do not manage a tape.
inline LatentCodes encode(const Model& m, const Matrix& X) { return m.encode(X); }

/// Latent means handed to the metrics: construct block, optionally followed
/// by the nuisance block.
inline Matrix latent_means(const LatentCodes& codes, bool include_nuisance) {
    if (!include_nuisance || codes.mu_m.cols() == 0) return codes.mu_constructs;
    const Matrix parts[] = {codes.mu_constructs, codes.mu_m};
    return linalg::concat_cols(parts);
}

/// SE-VAE decode without gradient tracking: (main reconstruction, adversarial reconstruction).
inline std::pair<Matrix, Matrix> decode(const SevaeModel& m, const Matrix& z_constructs,
                                        const Matrix& z_m) {
    Tape tape(false);
    std::optional<Var> zm;
    if (m.config.d_m > 0) zm = tape.constant(z_m);
    SevaeDecoded d = sevae_decode(tape, m, tape.constant(z_constructs), zm);
    return {d.x_hat.value(), d.x_adv ? d.x_adv->value() : Matrix(z_constructs.rows(), 0)};
}

inline LossBreakdown sevae_loss(const SevaeModel& m, const Matrix& X, nn::Rng& rng,
                                std::size_t step = 0, double dataset_size = 1.0) {
    Tape tape(false);
    return sevae_loss_graph(tape, m, X, rng, step, dataset_size).breakdown;
}

inline LossBreakdown baseline_loss(const BaselineModel& m, const Matrix& X, nn::Rng& rng,
                                   std::size_t step = 0, double dataset_size = 1.0) {
    Tape tape(false);
    return baseline_loss_graph(tape, m, X, rng, step, dataset_size).breakdown;
}

// ---- JSON ------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    const auto& a = c.arch;
    const auto& b = c.baseline;
    j = nlohmann::json{
        {"kind", std::string(to_string(c.kind))},
        {"K", a.K},
        {"J", a.J},
        {"d_k", a.d_k},
        {"d_m", a.d_m},
        {"d_c", a.d_c},
        {"hidden", a.hidden},
        {"beta", a.beta},
        {"gamma", a.gamma},
        {"alpha", a.alpha},
        {"lambda_adv", a.lambda_adv},
        {"anneal", {{"enabled", a.anneal.enabled}, {"warmup_steps", a.anneal.warmup_steps}}},
        {"tc_include_nuisance", a.tc_include_nuisance},
        {"baseline",
         {{"beta", b.beta},
          {"factor_gamma", b.factor_gamma},
          {"tc_beta", b.tc_beta},
          {"lambda_od", b.lambda_od},
          {"lambda_d", b.lambda_d},
          {"latent_dim", b.latent_dim},
          {"disc_hidden", b.disc_hidden},
          {"disc_lr", b.disc_lr}}}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.kind = parse_kind(j.value("kind", std::string(to_string(d.kind))));
    auto& a = c.arch;
    a.K = j.value("K", d.arch.K);
    a.J = j.value("J", d.arch.J);
    a.d_k = j.value("d_k", d.arch.d_k);
    a.d_m = j.value("d_m", d.arch.d_m);
    a.d_c = j.value("d_c", d.arch.d_c);
    a.hidden = j.value("hidden", d.arch.hidden);
    a.beta = j.value("beta", d.arch.beta);
    a.gamma = j.value("gamma", d.arch.gamma);
    a.alpha = j.value("alpha", d.arch.alpha);
    a.lambda_adv = j.value("lambda_adv", d.arch.lambda_adv);
    if (j.contains("anneal")) {
        const auto& an = j.at("anneal");
        a.anneal.enabled = an.value("enabled", d.arch.anneal.enabled);
        a.anneal.warmup_steps = an.value("warmup_steps", d.arch.anneal.warmup_steps);
    }
    a.tc_include_nuisance = j.value("tc_include_nuisance", d.arch.tc_include_nuisance);
    if (j.contains("baseline")) {
        const auto& bj = j.at("baseline");
        auto& b = c.baseline;
        b.beta = bj.value("beta", d.baseline.beta);
        b.factor_gamma = bj.value("factor_gamma", d.baseline.factor_gamma);
        b.tc_beta = bj.value("tc_beta", d.baseline.tc_beta);
        b.lambda_od = bj.value("lambda_od", d.baseline.lambda_od);
        b.lambda_d = bj.value("lambda_d", d.baseline.lambda_d);
        b.latent_dim = bj.value("latent_dim", d.baseline.latent_dim);
        b.disc_hidden = bj.value("disc_hidden", d.baseline.disc_hidden);
        b.disc_lr = bj.value("disc_lr", d.baseline.disc_lr);
    }
    a.validate();
}

inline nlohmann::json Model::checkpoint() const {
    auto& self = const_cast<Model&>(*this);
    return nlohmann::json{{"format", "sevae-checkpoint/1"},
                          {"config", config_},
                          {"parameters", nn::parameters_to_json(self.all_parameters())}};
}

inline Model Model::from_checkpoint(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "sevae-checkpoint/1") {
        throw ConfigError("not a checkpoint document");
    }
    Model m = create(j.at("config").get<ModelConfig>(), 0);
    nn::parameters_from_json(j.at("parameters"), m.all_parameters());
    return m;
}

}  // namespace sevae::models
