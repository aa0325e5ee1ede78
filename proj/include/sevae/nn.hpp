#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sevae/autodiff.hpp"
#include "sevae/error.hpp"
#include "sevae/matrix.hpp"

namespace sevae::nn {

using Rng = std::mt19937_64;

/// Named, mutable views of a model's parameters in a stable order.
using ParameterRefs = std::vector<std::pair<std::string, Matrix*>>;

enum class Activation { identity, relu };

struct LinearLayer {
    Matrix weight;  // in x out
    Matrix bias;    // 1 x out

    std::size_t in_dim() const noexcept { return weight.rows(); }
    std::size_t out_dim() const noexcept { return weight.cols(); }
};

struct Mlp {
    std::string name;
    std::vector<LinearLayer> layers;
    Activation activation = Activation::relu;
    Activation final_activation = Activation::identity;

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }

    void append_parameters(ParameterRefs& out) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
            out.emplace_back(weight_id(l), &layers[l].weight);
            out.emplace_back(bias_id(l), &layers[l].bias);
        }
    }
    std::string weight_id(std::size_t l) const { return name + "." + std::to_string(l) + ".weight"; }
    std::string bias_id(std::size_t l) const { return name + "." + std::to_string(l) + ".bias"; }
};

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
inline Mlp init_mlp(std::string name, std::span<const std::size_t> dims, Rng& rng) {
    if (dims.size() < 2) throw ConfigError("init_mlp: need at least input and output dims");
    for (std::size_t d : dims) {
        if (d == 0) throw ConfigError("init_mlp: zero-width layer in '" + name + "'");
    }
    Mlp mlp;
    mlp.name = std::move(name);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(dims[l]));
        std::uniform_real_distribution<double> u(-bound, bound);
        LinearLayer layer{Matrix(dims[l], dims[l + 1]), Matrix(1, dims[l + 1])};
        for (double& w : layer.weight.data()) w = u(rng);
        mlp.layers.push_back(std::move(layer));
    }
    return mlp;
}

inline Mlp init_mlp(std::string name, std::span<const std::size_t> dims, std::uint64_t seed) {
    Rng rng(seed);
    return init_mlp(std::move(name), dims, rng);
}

inline Mlp init_mlp(std::string name, std::initializer_list<std::size_t> dims, Rng& rng) {
    return init_mlp(std::move(name), std::span<const std::size_t>(dims.begin(), dims.size()), rng);
}

/// Dims for an MLP: in, hidden..., out.
inline std::vector<std::size_t> chain_dims(std::size_t in, std::span<const std::size_t> hidden,
                                           std::size_t out) {
    std::vector<std::size_t> dims{in};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(out);
    return dims;
}

inline ad::Var mlp_forward(ad::Tape& tape, const Mlp& mlp, ad::Var x) {
    if (mlp.layers.empty()) throw ConfigError("mlp_forward: '" + mlp.name + "' has no layers");
    if (x.cols() != mlp.in_dim()) {
        throw DimensionError("mlp_forward '" + mlp.name + "': input " + x.value().shape() +
                             " but first layer expects " + std::to_string(mlp.in_dim()) +
                             " columns");
    }
    ad::Var h = x;
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        const auto& layer = mlp.layers[l];
        ad::Var w = tape.parameter(mlp.weight_id(l), layer.weight);
        ad::Var b = tape.parameter(mlp.bias_id(l), layer.bias);
        h = ad::add_row(ad::matmul(h, w), b);
        const bool last = l + 1 == mlp.layers.size();
        const Activation act = last ? mlp.final_activation : mlp.activation;
        if (act == Activation::relu) h = ad::relu(h);
    }
    return h;
}

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::uint64_t t = 0;
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
};

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
inline void adam_step(const ParameterRefs& params, const ad::Gradients& grads, AdamState& state) {
    for (const auto& [id, g] : grads) {
        if (!g.all_finite()) throw TrainingError("non-finite gradient for parameter '" + id + "'");
    }
    state.t += 1;
    const auto& c = state.config;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (const auto& [id, p] : params) {
        auto git = grads.find(id);
        if (git != grads.end() && !git->second.same_shape(*p)) {
            throw DimensionError("adam_step: gradient for '" + id + "' has shape " +
                                 git->second.shape() + ", parameter is " + p->shape());
        }
        auto [mit, m_new] = state.m.try_emplace(id, p->rows(), p->cols());
        auto [vit, v_new] = state.v.try_emplace(id, p->rows(), p->cols());
        Matrix& m = mit->second;
        Matrix& v = vit->second;
        if (!m.same_shape(*p)) throw DimensionError("adam_step: moment shape drift for '" + id + "'");
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double gi = git == grads.end() ? 0.0 : git->second[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            (*p)[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

// ---- checkpoint format -----------------------------------------------------
// { "<param id>": {"rows": r, "cols": c, "data": [...]}, ... }

inline nlohmann::json matrix_to_json(const Matrix& m) {
    return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    return Matrix(rows, cols, j.at("data").get<std::vector<double>>());
}

inline nlohmann::json parameters_to_json(const ParameterRefs& params) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [id, p] : params) out[id] = matrix_to_json(*p);
    return out;
}

inline void parameters_from_json(const nlohmann::json& j, const ParameterRefs& params) {
    for (const auto& [id, p] : params) {
        if (!j.contains(id)) throw DimensionError("checkpoint is missing parameter '" + id + "'");
        Matrix m = matrix_from_json(j.at(id));
        if (!m.same_shape(*p)) {
            throw DimensionError("checkpoint parameter '" + id + "' has shape " + m.shape() +
                                 ", model expects " + p->shape());
        }
        *p = std::move(m);
    }
}

}  // namespace sevae::nn
