#pragma once

// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate value together with a closure that pushes
// the node's gradient to its parents. Nodes are appended in creation order, so
// index order is already a topological order; backward() walks it in reverse
// and visits each reachable node exactly once.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sevae/error.hpp"
#include "sevae/matrix.hpp"

namespace sevae::ad {

using Gradients = std::map<std::string, Matrix>;

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double scalar() const { return value()[0]; }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix& grad)>;

    /// With track_parameters = false, parameter() records plain constants and
    /// no backward closures are kept (inference mode).
    explicit Tape(bool track_parameters = true) : track_(track_parameters) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, {}, {}); }

    Var parameter(const std::string& id, Matrix value) {
        if (!track_) return constant(std::move(value));
        Var v = push(std::move(value), true, {}, {});
        nodes_[v.id].param_id = id;
        return v;
    }

    /// Records an op result. The node requires a gradient iff any parent does.
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
        return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                      std::move(backward));
    }
    Var record(Matrix value, std::span<const Var> parents, Backward backward) {
        bool needs = false;
        std::vector<std::size_t> ids;
        ids.reserve(parents.size());
        for (const Var& p : parents) {
            check_owned(p);
            needs = needs || nodes_[p.id].requires_grad;
            ids.push_back(p.id);
        }
        return push(std::move(value), needs, std::move(ids),
                    needs ? std::move(backward) : Backward{});
    }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adds g into the gradient buffer of v (no-op for constants).
    void accumulate(Var v, Matrix g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (!g.same_shape(n.value)) {
            throw DimensionError("gradient shape " + g.shape() + " does not match value " +
                                 n.value.shape());
        }
        if (!n.grad) {
            n.grad = std::move(g);
        } else {
            *n.grad += g;
        }
    }

    /// Gradient of a 1x1 loss with respect to every parameter leaf on the tape.
    /// Parameters the loss does not reach receive zero matrices.
    Gradients backward(Var loss) {
        check_owned(loss);
        const Matrix& lv = nodes_[loss.id].value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ContractError("backward requires a 1x1 loss, got " + lv.shape());
        }
        for (auto& n : nodes_) n.grad.reset();

        std::vector<char> reachable(loss.id + 1, 0);
        reachable[loss.id] = 1;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            if (!reachable[i]) continue;
            for (std::size_t p : nodes_[i].parents) reachable[p] = 1;
        }

        if (nodes_[loss.id].requires_grad) nodes_[loss.id].grad = Matrix(1, 1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!reachable[i] || !n.grad || !n.backward) continue;
            // The closure may append to grad buffers of parents only; copy the
            // gradient out so accumulate() cannot alias it.
            const Matrix g = *n.grad;
            n.backward(*this, g);
        }

        Gradients out;
        for (const auto& n : nodes_) {
            if (!n.param_id) continue;
            Matrix g = n.grad ? *n.grad : Matrix(n.value.rows(), n.value.cols());
            auto [it, inserted] = out.try_emplace(*n.param_id, std::move(g));
            if (!inserted) {
                if (n.grad) it->second += *n.grad;
            }
        }
        return out;
    }

    /// Gradient buffer of an arbitrary node after backward(); zeros if unreached.
    Matrix gradient_of(Var v) const {
        const Node& n = nodes_[v.id];
        return n.grad ? *n.grad : Matrix(n.value.rows(), n.value.cols());
    }

private:
    struct Node {
        Matrix value;
        bool requires_grad = false;
        std::vector<std::size_t> parents;
        Backward backward;
        std::optional<std::string> param_id;
        std::optional<Matrix> grad;
    };

    Var push(Matrix value, bool requires_grad, std::vector<std::size_t> parents,
             Backward backward) {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(parents),
                              std::move(backward), std::nullopt, std::nullopt});
        return Var{this, nodes_.size() - 1};
    }

    void check_owned(Var v) const {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw ContractError("variable does not belong to this tape");
        }
    }

    std::vector<Node> nodes_;
    bool track_ = true;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline void require_same_shape(Var a, Var b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.value().shape() + " vs " +
                             b.value().shape());
    }
}

template <class F, class DF>
Var unary(Var x, F f, DF dfdx) {
    const Matrix& xv = x.value();
    Matrix y(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    return x.tape->record(std::move(y), {x}, [x, dfdx](Tape& t, const Matrix& g) {
        const Matrix& xv = t.value(x.id);
        Matrix gx(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * dfdx(xv[i]);
        t.accumulate(x, std::move(gx));
    });
}

}  // namespace detail

// ---- binary ----------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw DimensionError("matmul: " + av.shape() + " * " + bv.shape());
    }
    return a.tape->record(linalg::matmul(av, bv), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) t.accumulate(a, linalg::matmul_nt(g, b.value()));
        if (t.requires_grad(b)) t.accumulate(b, linalg::matmul_tn(a.value(), g));
    });
}

inline Var add(Var a, Var b) {
    detail::require_same_shape(a, b, "add");
    Matrix y = a.value();
    y += b.value();
    return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_shape(a, b, "sub");
    Matrix y = a.value();
    const Matrix& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        Matrix gb = g;
        gb *= -1.0;
        t.accumulate(b, std::move(gb));
    });
}

inline Var mul(Var a, Var b) {
    detail::require_same_shape(a, b, "mul");
    Matrix y = a.value();
    const Matrix& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.requires_grad(a)) {
            Matrix ga = g;
            const Matrix& bv = b.value();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
            t.accumulate(a, std::move(ga));
        }
        if (t.requires_grad(b)) {
            Matrix gb = g;
            const Matrix& av = a.value();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
            t.accumulate(b, std::move(gb));
        }
    });
}

/// x (n x c) + r (1 x c), r broadcast over rows.
inline Var add_row(Var x, Var r) {
    const Matrix& xv = x.value();
    const Matrix& rv = r.value();
    if (rv.rows() != 1 || rv.cols() != xv.cols()) {
        throw DimensionError("add_row: " + xv.shape() + " + broadcast " + rv.shape());
    }
    Matrix y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += rv[j];
    return x.tape->record(std::move(y), {x, r}, [x, r](Tape& t, const Matrix& g) {
        t.accumulate(x, g);
        if (t.requires_grad(r)) {
            Matrix gr(1, g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
            t.accumulate(r, std::move(gr));
        }
    });
}

// ---- scalar affine ---------------------------------------------------------

inline Var scale(Var x, double s) {
    Matrix y = x.value();
    y *= s;
    return x.tape->record(std::move(y), {x}, [x, s](Tape& t, const Matrix& g) {
        Matrix gx = g;
        gx *= s;
        t.accumulate(x, std::move(gx));
    });
}

inline Var add_scalar(Var x, double s) {
    Matrix y = x.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s;
    return x.tape->record(std::move(y), {x}, [x](Tape& t, const Matrix& g) { t.accumulate(x, g); });
}

// ---- unary -----------------------------------------------------------------

inline Var neg(Var x) { return scale(x, -1.0); }

inline Var relu(Var x) {
    return detail::unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var x) {
    return detail::unary(
        x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var log(Var x) {
    for (double v : x.value().data()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive entry " + std::to_string(v));
    }
    return detail::unary(
        x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var tanh(Var x) {
    return detail::unary(
        x, [](double v) { return std::tanh(v); },
        [](double v) {
            const double th = std::tanh(v);
            return 1.0 - th * th;
        });
}

inline Var sin(Var x) {
    return detail::unary(
        x, [](double v) { return std::sin(v); }, [](double v) { return std::cos(v); });
}

inline Var square(Var x) {
    return detail::unary(
        x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

/// log(1 + e^x), computed without overflow.
inline Var softplus(Var x) {
    return detail::unary(
        x,
        [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

// ---- reductions ------------------------------------------------------------

namespace detail {
inline void require_nonempty(Var x, const char* op) {
    if (x.value().empty()) throw DimensionError(std::string(op) + ": empty matrix");
}
}  // namespace detail

inline Var sum(Var x) {
    detail::require_nonempty(x, "sum");
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return x.tape->record(Matrix(1, 1, s), {x}, [x](Tape& t, const Matrix& g) {
        t.accumulate(x, Matrix(x.rows(), x.cols(), g[0]));
    });
}

inline Var mean(Var x) {
    detail::require_nonempty(x, "mean");
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Mean of each row: (n x c) -> (n x 1).
inline Var row_mean(Var x) {
    detail::require_nonempty(x, "row_mean");
    const Matrix& xv = x.value();
    Matrix y(xv.rows(), 1);
    const double inv = 1.0 / static_cast<double>(xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double s = 0.0;
        for (double v : xv.row(i)) s += v;
        y[i] = s * inv;
    }
    return x.tape->record(std::move(y), {x}, [x, inv](Tape& t, const Matrix& g) {
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < gx.rows(); ++i)
            for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) = g[i] * inv;
        t.accumulate(x, std::move(gx));
    });
}

/// Mean of each column: (n x c) -> (1 x c).
inline Var col_mean(Var x) {
    detail::require_nonempty(x, "col_mean");
    const Matrix& xv = x.value();
    Matrix y(1, xv.cols());
    const double inv = 1.0 / static_cast<double>(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) y[j] += xv(i, j);
    y *= inv;
    return x.tape->record(std::move(y), {x}, [x, inv](Tape& t, const Matrix& g) {
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < gx.rows(); ++i)
            for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) = g[j] * inv;
        t.accumulate(x, std::move(gx));
    });
}

// ---- structural ------------------------------------------------------------

inline Var slice_cols(Var x, std::size_t start, std::size_t len) {
    Matrix y = linalg::slice_cols(x.value(), start, len);
    return x.tape->record(std::move(y), {x}, [x, start, len](Tape& t, const Matrix& g) {
        Matrix gx(x.rows(), x.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < len; ++j) gx(i, start + j) = g(i, j);
        t.accumulate(x, std::move(gx));
    });
}

inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    std::vector<Matrix> values;
    values.reserve(parts.size());
    for (const Var& p : parts) values.push_back(p.value());
    Matrix y = linalg::concat_cols(values);
    std::vector<Var> ps(parts.begin(), parts.end());
    return parts.front().tape->record(std::move(y), parts, [ps](Tape& t, const Matrix& g) {
        std::size_t off = 0;
        for (const Var& p : ps) {
            const std::size_t w = p.cols();
            if (t.requires_grad(p)) t.accumulate(p, linalg::slice_cols(g, off, w));
            off += w;
        }
    });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var transpose(Var x) {
    return x.tape->record(linalg::transpose(x.value()), {x}, [x](Tape& t, const Matrix& g) {
        t.accumulate(x, linalg::transpose(g));
    });
}

/// Same value, no gradient flows back.
inline Var detach(Var x) { return x.tape->constant(x.value()); }

/// Identity forward; backward multiplies the incoming gradient by -factor.
inline Var grad_reverse(Var x, double factor = 1.0) {
    return x.tape->record(x.value(), {x}, [x, factor](Tape& t, const Matrix& g) {
        Matrix gx = g;
        gx *= -factor;
        t.accumulate(x, std::move(gx));
    });
}

// ---- tagged entry points ---------------------------------------------------

enum class ElementwiseOp { add, sub, mul, relu, exp, log, tanh, sin, square, neg };
enum class ReduceOp { sum, mean, row_mean, col_mean };

inline Var elementwise(ElementwiseOp op, std::span<const Var> in) {
    const auto arity = [&](std::size_t n) {
        if (in.size() != n) {
            throw ContractError("elementwise op expects " + std::to_string(n) + " operand(s), got " +
                                std::to_string(in.size()));
        }
    };
    switch (op) {
        case ElementwiseOp::add: arity(2); return add(in[0], in[1]);
        case ElementwiseOp::sub: arity(2); return sub(in[0], in[1]);
        case ElementwiseOp::mul: arity(2); return mul(in[0], in[1]);
        case ElementwiseOp::relu: arity(1); return relu(in[0]);
        case ElementwiseOp::exp: arity(1); return exp(in[0]);
        case ElementwiseOp::log: arity(1); return log(in[0]);
        case ElementwiseOp::tanh: arity(1); return tanh(in[0]);
        case ElementwiseOp::sin: arity(1); return sin(in[0]);
        case ElementwiseOp::square: arity(1); return square(in[0]);
        case ElementwiseOp::neg: arity(1); return neg(in[0]);
    }
    throw ContractError("unknown elementwise op");
}

inline Var reduce(ReduceOp op, Var x) {
    switch (op) {
        case ReduceOp::sum: return sum(x);
        case ReduceOp::mean: return mean(x);
        case ReduceOp::row_mean: return row_mean(x);
        case ReduceOp::col_mean: return col_mean(x);
    }
    throw ContractError("unknown reduce op");
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }

/// Mean squared error over all entries.
inline Var mse(Var target, Var prediction) { return mean(square(sub(prediction, target))); }

}  // namespace sevae::ad
