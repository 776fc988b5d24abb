// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over a per-forward-pass tape.
//
// A Tape records every op applied to 2-D (rows = batch, cols = features) values
// together with a closure that propagates the output gradient to the inputs.
// Tapes are cheap to create; models build a fresh one for every forward pass.
// Leaves are either constants, differentiable inputs, or Parameters whose
// gradient is accumulated into Parameter::grad on backward().

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyffuse/core.hpp"
#include "dyffuse/tensor.hpp"

namespace dyffuse {

/// Trainable tensor plus its gradient and AdamW moments.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;

    Parameter() = default;
    Parameter(std::string n, Tensor init)
        : name(std::move(n)),
          value(std::move(init)),
          grad(value.shape()),
          m(value.shape()),
          v(value.shape()) {}

    void zero_grad() { std::fill(grad.data().begin(), grad.data().end(), 0.0); }
};

struct DropoutSpec {
    double rate = 0.0;
    bool active_at_inference = false;
};

inline void validate(const DropoutSpec& spec) {
    if (!(spec.rate >= 0.0 && spec.rate < 1.0)) {
        throw DomainError("dropout rate must lie in [0, 1), got " + std::to_string(spec.rate));
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
inline Tensor dropout_forward(const Tensor& x, const DropoutSpec& spec, Rng& rng) {
    validate(spec);
    if (spec.rate == 0.0) return x;
    Tensor out(x.shape());
    const double keep_scale = 1.0 / (1.0 - spec.rate);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = rng.uniform() < spec.rate ? 0.0 : x[i] * keep_scale;
    }
    return out;
}

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    Var constant(Tensor value) { return push(std::move(value), false, nullptr, "constant"); }

    /// Constant that aliases caller-owned storage; the tensor must outlive the tape.
    Var reference(const Tensor& value) {
        Node node;
        node.ref = &value;
        node.op = "reference";
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    /// Differentiable leaf; read its gradient with grad() after backward().
    Var input(Tensor value) { return push(std::move(value), true, nullptr, "input"); }

    Var param(Parameter& p) {
        Node node;
        node.ref = &p.value;
        node.requires_grad = true;
        node.op = "param";
        node.backward = [target = &p](Tape& tape, std::size_t self) {
            const Tensor& g = tape.nodes_[self].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) target->grad[i] += g[i];
        };
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    const Tensor& value(Var v) const { return node_value(nodes_.at(v.id)); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    const Tensor& grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.numel() != node_value(n).numel()) {
            throw Error("grad(): node " + std::to_string(v.id) + " received no gradient");
        }
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf that requires grad.
    void backward(Var loss) {
        Node& root = nodes_.at(loss.id);
        if (node_value(root).numel() != 1) {
            throw ShapeError("backward: loss must be a scalar, got " +
                             shape_str(node_value(root).shape()));
        }
        if (!root.requires_grad) return;
        root.grad = Tensor(node_value(root).shape(), 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.numel() == 0 || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    /// Adds `g` into the gradient buffer of `v` (allocating it on first use).
    void accumulate(Var v, std::span<const double> g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.numel() == 0) n.grad = Tensor(node_value(n).shape());
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    Tensor& grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        if (n.grad.numel() == 0) n.grad = Tensor(node_value(n).shape());
        return n.grad;
    }

    const Tensor& out_grad(std::size_t self) const { return nodes_[self].grad; }

    Var push(Tensor value, bool requires_grad, Backward backward, const char* op) {
        if (!value.all_finite()) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "' at node " +
                               std::to_string(nodes_.size()));
        }
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        node.backward = std::move(backward);
        node.op = op;
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

private:
    struct Node {
        Tensor value;
        const Tensor* ref = nullptr;
        Tensor grad;
        Backward backward;
        bool requires_grad = false;
        const char* op = "";
    };

    static const Tensor& node_value(const Node& n) { return n.ref ? *n.ref : n.value; }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. All activations are (rows, cols); loss ops return a scalar.

namespace ops {

namespace detail {

inline std::size_t rows(const Tensor& t) { return t.dim(0); }
inline std::size_t cols(const Tensor& t) { return t.dim(1); }

inline void require_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
    }
}

inline bool any_requires_grad(const Tape& tape, std::initializer_list<Var> vars) {
    for (Var v : vars) {
        if (tape.requires_grad(v)) return true;
    }
    return false;
}

}  // namespace detail

/// y = x W + b with x (B, in), W (in, out), b (out).
inline Var affine(Tape& tape, Var x, Var w, Var b) {
    const Tensor& X = tape.value(x);
    const Tensor& W = tape.value(w);
    const Tensor& Bv = tape.value(b);
    detail::require_matrix("affine", X);
    detail::require_matrix("affine", W);
    if (X.dim(1) != W.dim(0) || Bv.rank() != 1 || Bv.dim(0) != W.dim(1)) {
        throw ShapeError("affine: incompatible shapes x" + shape_str(X.shape()) + " w" +
                         shape_str(W.shape()) + " b" + shape_str(Bv.shape()));
    }
    const std::size_t n = X.dim(0), in = W.dim(0), out = W.dim(1);
    Tensor Y(Shape{n, out});
    for (std::size_t r = 0; r < n; ++r) {
        double* y = &Y[r * out];
        for (std::size_t c = 0; c < out; ++c) y[c] = Bv[c];
        const double* xr = &X[r * in];
        for (std::size_t k = 0; k < in; ++k) {
            const double xv = xr[k];
            if (xv == 0.0) continue;
            const double* wr = &W[k * out];
            for (std::size_t c = 0; c < out; ++c) y[c] += xv * wr[c];
        }
    }
    const bool rg = detail::any_requires_grad(tape, {x, w, b});
    return tape.push(std::move(Y), rg, [x, w, b, n, in, out](Tape& t, std::size_t self) {
        const Tensor& dY = t.out_grad(self);
        if (t.requires_grad(x)) {
            const Tensor& W = t.value(w);
            Tensor& dX = t.grad_buffer(x);
            for (std::size_t r = 0; r < n; ++r) {
                const double* dy = &dY[r * out];
                for (std::size_t k = 0; k < in; ++k) {
                    const double* wr = &W[k * out];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < out; ++c) acc += dy[c] * wr[c];
                    dX[r * in + k] += acc;
                }
            }
        }
        if (t.requires_grad(w)) {
            const Tensor& X = t.value(x);
            Tensor& dW = t.grad_buffer(w);
            for (std::size_t r = 0; r < n; ++r) {
                const double* dy = &dY[r * out];
                for (std::size_t k = 0; k < in; ++k) {
                    const double xv = X[r * in + k];
                    if (xv == 0.0) continue;
                    double* dw = &dW[k * out];
                    for (std::size_t c = 0; c < out; ++c) dw[c] += xv * dy[c];
                }
            }
        }
        if (t.requires_grad(b)) {
            Tensor& dB = t.grad_buffer(b);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < out; ++c) dB[c] += dY[r * out + c];
            }
        }
    }, "affine");
}

namespace detail {

template <class Fwd, class Deriv>
Var unary(Tape& tape, Var x, const char* name, Fwd f, Deriv df) {
    const Tensor& X = tape.value(x);
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) Y[i] = f(X[i]);
    return tape.push(std::move(Y), tape.requires_grad(x), [x, df](Tape& t, std::size_t self) {
        const Tensor& dY = t.out_grad(self);
        const Tensor& X = t.value(x);
        Tensor& dX = t.grad_buffer(x);
        for (std::size_t i = 0; i < X.numel(); ++i) dX[i] += dY[i] * df(X[i]);
    }, name);
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace detail

/// Exact (erf) GeLU.
inline Var gelu(Tape& tape, Var x) {
    return detail::unary(
        tape, x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return cdf + v * pdf;
        });
}

inline Var silu(Tape& tape, Var x) {
    return detail::unary(
        tape, x, "silu", [](double v) { return v * detail::sigmoid(v); },
        [](double v) {
            const double s = detail::sigmoid(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

inline Var relu(Tape& tape, Var x) {
    return detail::unary(
        tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    require_same_shape("ops::add", A, B);
    return tape.push(A + B, detail::any_requires_grad(tape, {a, b}),
                     [a, b](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         t.accumulate(a, g.data());
                         t.accumulate(b, g.data());
                     },
                     "add");
}

inline Var sub(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    require_same_shape("ops::sub", A, B);
    return tape.push(A - B, detail::any_requires_grad(tape, {a, b}),
                     [a, b](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         t.accumulate(a, g.data());
                         if (t.requires_grad(b)) {
                             Tensor& gb = t.grad_buffer(b);
                             for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
                         }
                     },
                     "sub");
}

inline Var mul(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    require_same_shape("ops::mul", A, B);
    Tensor Y(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) Y[i] = A[i] * B[i];
    return tape.push(std::move(Y), detail::any_requires_grad(tape, {a, b}),
                     [a, b](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         if (t.requires_grad(a)) {
                             const Tensor& B = t.value(b);
                             Tensor& ga = t.grad_buffer(a);
                             for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * B[i];
                         }
                         if (t.requires_grad(b)) {
                             const Tensor& A = t.value(a);
                             Tensor& gb = t.grad_buffer(b);
                             for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A[i];
                         }
                     },
                     "mul");
}

/// y = x * (1 + scale) + shift, the time-embedding modulation.
inline Var scale_shift(Tape& tape, Var x, Var scale, Var shift) {
    const Tensor& X = tape.value(x);
    const Tensor& S = tape.value(scale);
    const Tensor& H = tape.value(shift);
    require_same_shape("scale_shift", X, S);
    require_same_shape("scale_shift", X, H);
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) Y[i] = X[i] * (1.0 + S[i]) + H[i];
    return tape.push(std::move(Y), detail::any_requires_grad(tape, {x, scale, shift}),
                     [x, scale, shift](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         if (t.requires_grad(x)) {
                             const Tensor& S = t.value(scale);
                             Tensor& gx = t.grad_buffer(x);
                             for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * (1.0 + S[i]);
                         }
                         if (t.requires_grad(scale)) {
                             const Tensor& X = t.value(x);
                             Tensor& gs = t.grad_buffer(scale);
                             for (std::size_t i = 0; i < g.numel(); ++i) gs[i] += g[i] * X[i];
                         }
                         t.accumulate(shift, g.data());
                     },
                     "scale_shift");
}

/// Column-wise concatenation of two matrices with equal row counts.
inline Var concat_cols(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    detail::require_matrix("concat_cols", A);
    detail::require_matrix("concat_cols", B);
    if (A.dim(0) != B.dim(0)) {
        throw ShapeError("concat_cols: row mismatch " + shape_str(A.shape()) + " vs " +
                         shape_str(B.shape()));
    }
    const std::size_t n = A.dim(0), p = A.dim(1), q = B.dim(1);
    Tensor Y(Shape{n, p + q});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < p; ++c) Y[r * (p + q) + c] = A[r * p + c];
        for (std::size_t c = 0; c < q; ++c) Y[r * (p + q) + p + c] = B[r * q + c];
    }
    return tape.push(std::move(Y), detail::any_requires_grad(tape, {a, b}),
                     [a, b, n, p, q](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         if (t.requires_grad(a)) {
                             Tensor& ga = t.grad_buffer(a);
                             for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < p; ++c) ga[r * p + c] += g[r * (p + q) + c];
                         }
                         if (t.requires_grad(b)) {
                             Tensor& gb = t.grad_buffer(b);
                             for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < q; ++c)
                                     gb[r * q + c] += g[r * (p + q) + p + c];
                         }
                     },
                     "concat_cols");
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Tape& tape, Var x, std::size_t begin, std::size_t end) {
    const Tensor& X = tape.value(x);
    detail::require_matrix("slice_cols", X);
    if (begin >= end || end > X.dim(1)) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for " + shape_str(X.shape()));
    }
    const std::size_t n = X.dim(0), w = X.dim(1), k = end - begin;
    Tensor Y(Shape{n, k});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < k; ++c) Y[r * k + c] = X[r * w + begin + c];
    return tape.push(std::move(Y), tape.requires_grad(x), [x, n, w, k, begin](Tape& t, std::size_t self) {
        const Tensor& g = t.out_grad(self);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < k; ++c) gx[r * w + begin + c] += g[r * k + c];
    }, "slice_cols");
}

/// Selected rows of a matrix, in the given order.
inline Var gather_rows(Tape& tape, Var x, std::vector<std::size_t> rows) {
    const Tensor& X = tape.value(x);
    detail::require_matrix("gather_rows", X);
    const std::size_t w = X.dim(1);
    Tensor Y(Shape{rows.size(), w});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= X.dim(0)) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " +
                             shape_str(X.shape()));
        }
        for (std::size_t c = 0; c < w; ++c) Y[r * w + c] = X[rows[r] * w + c];
    }
    return tape.push(std::move(Y), tape.requires_grad(x),
                     [x, w, rows = std::move(rows)](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         Tensor& gx = t.grad_buffer(x);
                         for (std::size_t r = 0; r < rows.size(); ++r)
                             for (std::size_t c = 0; c < w; ++c) gx[rows[r] * w + c] += g[r * w + c];
                     },
                     "gather_rows");
}

/// Inverted dropout recorded on the tape; the drawn mask is reused by backward.
inline Var dropout(Tape& tape, Var x, const DropoutSpec& spec, Rng& rng) {
    validate(spec);
    if (spec.rate == 0.0) return x;
    const Tensor& X = tape.value(x);
    const double keep_scale = 1.0 / (1.0 - spec.rate);
    std::vector<double> mask(X.numel());
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < X.numel(); ++i) {
        mask[i] = rng.uniform() < spec.rate ? 0.0 : keep_scale;
        Y[i] = X[i] * mask[i];
    }
    return tape.push(std::move(Y), tape.requires_grad(x),
                     [x, mask = std::move(mask)](Tape& t, std::size_t self) {
                         const Tensor& g = t.out_grad(self);
                         Tensor& gx = t.grad_buffer(x);
                         for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
                     },
                     "dropout");
}

enum class Norm { l1, l2 };

/// sum(|pred - target|^p) / divisor with p = 1 (L1) or 2 (L2).
inline Var error_sum(Tape& tape, Var pred, Var target, Norm norm, double divisor) {
    const Tensor& P = tape.value(pred);
    const Tensor& T = tape.value(target);
    require_same_shape("error_sum", P, T);
    if (!(divisor > 0.0)) throw DomainError("error_sum: divisor must be positive");
    double acc = 0.0;
    for (std::size_t i = 0; i < P.numel(); ++i) {
        const double d = P[i] - T[i];
        acc += norm == Norm::l1 ? std::abs(d) : d * d;
    }
    return tape.push(Tensor::scalar(acc / divisor), detail::any_requires_grad(tape, {pred, target}),
                     [pred, target, norm, divisor](Tape& t, std::size_t self) {
                         const double g = t.out_grad(self)[0] / divisor;
                         const Tensor& P = t.value(pred);
                         const Tensor& T = t.value(target);
                         std::vector<double> d(P.numel());
                         for (std::size_t i = 0; i < P.numel(); ++i) {
                             const double diff = P[i] - T[i];
                             d[i] = norm == Norm::l1 ? g * ((diff > 0.0) - (diff < 0.0)) : 2.0 * g * diff;
                         }
                         t.accumulate(pred, d);
                         if (t.requires_grad(target)) {
                             Tensor& gt = t.grad_buffer(target);
                             for (std::size_t i = 0; i < d.size(); ++i) gt[i] -= d[i];
                         }
                     },
                     "error_sum");
}

inline Var mean_error(Tape& tape, Var pred, Var target, Norm norm) {
    return error_sum(tape, pred, target, norm, static_cast<double>(tape.value(pred).numel()));
}

/// Scalar sum_k w_k * s_k over scalar vars.
inline Var weighted_sum(Tape& tape, std::vector<std::pair<double, Var>> terms) {
    double acc = 0.0;
    bool rg = false;
    for (auto [w, v] : terms) {
        acc += w * tape.value(v).item();
        rg = rg || tape.requires_grad(v);
    }
    return tape.push(Tensor::scalar(acc), rg, [terms = std::move(terms)](Tape& t, std::size_t self) {
        const double g = t.out_grad(self)[0];
        for (auto [w, v] : terms) {
            const double gv = w * g;
            t.accumulate(v, std::span<const double>(&gv, 1));
        }
    }, "weighted_sum");
}

}  // namespace ops

}  // namespace dyffuse
