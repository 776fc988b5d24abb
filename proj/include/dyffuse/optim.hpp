// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>

#include "dyffuse/autodiff.hpp"

namespace dyffuse {

struct AdamWConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 1e-4;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments. The step
/// counter lives in the optimizer; moments live in each Parameter.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg_.lr > 0.0)) throw DomainError("AdamW: learning rate must be positive");
        if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0)) {
            throw DomainError("AdamW: betas must lie in [0, 1)");
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    long steps() const { return t_; }

    void step(std::span<Parameter* const> params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (Parameter* p : params) {
            if (p->grad.shape() != p->value.shape()) {
                throw ShapeError("AdamW: gradient shape mismatch for " + p->name);
            }
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                double& w = p->value[i];
                w -= cfg_.lr * cfg_.weight_decay * w;
                p->m[i] = cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * g;
                p->v[i] = cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = p->m[i] / bc1;
                const double v_hat = p->v[i] / bc2;
                w -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
        }
    }

private:
    AdamWConfig cfg_;
    long t_ = 0;
};

/// Rescales all gradients jointly when their global L2 norm exceeds
/// `max_norm`. Returns the factor applied (1 when untouched).
inline double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
    if (!(max_norm > 0.0)) throw DomainError("clip_grad_norm: max_norm must be positive");
    double sq = 0.0;
    for (const Parameter* p : params) {
        for (double g : p->grad.data()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (Parameter* p : params) {
        for (double& g : p->grad.data()) g *= scale;
    }
    return scale;
}

inline void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) p->zero_grad();
}

}  // namespace dyffuse
