// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Sampling viewed as integrating dx/ds = d/ds I(x_t, F(x, s), s) with forward
// Euler, and the one-step discretization error of both samplers.

#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "dyffuse/sampling.hpp"

namespace dyffuse {

/// x + [I(x_t, F(x, s), s + ds) - I(x_t, F(x, s), s)].
template <ForecastRule F, InterpolationRule I>
Tensor euler_step(const F& f, const I& interp, const Tensor& x_t, const Tensor& x, double s, double ds,
                  StepContext& ctx) {
    const Tensor x_h = call_forecast(f, x, s, ctx);
    const Tensor ahead = call_interpolate(interp, x_t, x_h, s + ds, ctx);
    const Tensor here = call_interpolate(interp, x_t, x_h, s, ctx);
    Tensor out(x.shape());
    for (std::size_t k = 0; k < out.numel(); ++k) out[k] = x[k] + (ahead[k] - here[k]);
    return out;
}

struct LogLogFit {
    double slope = 0.0;
    double intercept = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t points = 0;
};

/// Least-squares line through (log x, log y) with a two-sided `level` CI on
/// the slope from Student's t (n - 2 degrees of freedom).
inline LogLogFit fit_log_log(const std::vector<double>& x, const std::vector<double>& y, double level = 0.95) {
    if (x.size() != y.size()) throw ShapeError("fit_log_log: x and y differ in length");
    if (x.size() < 3) throw NumericError("fit_log_log: degenerate fit, need at least 3 points");
    const std::size_t n = x.size();
    std::vector<double> lx(n), ly(n);
    for (std::size_t k = 0; k < n; ++k) {
        if (!(x[k] > 0.0 && y[k] > 0.0)) throw NumericError("fit_log_log: values must be positive");
        lx[k] = std::log(x[k]);
        ly[k] = std::log(y[k]);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        mx += lx[k];
        my += ly[k];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        sxx += (lx[k] - mx) * (lx[k] - mx);
        sxy += (lx[k] - mx) * (ly[k] - my);
    }
    if (sxx == 0.0) throw NumericError("fit_log_log: degenerate fit, x values coincide");
    LogLogFit fit;
    fit.points = n;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double sse = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double r = ly[k] - (fit.intercept + fit.slope * lx[k]);
        sse += r * r;
    }
    const double se = std::sqrt(sse / static_cast<double>(n - 2) / sxx);
    boost::math::students_t dist(static_cast<double>(n - 2));
    const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2.0));
    fit.ci_low = fit.slope - t * se;
    fit.ci_high = fit.slope + t * se;
    return fit;
}

/// Geometric grid from h/4 down to h/512 (8 points), strictly decreasing.
inline std::vector<double> default_step_grid(double h) {
    std::vector<double> g;
    for (int k = 2; k <= 9; ++k) g.push_back(h / std::ldexp(1.0, k));
    return g;
}

struct ErrorOrderConfig {
    OracleSystem system = OracleSystem::scalar(std::log(2.0));
    double horizon = 4.0;
    /// Start time of the measured step, from the exact state x(s0).
    double s0 = 1.0;
    Tensor x0 = Tensor::vector({1.0});
    /// Forecaster perturbation F(1 + eps sin s) and constant interpolator bias.
    double eps = 0.05;
    double bias = 0.1;
    std::vector<double> step_grid = default_step_grid(4.0);
    /// Errors at or below this are roundoff and are left out of the fits.
    double floor = 1e-13;
};

struct ErrorScalingResult {
    std::vector<double> steps;
    std::vector<double> cold_error;
    std::vector<double> naive_error;
    std::optional<LogLogFit> cold_fit;
    std::optional<LogLogFit> naive_fit;
    /// Fits restricted to the finest decade of step sizes.
    std::optional<LogLogFit> cold_fine_fit;
    std::optional<LogLogFit> naive_fine_fit;
};

namespace detail {

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape("error", a, b);
    double e = 0.0;
    for (std::size_t k = 0; k < a.numel(); ++k) e = std::max(e, std::abs(a[k] - b[k]));
    return e;
}

inline std::optional<LogLogFit> fit_above_floor(const std::vector<double>& steps, const std::vector<double>& err,
                                                double floor, double max_step) {
    std::vector<double> x, y;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        if (err[k] > floor && steps[k] <= max_step) {
            x.push_back(steps[k]);
            y.push_back(err[k]);
        }
    }
    if (x.size() < 3) return std::nullopt;
    return fit_log_log(x, y);
}

}  // namespace detail

/// One-step error |x(s0 + ds) - x_hat(s0 + ds)| (max norm) of both samplers,
/// each started from the exact state at s0.
inline ErrorScalingResult measure_error_order(const ErrorOrderConfig& cfg) {
    const auto& g = cfg.step_grid;
    if (g.size() < 3) throw DomainError("measure_error_order: need at least 3 step sizes");
    for (std::size_t k = 0; k < g.size(); ++k) {
        if (!(g[k] > 0.0) || (k > 0 && !(g[k] < g[k - 1]))) {
            throw DomainError("measure_error_order: step sizes must be positive and strictly decreasing");
        }
        if (cfg.s0 < 0.0 || cfg.s0 + g[k] > cfg.horizon) {
            throw DomainError("measure_error_order: s0 + ds must stay within [0, h]");
        }
    }
    OracleForecasterRule f{cfg.system, cfg.horizon, cfg.eps};
    OracleInterpolatorRule interp{cfg.system, cfg.horizon, cfg.bias};
    const Tensor x_s = cfg.system.advance(cfg.x0, cfg.s0);
    StepContext ctx{&cfg.x0, 0, 1, nullptr};

    ErrorScalingResult r;
    r.steps = g;
    for (double ds : g) {
        const Tensor truth = cfg.system.advance(cfg.x0, cfg.s0 + ds);
        const Tensor cold = euler_step(f, interp, cfg.x0, x_s, cfg.s0, ds, ctx);
        const Tensor naive = interp(cfg.x0, f(x_s, cfg.s0), cfg.s0 + ds);
        r.cold_error.push_back(detail::max_abs_diff(truth, cold));
        r.naive_error.push_back(detail::max_abs_diff(truth, naive));
    }
    const double all = g.front();
    const double decade = 10.0 * g.back();
    r.cold_fit = detail::fit_above_floor(g, r.cold_error, cfg.floor, all);
    r.naive_fit = detail::fit_above_floor(g, r.naive_error, cfg.floor, all);
    r.cold_fine_fit = detail::fit_above_floor(g, r.cold_error, cfg.floor, decade);
    r.naive_fine_fit = detail::fit_above_floor(g, r.naive_error, cfg.floor, decade);
    return r;
}

/// CSV: sampler,dt,error,slope,ci_low,ci_high (fit columns empty when the
/// errors are at roundoff level).
inline void write_error_csv(std::ostream& out, const ErrorScalingResult& r) {
    out.precision(17);
    out << "sampler,dt,error,slope,ci_low,ci_high\n";
    auto rows = [&](const char* name, const std::vector<double>& err, const std::optional<LogLogFit>& fit) {
        for (std::size_t k = 0; k < r.steps.size(); ++k) {
            out << name << ',' << r.steps[k] << ',' << err[k] << ',';
            if (fit) {
                out << fit->slope << ',' << fit->ci_low << ',' << fit->ci_high;
            } else {
                out << ",,";
            }
            out << '\n';
        }
    };
    rows("cold", r.cold_error, r.cold_fit);
    rows("naive", r.naive_error, r.naive_fit);
}

}  // namespace dyffuse
