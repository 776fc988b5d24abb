// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Ensemble verification scores. Ensembles are (M, ...) tensors whose trailing
// shape matches the truth.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "dyffuse/sampling.hpp"

namespace dyffuse {

enum class CrpsEstimator { textbook, fair };

namespace detail {

/// Members as a (M, E) view: member count and element count.
inline std::pair<std::size_t, std::size_t> ensemble_dims(const Tensor& ens, const Tensor& truth) {
    if (ens.rank() < 1 || ens.dim(0) == 0) throw DomainError("empty ensemble");
    const std::size_t m = ens.dim(0);
    const std::size_t e = ens.numel() / m;
    if (e != truth.numel() || Shape(ens.shape().begin() + 1, ens.shape().end()) != truth.shape()) {
        throw ShapeError("ensemble " + shape_str(ens.shape()) + " does not match truth " + shape_str(truth.shape()));
    }
    return {m, e};
}

}  // namespace detail

/// Mean over elements of (1/M) sum|x_i - y| - c * sum_ij |x_i - x_j| with
/// c = 1/(2M^2) (textbook) or 1/(2M(M-1)) (fair). The pair sum uses the sorted
/// form 2 sum_k (2k - M - 1) x_(k).
inline double crps(const Tensor& ensemble, const Tensor& truth, CrpsEstimator est = CrpsEstimator::textbook) {
    const auto [m, e] = detail::ensemble_dims(ensemble, truth);
    if (est == CrpsEstimator::fair && m < 2) throw DomainError("fair CRPS needs at least 2 members");
    const double M = static_cast<double>(m);
    const double c = est == CrpsEstimator::textbook ? 1.0 / (2.0 * M * M) : 1.0 / (2.0 * M * (M - 1.0));
    std::vector<double> col(m);
    double total = 0.0;
    for (std::size_t k = 0; k < e; ++k) {
        double term1 = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            col[i] = ensemble[i * e + k];
            term1 += std::abs(col[i] - truth[k]);
        }
        term1 /= M;
        double pairs = 0.0;
        if (m > 1) {
            std::sort(col.begin(), col.end());
            for (std::size_t i = 0; i < m; ++i) pairs += (2.0 * static_cast<double>(i + 1) - M - 1.0) * col[i];
            pairs *= 2.0;
        }
        total += term1 - c * pairs;
    }
    return total / static_cast<double>(e);
}

/// Member mean computed as x_0 + mean(x_i - x_0), so identical members give
/// their common value exactly.
inline Tensor ensemble_mean(const Tensor& ensemble) {
    const std::size_t m = ensemble.dim(0), e = ensemble.numel() / m;
    Tensor out(Shape(ensemble.shape().begin() + 1, ensemble.shape().end()));
    for (std::size_t k = 0; k < e; ++k) {
        const double base = ensemble[k];
        double d = 0.0;
        for (std::size_t i = 1; i < m; ++i) d += ensemble[i * e + k] - base;
        out[k] = base + d / static_cast<double>(m);
    }
    return out;
}

inline double mse_ensemble_mean(const Tensor& ensemble, const Tensor& truth) {
    const auto [m, e] = detail::ensemble_dims(ensemble, truth);
    (void)m;
    const Tensor mean = ensemble_mean(ensemble);
    double s = 0.0;
    for (std::size_t k = 0; k < e; ++k) s += (mean[k] - truth[k]) * (mean[k] - truth[k]);
    return s / static_cast<double>(e);
}

/// sqrt(mean over elements of the unbiased ensemble variance). Deviations are
/// taken from the first member, which makes identical members exactly 0.
inline double ensemble_spread(const Tensor& ensemble) {
    const std::size_t m = ensemble.dim(0), e = ensemble.numel() / m;
    if (m < 2) throw DomainError("ensemble spread needs at least 2 members");
    const double M = static_cast<double>(m);
    double s = 0.0;
    for (std::size_t k = 0; k < e; ++k) {
        const double base = ensemble[k];
        double sum = 0.0, sq = 0.0;
        for (std::size_t i = 1; i < m; ++i) {
            const double d = ensemble[i * e + k] - base;
            sum += d;
            sq += d * d;
        }
        s += std::max(0.0, sq - sum * sum / M) / (M - 1.0);
    }
    return std::sqrt(s / static_cast<double>(e));
}

/// Spread over RMSE of the ensemble mean. Zero spread gives 0; a perfect mean
/// with nonzero spread gives +infinity.
inline double ssr_from(double spread, double skill) {
    if (spread == 0.0) return 0.0;
    if (skill == 0.0) return std::numeric_limits<double>::infinity();
    return spread / skill;
}

inline double ssr(const Tensor& ensemble, const Tensor& truth) {
    const auto [m, e] = detail::ensemble_dims(ensemble, truth);
    (void)e;
    if (m < 2) throw DomainError("SSR needs at least 2 members, got " + std::to_string(m));
    return ssr_from(ensemble_spread(ensemble), std::sqrt(mse_ensemble_mean(ensemble, truth)));
}

struct MetricsReport {
    std::vector<double> times;
    std::vector<double> crps;
    std::vector<double> mse;
    /// Per-timestep spread and skill; SSR = spread / skill. Absent when M = 1.
    std::vector<double> spread;
    std::vector<double> skill;
    std::vector<double> ssr;
    double mean_crps = 0.0;
    double mean_mse = 0.0;
    std::optional<double> mean_ssr;
    std::size_t members = 0;
    std::size_t elements = 0;
    std::size_t cases = 1;
    double seconds = 0.0;
    bool refined = false;
    bool accelerated = false;
    bool outside_training_regime = false;

    void aggregate() {
        auto mean = [](const std::vector<double>& v) {
            return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        };
        mean_crps = mean(crps);
        mean_mse = mean(mse);
        mean_ssr = ssr.empty() ? std::nullopt : std::optional<double>(mean(ssr));
    }
};

/// Scores `forecast` against truth snapshots listed in the order of its times.
inline MetricsReport evaluate(const EnsembleForecast& forecast, std::span<const Tensor> truth,
                              CrpsEstimator est = CrpsEstimator::textbook) {
    if (truth.size() != forecast.times.size()) {
        throw ShapeError("evaluate: " + std::to_string(truth.size()) + " truth snapshots for " +
                         std::to_string(forecast.times.size()) + " output times");
    }
    MetricsReport r;
    r.members = forecast.size();
    r.elements = truth.empty() ? 0 : truth[0].numel();
    r.seconds = forecast.seconds;
    r.refined = forecast.refined;
    r.accelerated = forecast.accelerated;
    r.outside_training_regime = forecast.outside_training_regime;
    r.times = forecast.times;
    for (std::size_t k = 0; k < forecast.times.size(); ++k) {
        const Tensor ens = forecast.at(k);
        r.crps.push_back(crps(ens, truth[k], est));
        const double mse = mse_ensemble_mean(ens, truth[k]);
        r.mse.push_back(mse);
        if (r.members >= 2) {
            const double spread = ensemble_spread(ens);
            r.spread.push_back(spread);
            r.skill.push_back(std::sqrt(mse));
            r.ssr.push_back(ssr_from(spread, std::sqrt(mse)));
        }
    }
    r.aggregate();
    return r;
}

/// Scores against trajectory snapshots start + j; every output time must be a
/// whole step inside the trajectory.
inline MetricsReport evaluate(const EnsembleForecast& forecast, const Trajectory& truth, std::size_t start,
                              CrpsEstimator est = CrpsEstimator::textbook) {
    std::vector<Tensor> snaps;
    std::string bad;
    for (double j : forecast.times) {
        const double idx = static_cast<double>(start) + j;
        if (j != std::floor(j) || idx >= static_cast<double>(truth.length())) {
            bad += (bad.empty() ? "" : ", ") + std::to_string(j);
            continue;
        }
        snaps.push_back(truth.snapshot(static_cast<std::size_t>(idx)));
    }
    if (!bad.empty()) throw DomainError("evaluate: truth does not cover output times j = " + bad);
    return evaluate(forecast, snaps, est);
}

/// Pools reports over several initial conditions with identical times: CRPS
/// and MSE are averaged, spread and skill are pooled in quadrature.
inline MetricsReport pool_reports(std::span<const MetricsReport> reports) {
    if (reports.empty()) throw DomainError("pool_reports: nothing to pool");
    MetricsReport out = reports[0];
    const std::size_t T = out.times.size();
    const double n = static_cast<double>(reports.size());
    out.cases = reports.size();
    out.seconds = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        double c = 0.0, m = 0.0, sp = 0.0, sk = 0.0;
        for (const auto& r : reports) {
            if (r.times != out.times) throw ShapeError("pool_reports: output times differ");
            c += r.crps[t];
            m += r.mse[t];
            if (!r.spread.empty()) {
                sp += r.spread[t] * r.spread[t];
                sk += r.skill[t] * r.skill[t];
            }
        }
        out.crps[t] = c / n;
        out.mse[t] = m / n;
        if (!out.spread.empty()) {
            out.spread[t] = std::sqrt(sp / n);
            out.skill[t] = std::sqrt(sk / n);
            out.ssr[t] = ssr_from(out.spread[t], out.skill[t]);
        }
    }
    for (const auto& r : reports) {
        out.seconds += r.seconds;
        out.outside_training_regime = out.outside_training_regime || r.outside_training_regime;
    }
    out.aggregate();
    return out;
}

/// CSV: timestep,crps,mse,ssr and a final "mean" row.
inline void write_metrics_csv(std::ostream& out, const MetricsReport& r) {
    out.precision(10);
    out << "timestep,crps,mse,ssr\n";
    for (std::size_t t = 0; t < r.times.size(); ++t) {
        out << r.times[t] << ',' << r.crps[t] << ',' << r.mse[t] << ',';
        if (!r.ssr.empty()) out << r.ssr[t];
        out << '\n';
    }
    out << "mean," << r.mean_crps << ',' << r.mean_mse << ',';
    if (r.mean_ssr) out << *r.mean_ssr;
    out << '\n';
}

// ---------------------------------------------------------------------------
// Rank correlation

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i + j) / 2.0) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

struct RankCorrelation {
    double rho = 0.0;
    /// One-sided p-value for the alternative rho < 0.
    double p_negative = 1.0;
    bool exact = false;
};

/// Spearman's rho. The p-value enumerates all permutations for n <= 10 and
/// uses the t approximation otherwise.
inline RankCorrelation spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
    if (x.size() < 3) throw DomainError("spearman: need at least 3 pairs");
    const auto rx = average_ranks(x);
    auto ry = average_ranks(y);
    RankCorrelation out;
    out.rho = pearson(rx, ry);
    const std::size_t n = x.size();
    if (n <= 10) {
        std::sort(ry.begin(), ry.end());
        std::size_t hits = 0, total = 0;
        do {
            ++total;
            if (pearson(rx, ry) <= out.rho + 1e-12) ++hits;
        } while (std::next_permutation(ry.begin(), ry.end()));
        // next_permutation skips duplicate orderings of tied ranks; each
        // distinct arrangement is equally likely, so the ratio is still exact.
        out.p_negative = static_cast<double>(hits) / static_cast<double>(total);
        out.exact = true;
    } else {
        const double df = static_cast<double>(n - 2);
        const double r = std::clamp(out.rho, -1.0 + 1e-15, 1.0 - 1e-15);
        const double t = r * std::sqrt(df / (1.0 - r * r));
        out.p_negative = boost::math::cdf(boost::math::students_t(df), t);
    }
    return out;
}

}  // namespace dyffuse
