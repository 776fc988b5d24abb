// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse process. A forecaster rule maps (x, i_n) to an estimate of x_{t+h};
// an interpolation rule maps (x_t, x_{t+h}, i) to an estimate of x_{t+i}.
// Rules may take a trailing StepContext (member stream, step index) or not.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <optional>
#include <thread>
#include <type_traits>
#include <vector>

#include "dyffuse/nets.hpp"
#include "dyffuse/schedule.hpp"

namespace dyffuse {

/// What a rule may know about the sampler state when it is invoked.
struct StepContext {
    const Tensor* x_t = nullptr;
    std::size_t n = 0;
    std::size_t steps = 1;
    Rng* rng = nullptr;
};

template <class F>
concept ForecastRule = std::invocable<const F&, const Tensor&, double, StepContext&> ||
                       std::invocable<const F&, const Tensor&, double>;

template <class I>
concept InterpolationRule = std::invocable<const I&, const Tensor&, const Tensor&, double, StepContext&> ||
                            std::invocable<const I&, const Tensor&, const Tensor&, double>;

template <ForecastRule F>
Tensor call_forecast(const F& f, const Tensor& x, double s, StepContext& ctx) {
    if constexpr (std::invocable<const F&, const Tensor&, double, StepContext&>) {
        return f(x, s, ctx);
    } else {
        return f(x, s);
    }
}

template <InterpolationRule I>
Tensor call_interpolate(const I& interp, const Tensor& x_t, const Tensor& x_h, double i, StepContext& ctx) {
    if constexpr (std::invocable<const I&, const Tensor&, const Tensor&, double, StepContext&>) {
        return interp(x_t, x_h, i, ctx);
    } else {
        return interp(x_t, x_h, i);
    }
}

/// Forecaster network as a rule; builds c(x_t, n) from the member stream.
struct NeuralForecaster {
    const ForecasterModel* model;

    Tensor operator()(const Tensor& x, double s, StepContext& ctx) const {
        std::optional<Tensor> cond;
        if (model->conditioning() != Conditioning::none) {
            if (!ctx.x_t || !ctx.rng) throw DomainError("conditioned forecaster needs x_t and a stream");
            cond = make_conditioning(model->conditioning(), *ctx.x_t, ctx.n, ctx.steps, *ctx.rng);
        }
        return model->forecast(x, s, cond);
    }
};

/// Interpolator network as a rule. At i = 0 it returns x_t without a network
/// call; dropout draws come from the member stream when enabled.
struct NeuralInterpolator {
    const InterpolatorModel* model;

    Tensor operator()(const Tensor& x_t, const Tensor& x_h, double i, StepContext& ctx) const {
        if (i == 0.0) return x_t;
        return model->interpolate(x_t, x_h, i, model->stochastic() ? ctx.rng : nullptr);
    }
};

enum class Sampler { cold, naive };
enum class Refinement { off, fill_missing, overwrite };

inline std::string to_string(Sampler s) { return s == Sampler::cold ? "cold" : "naive"; }
inline Sampler parse_sampler(const std::string& s) {
    if (s == "cold") return Sampler::cold;
    if (s == "naive") return Sampler::naive;
    throw DomainError("unknown sampler '" + s + "'");
}

inline std::string to_string(Refinement r) {
    switch (r) {
        case Refinement::off: return "off";
        case Refinement::fill_missing: return "fill";
        case Refinement::overwrite: return "on";
    }
    return "?";
}
inline Refinement parse_refinement(const std::string& s) {
    if (s == "off") return Refinement::off;
    if (s == "on" || s == "overwrite") return Refinement::overwrite;
    if (s == "fill") return Refinement::fill_missing;
    throw DomainError("unknown refinement '" + s + "' (expected on, off or fill)");
}

struct SampleRequest {
    Tensor x_t;
    Schedule schedule = make_schedule(1);
    /// Output times J in (0, h]; empty means {1, ..., h}.
    std::vector<double> outputs;
    Refinement refine = Refinement::off;
    std::size_t members = 1;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    /// Keep every x_h^(n) of the loop (for step-vs-score curves).
    bool keep_step_forecasts = false;
};

/// Nominal network evaluations for one member: N forecaster calls, 2N
/// interpolator calls and one per refined output.
struct PassCount {
    std::size_t forecaster = 0;
    std::size_t interpolator = 0;
    std::size_t refinement = 0;
    std::size_t total() const { return forecaster + interpolator + refinement; }
};

struct EnsembleForecast {
    std::vector<double> times;
    /// members[m][j] is member m's estimate at times[j].
    std::vector<std::vector<Tensor>> members;
    std::vector<std::uint64_t> seeds;
    Schedule schedule = make_schedule(1);
    Sampler sampler = Sampler::cold;
    bool refined = false;
    bool accelerated = false;
    bool outside_training_regime = false;
    /// step_forecasts[m][n] = x_h^(n), filled when requested.
    std::vector<std::vector<Tensor>> step_forecasts;
    PassCount passes;
    double seconds = 0.0;

    std::size_t size() const { return members.size(); }

    std::size_t time_index(double j) const {
        for (std::size_t k = 0; k < times.size(); ++k) {
            if (times[k] == j) return k;
        }
        throw DomainError("forecast has no output at time " + std::to_string(j));
    }

    /// (M, ...) stack of the members at output index k.
    Tensor at(std::size_t k) const {
        std::vector<Tensor> items;
        for (const auto& m : members) items.push_back(m.at(k));
        return stack(items);
    }
};

inline std::vector<double> default_outputs(std::size_t h) {
    std::vector<double> j;
    for (std::size_t i = 1; i <= h; ++i) j.push_back(static_cast<double>(i));
    return j;
}

namespace detail {

inline void require_finite(const Tensor& t, const char* what, std::size_t n) {
    if (!t.all_finite()) {
        throw NumericError(std::string("sampler: non-finite ") + what + " at step n = " + std::to_string(n));
    }
}

inline std::vector<double> sorted_outputs(const SampleRequest& req) {
    const double h = static_cast<double>(req.schedule.horizon());
    std::vector<double> j = req.outputs.empty() ? default_outputs(req.schedule.horizon()) : req.outputs;
    std::sort(j.begin(), j.end());
    j.erase(std::unique(j.begin(), j.end()), j.end());
    for (double v : j) {
        if (!(v > 0.0 && v <= h)) throw DomainError("output time " + std::to_string(v) + " outside (0, h]");
        if (v < h && !req.schedule.contains(v) && req.refine == Refinement::off) {
            throw DomainError("output time " + std::to_string(v) +
                              " is not on the schedule; enable refinement to produce it");
        }
    }
    return j;
}

/// Runs `work(m)` for m in [0, count) on up to `jobs` threads. Every slot is
/// written by exactly one thread, so results do not depend on `jobs`.
template <class Work>
void for_each_member(std::size_t count, std::size_t jobs, Work work) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (std::size_t m = 0; m < count; ++m) work(m);
        return;
    }
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t m = w; m < count; m += jobs) work(m);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace detail

inline std::uint64_t member_seed(std::uint64_t root, std::size_t m) { return derive_seed(root, "member", m); }

struct ColdStepResult {
    Tensor next;
    Tensor forecast;
};

/// One inner update: x_h = F(x, s); x' = I(x_t, x_h, s') - I(x_t, x_h, s) + x.
template <ForecastRule F, InterpolationRule I>
ColdStepResult cold_step(const F& f, const I& interp, const Tensor& x_t, const Tensor& x, double s, double s_next,
                         StepContext& ctx) {
    Tensor x_h = call_forecast(f, x, s, ctx);
    Tensor next = call_interpolate(interp, x_t, x_h, s_next, ctx);
    Tensor cur = call_interpolate(interp, x_t, x_h, s, ctx);
    Tensor out(x.shape());
    for (std::size_t k = 0; k < out.numel(); ++k) out[k] = (next[k] - cur[k]) + x[k];
    return {std::move(out), std::move(x_h)};
}

namespace detail {

struct MemberResult {
    std::vector<Tensor> outputs;
    std::vector<Tensor> step_forecasts;
};

template <ForecastRule F, InterpolationRule I>
MemberResult sample_member(const F& f, const I& interp, const SampleRequest& req, const std::vector<double>& times,
                           Sampler sampler, Rng& rng) {
    const Schedule& S = req.schedule;
    const std::size_t N = S.size();
    StepContext ctx{&req.x_t, 0, N, &rng};

    // intermediates[n] = x_hat at i_n
    std::vector<Tensor> intermediates{req.x_t};
    std::vector<Tensor> step_forecasts;
    Tensor x = req.x_t;
    Tensor x_h;
    for (std::size_t n = 0; n < N; ++n) {
        ctx.n = n;
        if (n + 1 == N) {
            x_h = call_forecast(f, x, S[n], ctx);
            require_finite(x_h, "forecast", n);
            if (req.keep_step_forecasts) step_forecasts.push_back(x_h);
            break;
        }
        if (sampler == Sampler::cold) {
            auto r = cold_step(f, interp, req.x_t, x, S[n], S[n + 1], ctx);
            x = std::move(r.next);
            x_h = std::move(r.forecast);
        } else {
            x_h = call_forecast(f, x, S[n], ctx);
            x = call_interpolate(interp, req.x_t, x_h, S[n + 1], ctx);
        }
        require_finite(x_h, "forecast", n);
        require_finite(x, "interpolation", n);
        if (req.keep_step_forecasts) step_forecasts.push_back(x_h);
        intermediates.push_back(x);
    }

    const double h = static_cast<double>(S.horizon());
    MemberResult out;
    out.step_forecasts = std::move(step_forecasts);
    for (double j : times) {
        if (j == h) {
            out.outputs.push_back(x_h);
            continue;
        }
        const bool on_schedule = S.contains(j);
        const bool refine = req.refine == Refinement::overwrite || (req.refine == Refinement::fill_missing && !on_schedule);
        if (refine) {
            ctx.n = N;
            Tensor y = call_interpolate(interp, req.x_t, x_h, j, ctx);
            require_finite(y, "refinement", N);
            out.outputs.push_back(std::move(y));
        } else {
            const auto& steps = S.steps();
            const auto n = static_cast<std::size_t>(std::find(steps.begin(), steps.end(), j) - steps.begin());
            out.outputs.push_back(intermediates.at(n));
        }
    }
    return out;
}

}  // namespace detail

template <ForecastRule F, InterpolationRule I>
EnsembleForecast sample(const F& f, const I& interp, const SampleRequest& req, Sampler sampler) {
    if (req.members < 1) throw DomainError("sample: ensemble size must be >= 1");
    if (!req.x_t.all_finite()) throw NumericError("sample: initial condition is not finite");
    const auto start = std::chrono::steady_clock::now();

    EnsembleForecast out;
    out.times = detail::sorted_outputs(req);
    out.schedule = req.schedule;
    out.sampler = sampler;
    out.accelerated = req.schedule.subsampled();

    const double h = static_cast<double>(req.schedule.horizon());
    std::size_t refined = 0;
    for (double j : out.times) {
        if (j == h) continue;
        if (req.refine == Refinement::overwrite || (req.refine == Refinement::fill_missing && !req.schedule.contains(j))) {
            ++refined;
            if (j < 1.0) out.outside_training_regime = true;
        }
    }
    out.refined = refined > 0;
    out.outside_training_regime = out.outside_training_regime || req.schedule.has_fractional_early_steps();
    const std::size_t N = req.schedule.size();
    out.passes = {N, 2 * N, refined};

    out.members.resize(req.members);
    out.seeds.resize(req.members);
    if (req.keep_step_forecasts) out.step_forecasts.resize(req.members);
    detail::for_each_member(req.members, req.jobs, [&](std::size_t m) {
        const std::uint64_t seed = member_seed(req.seed, m);
        Rng rng(seed);
        auto r = detail::sample_member(f, interp, req, out.times, sampler, rng);
        out.seeds[m] = seed;
        out.members[m] = std::move(r.outputs);
        if (req.keep_step_forecasts) out.step_forecasts[m] = std::move(r.step_forecasts);
    });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

template <ForecastRule F, InterpolationRule I>
EnsembleForecast cold_sample(const F& f, const I& interp, const SampleRequest& req) {
    return sample(f, interp, req, Sampler::cold);
}

template <ForecastRule F, InterpolationRule I>
EnsembleForecast naive_sample(const F& f, const I& interp, const SampleRequest& req) {
    return sample(f, interp, req, Sampler::naive);
}

/// Applies the sampler ceil(H/h) times, feeding each member's x_h back in as
/// that member's next initial condition. Output times are 1..H; the surplus
/// steps of a truncated final window are discarded.
template <ForecastRule F, InterpolationRule I>
EnsembleForecast autoregressive_rollout(const F& f, const I& interp, const SampleRequest& req, std::size_t H,
                                        Sampler sampler = Sampler::cold) {
    if (H < 1) throw DomainError("rollout: evaluation horizon must be >= 1");
    if (req.members < 1) throw DomainError("rollout: ensemble size must be >= 1");
    const auto start = std::chrono::steady_clock::now();
    const std::size_t h = req.schedule.horizon();
    const std::size_t windows = (H + h - 1) / h;

    SampleRequest window = req;
    window.outputs = default_outputs(h);
    window.keep_step_forecasts = false;
    const auto times = detail::sorted_outputs(window);

    EnsembleForecast out;
    out.times = default_outputs(H);
    out.schedule = req.schedule;
    out.sampler = sampler;
    out.accelerated = req.schedule.subsampled();
    out.outside_training_regime = req.schedule.has_fractional_early_steps();
    out.members.resize(req.members);
    out.seeds.resize(req.members);

    std::size_t refined = 0;
    for (double j : times) {
        if (j < static_cast<double>(h) &&
            (req.refine == Refinement::overwrite || (req.refine == Refinement::fill_missing && !req.schedule.contains(j)))) {
            ++refined;
        }
    }
    out.refined = refined > 0;
    const std::size_t N = req.schedule.size();
    out.passes = {windows * N, windows * 2 * N, windows * refined};

    detail::for_each_member(req.members, req.jobs, [&](std::size_t m) {
        const std::uint64_t seed = member_seed(req.seed, m);
        Rng rng(seed);
        Tensor x = req.x_t;
        std::vector<Tensor> traj;
        for (std::size_t w = 0; w < windows; ++w) {
            SampleRequest local = window;
            local.x_t = x;
            auto r = detail::sample_member(f, interp, local, times, sampler, rng);
            for (auto& y : r.outputs) {
                if (traj.size() < H) traj.push_back(y);
            }
            x = r.outputs.back();
            if (!x.all_finite()) throw NumericError("rollout: window " + std::to_string(w) + " diverged");
        }
        out.seeds[m] = seed;
        out.members[m] = std::move(traj);
    });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

/// Adds outputs x_{t+j} = I(x_t, x_h, j) at every new j of `fine`. Existing
/// outputs are kept as they are.
template <InterpolationRule I>
EnsembleForecast upsample_outputs(const I& interp, const EnsembleForecast& forecast, const Tensor& x_t,
                                  std::vector<double> fine) {
    const std::size_t h_int = forecast.schedule.horizon();
    const double h = static_cast<double>(h_int);
    const std::size_t k_h = forecast.time_index(h);
    std::sort(fine.begin(), fine.end());
    fine.erase(std::unique(fine.begin(), fine.end()), fine.end());
    for (double j : fine) {
        const bool existing = std::find(forecast.times.begin(), forecast.times.end(), j) != forecast.times.end();
        if (!existing && !(j > 0.0 && j < h)) {
            throw DomainError("upsample: output time " + std::to_string(j) + " outside (0, h)");
        }
    }
    EnsembleForecast out = forecast;
    out.times = fine;
    std::size_t added = 0;
    for (double j : fine) {
        if (std::find(forecast.times.begin(), forecast.times.end(), j) == forecast.times.end()) {
            ++added;
            if (j < 1.0) out.outside_training_regime = true;
        }
    }
    out.passes.refinement += added;
    out.refined = out.refined || added > 0;
    for (std::size_t m = 0; m < forecast.size(); ++m) {
        Rng rng(derive_seed(forecast.seeds.at(m), "upsample", 0));
        StepContext ctx{&x_t, forecast.schedule.size(), forecast.schedule.size(), &rng};
        const Tensor& x_h = forecast.members[m][k_h];
        std::vector<Tensor> row;
        for (double j : fine) {
            auto it = std::find(forecast.times.begin(), forecast.times.end(), j);
            if (it != forecast.times.end()) {
                row.push_back(forecast.members[m][static_cast<std::size_t>(it - forecast.times.begin())]);
            } else {
                row.push_back(call_interpolate(interp, x_t, x_h, j, ctx));
            }
        }
        out.members[m] = std::move(row);
    }
    return out;
}

/// {h/r, 2h/r, ..., h}: r outputs per unit of horizon.
inline std::vector<double> refined_outputs(std::size_t h, std::size_t per_unit) {
    if (per_unit < 1) throw DomainError("refined_outputs: resolution must be >= 1");
    std::vector<double> j;
    for (std::size_t k = 1; k <= h * per_unit; ++k) {
        j.push_back(static_cast<double>(k) / static_cast<double>(per_unit));
    }
    return j;
}

// ---------------------------------------------------------------------------
// Forecast files: DYFT with a leading member axis, shape (M, |J|, C, ...),
// plus a JSON sidecar at `path.json` with times, seeds and flags.

inline SeriesFile forecast_series(const EnsembleForecast& f, const std::string& system_id, double dt,
                                  const Normalization& norm) {
    std::vector<Tensor> rows;
    for (const auto& m : f.members) rows.push_back(stack(m));
    return {system_id, dt, stack(rows), norm};
}

}  // namespace dyffuse
