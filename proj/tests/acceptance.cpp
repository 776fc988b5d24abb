// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks AC1-AC11. One line per criterion; exit status 1 when any
// criterion fails. AC7, AC8 and AC10 share one desk-scale training run.

#include <cstdio>
#include <iostream>
#include <optional>

#include "support.hpp"

using namespace dyffuse;
using namespace dyffuse::testing;

namespace {

// Pinned tolerances and budgets.
constexpr std::size_t kOraclePairs = 200;
constexpr double kOracleTol = 1e-9;
constexpr double kOracleSeconds = 10.0;
constexpr std::size_t kEulerTrials = 10000;
constexpr double kEulerSeconds = 5.0;
constexpr double kSlopeLo = 0.8, kSlopeHi = 1.2;
constexpr double kNaiveFloor = 0.09;
constexpr double kOrderSeconds = 30.0;
constexpr double kBiasTol = 1e-12;
constexpr std::size_t kBiasSeeds = 100;
constexpr std::size_t kCrpsEnsembles = 1000;
constexpr double kCrpsTol = 1e-12;
constexpr double kSsrExampleTol = 1e-9;
constexpr double kCalibLo = 0.95, kCalibHi = 1.05;
constexpr std::size_t kGradSeeds = 100;
constexpr double kLossRatio = 0.5;
constexpr double kTrainingSeconds = 15.0 * 60.0;
constexpr double kSpearmanP = 0.05;
constexpr std::size_t kAccelAux = 8;
constexpr std::size_t kTimingRuns = 10;
constexpr double kAccelDegradation = 0.25;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const char* id, const char* title, const Outcome& o) {
    std::printf("%s %s %s: %s\n", id, o.pass ? "PASS" : "FAIL", title, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
}

template <class Body>
void criterion(const char* id, const char* title, Body body) {
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    report(id, title, o);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Outcome oracle_exactness() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (std::uint64_t s = 0; s < kOraclePairs; ++s) worst = std::max(worst, oracle_exactness_error(s));
    const double sec = seconds_since(t0);
    return {worst <= kOracleTol && sec < kOracleSeconds,
            fmt("%zu pairs, max error %.3g (tol %.0e), %.2f s (< %.0f s)", kOraclePairs, worst, kOracleTol, sec,
                kOracleSeconds)};
}

Outcome euler_identity() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t bad = 0;
    for (std::uint64_t s = 0; s < kEulerTrials; ++s) bad += euler_matches_cold_step(s) ? 0 : 1;
    const double sec = seconds_since(t0);
    return {bad == 0 && sec < kEulerSeconds,
            fmt("%zu trials, %zu mismatches, %.2f s (< %.0f s)", kEulerTrials, bad, sec, kEulerSeconds)};
}

Outcome error_order() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = measure_error_order(ErrorOrderConfig{});
    const double sec = seconds_since(t0);
    if (!r.cold_fit) return {false, "cold errors at roundoff, no fit"};
    const double slope = r.cold_fit->slope, naive = r.naive_error.back();
    return {slope >= kSlopeLo && slope <= kSlopeHi && naive >= kNaiveFloor && sec < kOrderSeconds,
            fmt("cold slope %.4f [CI %.4f, %.4f] in [%.1f, %.1f]; naive error %.4f at ds = %.4g (>= %.2f); %.3f s",
                slope, r.cold_fit->ci_low, r.cold_fit->ci_high, kSlopeLo, kSlopeHi, naive, r.steps.back(),
                kNaiveFloor, sec)};
}

Outcome bias_cancellation() {
    double cold_worst = 0.0, naive_worst = 0.0;
    for (std::uint64_t s = 0; s < kBiasSeeds; ++s) {
        const auto clean = biased_intermediates(s, 0.0);
        for (double delta : {0.01, 0.1, 1.0}) {
            const auto run = biased_intermediates(s, delta);
            for (std::size_t n = 0; n < clean.cold.size(); ++n) {
                cold_worst = std::max(cold_worst, detail::max_abs_diff(run.cold[n], clean.cold[n]));
                for (std::size_t k = 0; k < run.naive[n].numel(); ++k) {
                    naive_worst = std::max(naive_worst, std::abs(run.naive[n][k] - clean.naive[n][k] - delta));
                }
            }
        }
    }
    return {cold_worst <= kBiasTol && naive_worst <= kBiasTol,
            fmt("%zu schedules x 3 biases: cold drift %.3g, naive shift error %.3g (tol %.0e)", kBiasSeeds,
                cold_worst, naive_worst, kBiasTol)};
}

double crps_brute(const Tensor& ens, const Tensor& truth) {
    const std::size_t m = ens.dim(0), e = truth.numel();
    double total = 0.0;
    for (std::size_t k = 0; k < e; ++k) {
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            a += std::abs(ens[i * e + k] - truth[k]);
            for (std::size_t j = 0; j < m; ++j) b += std::abs(ens[i * e + k] - ens[j * e + k]);
        }
        total += a / double(m) - b / (2.0 * double(m) * double(m));
    }
    return total / double(e);
}

Outcome metric_oracles() {
    Rng rng(5);
    double brute = 0.0;
    bool mae_exact = true;
    for (std::size_t t = 0; t < kCrpsEnsembles; ++t) {
        const auto m = static_cast<std::size_t>(rng.uniform_int(1, 12));
        const auto e = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const Tensor ens = standard_normal({m, e}, rng), truth = standard_normal({e}, rng);
        brute = std::max(brute, std::abs(crps(ens, truth) - crps_brute(ens, truth)));
        const Tensor one = standard_normal({1, e}, rng);
        double mae = 0.0;
        for (std::size_t k = 0; k < e; ++k) mae += std::abs(one[k] - truth[k]);
        mae_exact = mae_exact && crps(one, truth) == mae / double(e);
    }
    auto pair = [](double a, double b) { return Tensor(Shape{2, 1}, std::vector<double>{a, b}); };
    auto scalar = [](double v) { return Tensor(Shape{1}, std::vector<double>{v}); };
    const double s1 = ssr(pair(1, 3), scalar(1)), s2 = ssr(pair(0, 2), scalar(3));
    const bool hand = std::abs(s1 - std::sqrt(2.0)) <= kSsrExampleTol && std::abs(s2 - std::sqrt(0.5)) <= kSsrExampleTol;
    Rng g(6);
    const std::size_t elements = 100000;
    const Tensor truth = standard_normal({elements}, g);
    const double calib = ssr(standard_normal({50, elements}, g), truth);
    const bool calibrated = calib >= kCalibLo && calib <= kCalibHi;
    return {brute <= kCrpsTol && mae_exact && hand && calibrated,
            fmt("CRPS vs double sum %.3g (tol %.0e) over %zu ensembles; M=1 equals MAE: %s; SSR examples %.6f, %.6f; "
                "Gaussian SSR %.4f in [%.2f, %.2f]",
                brute, kCrpsTol, kCrpsEnsembles, mae_exact ? "yes" : "no", s1, s2, calib, kCalibLo, kCalibHi)};
}

Outcome gradients() {
    std::size_t checked = 0, failed_runs = 0, cases = 0;
    std::string where;
    auto run = [&](const std::vector<OpCase>& list, std::uint64_t base) {
        for (const auto& op : list) {
            ++cases;
            for (std::uint64_t s = 0; s < kGradSeeds; ++s) {
                const auto r = op.run(base + s);
                checked += r.checked;
                if (!r.ok()) {
                    ++failed_runs;
                    if (where.empty()) where = op.name + " seed " + std::to_string(base + s) + " " + r.worst_at;
                }
            }
        }
    };
    run(op_cases(), 5000);
    run(backbone_cases(), 7000);
    return {failed_runs == 0,
            fmt("%zu op and backbone cases x %zu seeds, %zu derivatives, %zu failing runs%s%s", cases, kGradSeeds,
                checked, failed_runs, where.empty() ? "" : ", first: ", where.c_str())};
}

Outcome memory_contract() {
    std::string seen;
    bool ok = true;
    for (std::size_t h : {8u, 16u, 32u, 134u}) {
        Rng data(h);
        auto make = [&](std::size_t T) {
            const Tensor z = standard_normal({T, 1, 2}, data);
            return toy_trajectory(T, 2, [&](std::size_t t, std::size_t k) { return z[t * 2 + k]; });
        };
        const Trajectory a = make(h + 10), v = make(h + 3);
        auto train = split_windows(a, h);
        auto val = split_windows(v, h);
        AccessProbe probe;
        for (auto& w : train) w.attach(&probe);
        NetConfig c;
        c.snapshot_shape = {1, 2};
        c.horizon = h;
        c.hidden = {6};
        c.time_features = 4;
        c.time_dim = 4;
        c.dropout.rate = 0.1;
        Rng init(h + 1);
        InterpolatorModel interp(c, init);
        interp.freeze(true);
        TrainConfig cfg;
        cfg.horizon = h;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        (void)train_forecaster(ForecasterModel(c, Conditioning::none, init), interp, train, val, cfg);
        std::size_t most = 0;
        for (const auto& w : train) {
            const auto it = probe.touched().find(w.id());
            const std::set<std::size_t> want{w.start(), w.start() + h};
            if (it == probe.touched().end() || it->second != want) ok = false;
            if (it != probe.touched().end()) most = std::max(most, it->second.size());
        }
        seen += fmt("%sh=%zu: %zu windows, max %zu snapshots", seen.empty() ? "" : "; ", h, train.size(), most);
    }
    return {ok, seen};
}

Outcome determinism() {
    TempDir a("accept_a"), b("accept_b");
    ExperimentSpec spec;
    spec.name = "baselines";
    spec.config = tiny_config();
    spec.out = a.path();
    (void)run_experiment(spec);
    spec.out = b.path();
    (void)run_experiment(spec);
    std::size_t compared = 0;
    const auto diff = differing_artifacts(a.path(), b.path(), &compared);
    std::string first = diff.empty() ? "" : ", first: " + diff.front();
    return {diff.empty() && compared > 0,
            fmt("experiment '%s' run twice: %zu artifacts compared, %zu differ%s", spec.name.c_str(), compared,
                diff.size(), first.c_str())};
}

// ---------------------------------------------------------------------------
// Desk-scale model shared by AC7, AC8 and AC10.

struct DeskRun {
    Config config;
    Dataset data;
    std::optional<InterpolatorModel> interp;
    std::optional<ForecasterModel> forecaster;
    LossDrop stage1, stage2;
    double seconds = 0.0;
};

std::filesystem::path desk_config_path() {
    return std::filesystem::path(DYFFUSE_SOURCE_DIR) / "configs" / "desk_spring_mesh.cfg";
}

Outcome desk_training(DeskRun& run) {
    const auto t0 = std::chrono::steady_clock::now();
    run.config = Config::load(desk_config_path());
    run.data = generate_dataset(run.config);
    auto r1 = fit_interpolator(run.config, run.data);
    run.stage1 = loss_drop(r1.history);
    run.interp = std::move(r1.model);
    auto r2 = fit_forecaster(run.config, run.data, *run.interp);
    run.stage2 = loss_drop(r2.history);
    run.forecaster = std::move(r2.model);
    run.seconds = seconds_since(t0);
    const std::size_t epochs = run.config.size("epochs");
    const bool ok = run.stage1.ratio() <= kLossRatio && run.stage2.ratio() <= kLossRatio && epochs <= 200 &&
                    run.seconds < kTrainingSeconds;
    return {ok, fmt("%zu epochs; stage 1 val %.4f -> %.4f (ratio %.3f, epoch %zu); stage 2 val %.4f -> %.4f "
                    "(ratio %.3f, epoch %zu); limit %.2f; %.0f s (< %.0f s)",
                    epochs, run.stage1.initial, run.stage1.best, run.stage1.ratio(), run.stage1.best_epoch,
                    run.stage2.initial, run.stage2.best, run.stage2.ratio(), run.stage2.best_epoch, kLossRatio,
                    run.seconds, kTrainingSeconds)};
}

MetricsReport score(const DeskRun& run, const ForecasterModel& f, const Config& c, bool step_forecasts = false,
                    std::optional<StepCurve>* curve = nullptr) {
    const auto cases = eval_cases(c, run.data);
    SamplingPlan plan = sampling_plan_from(c);
    plan.keep_step_forecasts = step_forecasts;
    const auto fc = forecast_cases(f, *run.interp, run.data, cases, plan);
    if (curve) *curve = step_curve(fc, run.data, cases);
    return score_cases(fc, run.data, cases);
}

Config with(Config c, const char* key, const std::string& value) {
    c.set(key, value);
    return c;
}

Outcome ablations(const DeskRun& run) {
    if (!run.forecaster) return {false, "desk training did not finish"};
    std::optional<StepCurve> curve;
    const auto cold = score(run, *run.forecaster, with(run.config, "sampler", "cold"), true, &curve);
    const auto naive = score(run, *run.forecaster, with(run.config, "sampler", "naive"));
    const auto off = score(run, *run.forecaster, with(run.config, "interpolator_inference_dropout", "false"));
    const bool a = cold.mean_crps < naive.mean_crps;
    const bool b = off.mean_ssr && *off.mean_ssr == 0.0 && off.mean_crps > cold.mean_crps;
    const bool c = curve && curve->trend && curve->trend->rho <= 0.0 && curve->trend->p_negative < kSpearmanP;
    std::string steps;
    for (double v : curve->crps) steps += fmt(" %.4f", v);
    return {a && b && c,
            fmt("(a) CRPS cold %.4f < naive %.4f: %s; (b) no-dropout SSR %.3g, CRPS %.4f > %.4f: %s; "
                "(c) step curve rho %.3f, p %.4f (< %.2f): %s; cold SSR %.3f; step CRPS:%s",
                cold.mean_crps, naive.mean_crps, a ? "yes" : "no", off.mean_ssr.value_or(-1.0), off.mean_crps,
                cold.mean_crps, b ? "yes" : "no", curve->trend ? curve->trend->rho : 0.0,
                curve->trend ? curve->trend->p_negative : 1.0, kSpearmanP, c ? "yes" : "no",
                cold.mean_ssr.value_or(-1.0), steps.c_str())};
}

Outcome acceleration(const DeskRun& run) {
    if (!run.interp) return {false, "desk training did not finish"};
    const Config c8 = with(run.config, "aux_steps_k", std::to_string(kAccelAux));
    const auto t0 = std::chrono::steady_clock::now();
    auto r = fit_forecaster(c8, run.data, *run.interp);
    const double train_sec = seconds_since(t0);
    const ForecasterModel& f = r.model;
    const std::size_t h = run.config.size("horizon");

    const auto variants = experiment_variants("accel-sweep", c8);
    std::vector<Schedule> schedules;
    for (const auto& v : variants) schedules.push_back(inference_schedule_from(v.config));
    const Schedule& full = schedules.front();
    const Schedule& base = schedules.back();

    // Pass counts from one sampler call per variant.
    const auto cases = eval_cases(c8, run.data);
    InterpolatorModel I = *run.interp;
    SampleRequest req;
    req.x_t = run.data.test.at(cases[0].trajectory).snapshot(cases[0].start);
    req.members = c8.size("members");
    req.seed = cases[0].seed;
    std::vector<std::size_t> passes;
    for (const auto& s : schedules) {
        req.schedule = s;
        passes.push_back(cold_sample(NeuralForecaster{&f}, NeuralInterpolator{&I}, req).passes.total());
    }
    const bool counts = passes.front() == 3 * (h + kAccelAux) && passes.back() == 3 * h;

    // Wall clock: minimum over interleaved repetitions.
    std::vector<double> best(schedules.size(), 1e300);
    for (std::size_t rep = 0; rep < kTimingRuns; ++rep) {
        for (std::size_t k = 0; k < schedules.size(); ++k) {
            req.schedule = schedules[k];
            const auto s0 = std::chrono::steady_clock::now();
            (void)cold_sample(NeuralForecaster{&f}, NeuralInterpolator{&I}, req);
            best[k] = std::min(best[k], seconds_since(s0));
        }
    }
    bool monotone = true;
    for (std::size_t k = 1; k < best.size(); ++k) monotone = monotone && best[k] < best[k - 1];

    const auto score_with = [&](const Config& c) { return score(run, f, c).mean_crps; };
    const double crps_full = score_with(variants.front().config);
    const double crps_base = score_with(variants.back().config);
    const double degradation = (crps_base - crps_full) / crps_full;
    const bool quality = degradation < kAccelDegradation;

    std::string pass_str, time_str;
    for (std::size_t k = 0; k < schedules.size(); ++k) {
        pass_str += fmt("%s%zu", k ? "/" : "", passes[k]);
        time_str += fmt("%s%.2f", k ? "/" : "", best[k] * 1e3);
    }
    return {counts && monotone && quality && full.size() == h + kAccelAux && base.size() == h,
            fmt("k=%zu forecaster (stage 2 ratio %.3f, %.0f s); passes %s (want %zu -> %zu); min-of-%zu ms %s: %s; "
                "CRPS full %.4f, base-only %.4f, change %+.1f%% (< %.0f%%)",
                kAccelAux, loss_drop(r.history).ratio(), train_sec, pass_str.c_str(), 3 * (h + kAccelAux), 3 * h,
                kTimingRuns, time_str.c_str(), monotone ? "decreasing" : "NOT decreasing", crps_full, crps_base,
                100.0 * degradation, 100.0 * kAccelDegradation)};
}

}  // namespace

int main() {
    std::printf("dyffuse %s acceptance\n", kVersion);
    criterion("AC1", "oracle exactness", oracle_exactness);
    criterion("AC2", "Euler identity", euler_identity);
    criterion("AC3", "error order", error_order);
    criterion("AC4", "bias cancellation", bias_cancellation);
    criterion("AC5", "metric oracles", metric_oracles);
    criterion("AC6", "gradient correctness", gradients);
    DeskRun run;
    criterion("AC7", "desk-scale training", [&] { return desk_training(run); });
    criterion("AC8", "directional ablations", [&] { return ablations(run); });
    criterion("AC9", "memory contract", memory_contract);
    criterion("AC10", "accelerated sampling", [&] { return acceleration(run); });
    criterion("AC11", "determinism", determinism);
    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
