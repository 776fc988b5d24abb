// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets, model fitting, scored evaluation over test initial conditions and
// the built-in experiment suite. Experiments run the stages
// gen-data -> train -> sample -> evaluate and every stage reads its inputs back
// from the run directory, so a truncated stage list can be resumed later.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dyffuse/config.hpp"
#include "dyffuse/ode_analysis.hpp"

namespace dyffuse {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    std::vector<Trajectory> train, val, test;

    const Trajectory& any() const { return train.at(0); }
    Shape snapshot_shape() const { return any().snapshot_shape(); }
};

/// Trajectory g (counted across train, val, test) starts from substream
/// ("trajectory", g). Every split is normalized with the pooled training
/// statistics.
inline Dataset generate_dataset(const Config& c) {
    const SpringMeshSystem sys = mesh_from(c);
    const std::uint64_t seed = c.integer("seed");
    const std::size_t counts[3] = {c.size("train_trajectories"), c.size("val_trajectories"),
                                   c.size("test_trajectories")};
    for (std::size_t n : counts) {
        if (n < 1) throw ConfigError("every split needs at least one trajectory");
    }
    std::vector<Tensor> raw[3];
    std::size_t g = 0;
    for (int s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < counts[s]; ++k, ++g) {
            Rng rng = Rng::substream(seed, "trajectory", g);
            const MeshState init = random_initial_state(sys, rng, c.real("position_sigma"), c.real("momentum_sigma"));
            raw[s].push_back(simulate_spring_mesh_raw(sys, init, c.size("steps"), c.size("stride")));
        }
    }
    const Normalization norm = compute_normalization(std::span<const Tensor>(raw[0]));
    Dataset d;
    std::vector<Trajectory>* out[3] = {&d.train, &d.val, &d.test};
    const double dt = sys.dt * static_cast<double>(c.size("stride"));
    for (int s = 0; s < 3; ++s) {
        for (const Tensor& r : raw[s]) {
            Trajectory t{spring_mesh_id(sys), normalize(r, norm), dt, norm};
            t.validate();
            out[s]->push_back(std::move(t));
        }
    }
    return d;
}

namespace detail {

inline const char* const kSplits[3] = {"train", "val", "test"};

inline fs::path numbered(const fs::path& dir, const std::string& stem, std::size_t k, const char* ext) {
    std::ostringstream os;
    os << stem << '_' << std::setw(3) << std::setfill('0') << k << ext;
    return dir / os.str();
}

inline void require_file(const fs::path& p) {
    if (!fs::exists(p)) throw FormatError("missing input: " + p.string());
}

}  // namespace detail

/// dir/{train,val,test}_NNN.dyft
inline void save_dataset(const fs::path& dir, const Dataset& d) {
    fs::create_directories(dir);
    const std::vector<Trajectory>* in[3] = {&d.train, &d.val, &d.test};
    for (int s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < in[s]->size(); ++k) {
            save_trajectory(detail::numbered(dir, detail::kSplits[s], k, ".dyft"), (*in[s])[k]);
        }
    }
}

inline Dataset load_dataset(const fs::path& dir) {
    Dataset d;
    std::vector<Trajectory>* out[3] = {&d.train, &d.val, &d.test};
    for (int s = 0; s < 3; ++s) {
        detail::require_file(detail::numbered(dir, detail::kSplits[s], 0, ".dyft"));
        for (std::size_t k = 0;; ++k) {
            const fs::path p = detail::numbered(dir, detail::kSplits[s], k, ".dyft");
            if (!fs::exists(p)) break;
            out[s]->push_back(load_trajectory(p));
        }
    }
    if (d.train[0].normalization != d.test[0].normalization || d.train[0].normalization != d.val[0].normalization) {
        throw FormatError("dataset " + dir.string() + ": splits use different normalizations");
    }
    return d;
}

// ---------------------------------------------------------------------------
// Model fitting. Initial weights come from substream ("init", 1|2|3) for the
// interpolator, forecaster and barebone respectively.

inline InterpolatorModel new_interpolator(const Config& c, const Shape& snapshot) {
    Rng init = Rng::substream(c.integer("seed"), "init", 1);
    return InterpolatorModel(net_config_from(c, snapshot, c.size("interpolator_width"), c.real("interpolator_dropout")),
                             init);
}

inline ForecasterModel new_forecaster(const Config& c, const Shape& snapshot) {
    Rng init = Rng::substream(c.integer("seed"), "init", 2);
    return ForecasterModel(net_config_from(c, snapshot, c.size("forecaster_width"), c.real("forecaster_dropout")),
                           parse_conditioning(c.text("conditioning")), init);
}

inline BarebonePredictor new_barebone(const Config& c, const Shape& snapshot) {
    Rng init = Rng::substream(c.integer("seed"), "init", 3);
    NetConfig n = net_config_from(c, snapshot, c.size("barebone_width"), c.real("barebone_dropout"));
    n.skip = false;
    return BarebonePredictor(n, init);
}

/// Stage 1; the returned model is frozen with inference dropout on.
inline TrainResult<InterpolatorModel> fit_interpolator(const Config& c, const Dataset& d) {
    const TrainConfig cfg = train_config_from(c);
    auto train = split_windows(std::span<const Trajectory>(d.train), cfg.horizon);
    auto val = split_windows(std::span<const Trajectory>(d.val), cfg.horizon);
    auto r = train_interpolator(new_interpolator(c, d.snapshot_shape()), train, val, cfg);
    r.model.freeze(true);
    return r;
}

inline TrainResult<ForecasterModel> fit_forecaster(const Config& c, const Dataset& d, const InterpolatorModel& interp) {
    const TrainConfig cfg = train_config_from(c);
    auto train = split_windows(std::span<const Trajectory>(d.train), cfg.horizon);
    auto val = split_windows(std::span<const Trajectory>(d.val), cfg.horizon);
    return train_forecaster(new_forecaster(c, d.snapshot_shape()), interp, train, val, cfg);
}

inline TrainResult<BarebonePredictor> fit_barebone(const Config& c, const Dataset& d) {
    TrainConfig cfg = train_config_from(c);
    cfg.norm = parse_norm(c.text("barebone_loss_norm"));
    auto train = split_windows(std::span<const Trajectory>(d.train), cfg.horizon);
    auto val = split_windows(std::span<const Trajectory>(d.val), cfg.horizon);
    return train_barebone(new_barebone(c, d.snapshot_shape()), train, val, cfg);
}

/// Epoch-0 and best validation loss of a history.
struct LossDrop {
    double initial = 0.0;
    double best = 0.0;
    std::size_t best_epoch = 0;
    double ratio() const { return best / initial; }
};

inline LossDrop loss_drop(const std::vector<LossRecord>& h) {
    if (h.empty()) throw DomainError("loss_drop: empty history");
    LossDrop d{h[0].val_loss, h[0].val_loss, 0};
    for (const auto& r : h) {
        if (r.val_loss < d.best) {
            d.best = r.val_loss;
            d.best_epoch = r.epoch;
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Evaluation over test initial conditions

struct EvalCase {
    std::size_t trajectory = 0;
    std::size_t start = 0;
    std::uint64_t seed = 0;
};

/// A strided subset of at most `eval_windows` test windows of length h. Case
/// k draws its members from substream ("eval", k), shared by every variant.
inline std::vector<EvalCase> eval_cases(const Config& c, const Dataset& d) {
    const std::size_t h = c.size("horizon");
    const auto windows = split_windows(std::span<const Trajectory>(d.test), h);
    std::vector<EvalCase> out;
    const auto pick = detail::strided_subset(windows.size(), c.size("eval_windows"));
    for (std::size_t k = 0; k < pick.size(); ++k) {
        const WindowView& w = windows[pick[k]];
        const auto traj = static_cast<std::size_t>(&w.trajectory() - d.test.data());
        out.push_back({traj, w.start(), derive_seed(c.integer("seed"), "eval", k)});
    }
    return out;
}

struct SamplingPlan {
    Schedule schedule = make_schedule(1);
    Sampler sampler = Sampler::cold;
    Refinement refine = Refinement::off;
    bool interpolator_dropout = true;
    std::size_t members = 1;
    std::size_t jobs = 1;
    bool keep_step_forecasts = false;
};

inline SamplingPlan sampling_plan_from(const Config& c) {
    SamplingPlan p;
    p.schedule = inference_schedule_from(c);
    p.sampler = parse_sampler(c.text("sampler"));
    p.refine = parse_refinement(c.text("refine"));
    p.interpolator_dropout = c.boolean("interpolator_inference_dropout");
    p.members = c.size("members");
    p.jobs = std::max<std::size_t>(1, c.size("jobs"));
    return p;
}

inline std::vector<EnsembleForecast> forecast_cases(const ForecasterModel& f, const InterpolatorModel& interp,
                                                    const Dataset& d, const std::vector<EvalCase>& cases,
                                                    const SamplingPlan& plan) {
    InterpolatorModel I = interp;
    I.set_inference_dropout(plan.interpolator_dropout);
    std::vector<EnsembleForecast> out;
    for (const auto& k : cases) {
        SampleRequest req;
        req.x_t = d.test.at(k.trajectory).snapshot(k.start);
        req.schedule = plan.schedule;
        req.refine = plan.refine;
        req.members = plan.members;
        req.seed = k.seed;
        req.jobs = plan.jobs;
        req.keep_step_forecasts = plan.keep_step_forecasts;
        out.push_back(sample(NeuralForecaster{&f}, NeuralInterpolator{&I}, req, plan.sampler));
    }
    return out;
}

enum class BaselineKind { dropout, perturbation };

inline std::vector<EnsembleForecast> baseline_cases(const BarebonePredictor& model, BaselineKind kind, double sigma,
                                                    const Dataset& d, const std::vector<EvalCase>& cases,
                                                    const SamplingPlan& plan) {
    std::vector<EnsembleForecast> out;
    for (const auto& k : cases) {
        BaselineRequest req{d.test.at(k.trajectory).snapshot(k.start), {}, plan.members, k.seed, plan.jobs};
        out.push_back(kind == BaselineKind::dropout ? dropout_ensemble(model, req)
                                                    : perturbation_ensemble(model, req, sigma));
    }
    return out;
}

inline MetricsReport score_cases(const std::vector<EnsembleForecast>& forecasts, const Dataset& d,
                                 const std::vector<EvalCase>& cases) {
    if (forecasts.size() != cases.size()) throw ShapeError("score_cases: one forecast per case expected");
    std::vector<MetricsReport> reports;
    for (std::size_t k = 0; k < cases.size(); ++k) {
        reports.push_back(evaluate(forecasts[k], d.test.at(cases[k].trajectory), cases[k].start));
    }
    return pool_reports(reports);
}

/// CRPS of the running forecast x_h^(n) against x_{t+h}, per diffusion step.
struct StepCurve {
    std::vector<double> steps;
    std::vector<double> crps;
    std::optional<RankCorrelation> trend;
};

inline StepCurve step_curve(const std::vector<EnsembleForecast>& forecasts, const Dataset& d,
                            const std::vector<EvalCase>& cases) {
    if (forecasts.empty() || forecasts.size() != cases.size()) throw ShapeError("step_curve: one forecast per case");
    StepCurve out;
    out.steps = forecasts[0].schedule.steps();
    const std::size_t N = out.steps.size(), h = forecasts[0].schedule.horizon();
    out.crps.assign(N, 0.0);
    for (std::size_t k = 0; k < cases.size(); ++k) {
        const auto& fc = forecasts[k];
        if (fc.step_forecasts.size() != fc.size()) throw DomainError("step_curve: forecasts lack step estimates");
        const Tensor truth = d.test.at(cases[k].trajectory).snapshot(cases[k].start + h);
        for (std::size_t n = 0; n < N; ++n) {
            std::vector<Tensor> ens;
            for (const auto& m : fc.step_forecasts) ens.push_back(m.at(n));
            out.crps[n] += crps(stack(ens), truth) / static_cast<double>(cases.size());
        }
    }
    if (N >= 3) {
        std::vector<double> n_axis(N);
        for (std::size_t n = 0; n < N; ++n) n_axis[n] = static_cast<double>(n);
        out.trend = spearman(n_axis, out.crps);
    }
    return out;
}

inline void write_step_curve_csv(std::ostream& out, const StepCurve& s) {
    out.precision(10);
    out << "n,i_n,crps\n";
    for (std::size_t n = 0; n < s.steps.size(); ++n) out << n << ',' << s.steps[n] << ',' << s.crps[n] << '\n';
}

// ---------------------------------------------------------------------------
// Forecast files: DYFT of shape (M, |J|, C, ...) plus `path.json` with times,
// seeds, schedule and flags. Step estimates go to `stem.steps.dyft`, shape
// (M, N, C, ...).

inline fs::path sidecar_path(const fs::path& p) { return fs::path(p.string() + ".json"); }
inline fs::path steps_path(const fs::path& p) {
    fs::path s = p;
    return s.replace_extension(".steps.dyft");
}

inline json forecast_sidecar(const EnsembleForecast& f) {
    json j;
    j["format"] = "dyffuse-forecast";
    j["version"] = kVersion;
    j["members"] = f.size();
    j["times"] = f.times;
    j["seeds"] = f.seeds;
    j["schedule"] = {{"horizon", f.schedule.horizon()},
                     {"steps", f.schedule.steps()},
                     {"aux_count", f.schedule.aux_count()},
                     {"subsampled", f.schedule.subsampled()}};
    j["sampler"] = to_string(f.sampler);
    j["flags"] = {{"refined", f.refined},
                  {"accelerated", f.accelerated},
                  {"outside_training_regime", f.outside_training_regime}};
    j["passes"] = {{"forecaster", f.passes.forecaster},
                   {"interpolator", f.passes.interpolator},
                   {"refinement", f.passes.refinement},
                   {"total", f.passes.total()}};
    j["step_forecasts"] = !f.step_forecasts.empty();
    j["seconds"] = f.seconds;
    return j;
}

inline void save_forecast(const fs::path& path, const EnsembleForecast& f, const Trajectory& like,
                          const json& extra = json::object()) {
    save_series_file(path, forecast_series(f, like.system_id, like.dt, like.normalization));
    if (!f.step_forecasts.empty()) {
        std::vector<Tensor> rows;
        for (const auto& m : f.step_forecasts) rows.push_back(stack(m));
        save_series_file(steps_path(path), {like.system_id, like.dt, stack(rows), like.normalization});
    }
    json j = forecast_sidecar(f);
    j.update(extra);
    std::ofstream out(sidecar_path(path));
    if (!out) throw FormatError("cannot write " + sidecar_path(path).string());
    out << j.dump(2) << '\n';
}

struct LoadedForecast {
    EnsembleForecast forecast;
    json sidecar;
};

inline LoadedForecast load_forecast(const fs::path& path) {
    detail::require_file(path);
    detail::require_file(sidecar_path(path));
    LoadedForecast out;
    {
        std::ifstream in(sidecar_path(path));
        try {
            out.sidecar = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(sidecar_path(path).string() + ": " + e.what());
        }
    }
    const json& j = out.sidecar;
    try {
        EnsembleForecast& f = out.forecast;
        f.times = j.at("times").get<std::vector<double>>();
        f.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        const json& s = j.at("schedule");
        f.schedule = Schedule(s.at("horizon").get<std::size_t>(), s.at("steps").get<std::vector<double>>(),
                              s.at("aux_count").get<std::size_t>(), s.at("subsampled").get<bool>());
        f.sampler = parse_sampler(j.at("sampler").get<std::string>());
        f.refined = j.at("flags").at("refined").get<bool>();
        f.accelerated = j.at("flags").at("accelerated").get<bool>();
        f.outside_training_regime = j.at("flags").at("outside_training_regime").get<bool>();
        f.passes = {j.at("passes").at("forecaster").get<std::size_t>(),
                    j.at("passes").at("interpolator").get<std::size_t>(),
                    j.at("passes").at("refinement").get<std::size_t>()};
        f.seconds = j.value("seconds", 0.0);
    } catch (const json::exception& e) {
        throw FormatError(sidecar_path(path).string() + ": " + e.what());
    }
    EnsembleForecast& f = out.forecast;
    auto unpack = [&](const Tensor& data, std::size_t inner) {
        if (data.rank() < 3 || data.dim(1) != inner) {
            throw FormatError(path.string() + ": forecast payload does not match its sidecar");
        }
        std::vector<std::vector<Tensor>> rows(data.dim(0));
        for (std::size_t m = 0; m < data.dim(0); ++m) {
            const Tensor row = slice_leading(data, m);
            for (std::size_t k = 0; k < inner; ++k) rows[m].push_back(slice_leading(row, k));
        }
        return rows;
    };
    f.members = unpack(load_series_file(path).data, f.times.size());
    if (f.members.size() != f.seeds.size()) throw FormatError(path.string() + ": member count differs from sidecar");
    if (j.value("step_forecasts", false)) {
        f.step_forecasts = unpack(load_series_file(steps_path(path)).data, f.schedule.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiments

inline const std::vector<std::string>& all_stages() {
    static const std::vector<std::string> s{"gen-data", "train", "sample", "evaluate"};
    return s;
}

inline std::vector<std::string> list_builtin_experiments() {
    return {"pipeline",          "ode-order",          "cold-vs-naive",   "no-dropout",
            "refinement-on-off", "conditioning-sweep", "horizon-sweep",   "aux-steps-sweep",
            "accel-sweep",       "step-vs-crps",       "baselines"};
}

struct ExperimentSpec {
    std::string name = "pipeline";
    std::vector<std::string> stages = all_stages();
    Config config;
    /// Root seeds; empty means the config seed alone.
    std::vector<std::uint64_t> seeds;
    fs::path out = "runs";
    /// Analysis settings for ode-order.
    ErrorOrderConfig ode;
};

/// One scored arm of an experiment.
struct Variant {
    std::string name;
    Config config;
    enum class Kind { diffusion, mc_dropout, perturbation } kind = Kind::diffusion;
    bool step_curve = false;
};

namespace detail {

inline Config with(Config c, std::initializer_list<std::pair<const char*, std::string>> kv) {
    for (const auto& [k, v] : kv) c.set(k, v);
    return c;
}

/// Evenly spread subset of `a` of the k auxiliary schedule indices 1..k.
inline std::string keep_aux(std::size_t h, std::size_t k, std::size_t a) {
    std::ostringstream os;
    os << 0;
    for (std::size_t j = 0; j < a; ++j) os << ',' << 1 + (j * k) / a;
    for (std::size_t n = k + 1; n < h + k; ++n) os << ',' << n;
    return os.str();
}

inline std::string interpolator_tag(const Config& c) { return "interpolator_h" + c.raw("horizon"); }
inline std::string forecaster_tag(const Config& c) {
    return "forecaster_h" + c.raw("horizon") + "_k" + c.raw("aux_steps_k") + "_" + c.text("conditioning");
}
inline std::string barebone_tag(const Config& c) { return "barebone_h" + c.raw("horizon"); }

}  // namespace detail

inline std::vector<Variant> experiment_variants(const std::string& name, const Config& base) {
    using detail::with;
    using K = Variant::Kind;
    if (name == "pipeline") return {{"main", base}};
    if (name == "cold-vs-naive") {
        return {{"cold", with(base, {{"sampler", "cold"}})}, {"naive", with(base, {{"sampler", "naive"}})}};
    }
    if (name == "no-dropout") {
        return {{"dropout", with(base, {{"interpolator_inference_dropout", "true"}})},
                {"no-dropout", with(base, {{"interpolator_inference_dropout", "false"}})}};
    }
    if (name == "refinement-on-off") {
        return {{"refine-off", with(base, {{"refine", "off"}})},
                {"refine-on", with(base, {{"refine", "on"}})},
                {"refine-fill", with(base, {{"refine", "fill"}})}};
    }
    if (name == "conditioning-sweep") {
        std::vector<Variant> v;
        for (const char* m : {"none", "clean", "noised"}) v.push_back({m, with(base, {{"conditioning", m}})});
        return v;
    }
    if (name == "horizon-sweep") {
        std::vector<Variant> v;
        for (const char* h : {"8", "16", "32"}) {
            v.push_back({std::string("h") + h, with(base, {{"horizon", h}, {"inference_keep_indices", ""}})});
        }
        return v;
    }
    if (name == "aux-steps-sweep") {
        std::vector<Variant> v;
        for (const char* k : {"0", "10", "25", "40", "45"}) {
            v.push_back({std::string("k") + k, with(base, {{"aux_steps_k", k}, {"inference_keep_indices", ""}})});
        }
        return v;
    }
    if (name == "accel-sweep") {
        const std::size_t h = base.size("horizon");
        const std::size_t k = base.size("aux_steps_k") > 0 ? base.size("aux_steps_k") : 8;
        std::vector<std::size_t> kept{k, (3 * k) / 4, k / 2, k / 4, 0};
        kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
        std::vector<Variant> v;
        for (std::size_t a : kept) {
            v.push_back({"aux" + std::to_string(a), with(base, {{"aux_steps_k", std::to_string(k)},
                                                                {"inference_keep_indices", detail::keep_aux(h, k, a)}})});
        }
        return v;
    }
    if (name == "step-vs-crps") return {{"cold", with(base, {{"sampler", "cold"}}), K::diffusion, true}};
    if (name == "baselines") {
        return {{"dyffusion", base}, {"mc-dropout", base, K::mc_dropout}, {"perturbation", base, K::perturbation}};
    }
    if (name == "ode-order") return {};
    throw ConfigError("unknown experiment '" + name + "'");
}

namespace detail {

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw FormatError("cannot write " + p.string());
    out << s;
}

template <class Writer>
void write_csv(const fs::path& p, Writer w) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw FormatError("cannot write " + p.string());
    w(out);
}

inline void check_stages(const std::vector<std::string>& stages) {
    std::size_t last = 0;
    for (const auto& s : stages) {
        const auto it = std::find(all_stages().begin(), all_stages().end(), s);
        if (it == all_stages().end()) throw ConfigError("unknown stage '" + s + "'");
        const auto pos = static_cast<std::size_t>(it - all_stages().begin()) + 1;
        if (pos <= last) throw ConfigError("stages must be distinct and in order gen-data, train, sample, evaluate");
        last = pos;
    }
}

inline json report_json(const MetricsReport& r) {
    json j{{"mean_crps", r.mean_crps}, {"mean_mse", r.mean_mse}, {"members", r.members}, {"cases", r.cases}};
    j["mean_ssr"] = r.mean_ssr ? json(*r.mean_ssr) : json(nullptr);
    j["flags"] = {{"refined", r.refined},
                  {"accelerated", r.accelerated},
                  {"outside_training_regime", r.outside_training_regime}};
    return j;
}

inline json history_json(const std::vector<LossRecord>& h) {
    const LossDrop d = loss_drop(h);
    return {{"epochs", h.back().epoch},
            {"val_loss_epoch0", d.initial},
            {"val_loss_best", d.best},
            {"best_epoch", d.best_epoch},
            {"ratio", d.ratio()}};
}

/// One seed's run directory.
class Run {
public:
    Run(const ExperimentSpec& spec, Config base, fs::path dir)
        : spec_(spec), base_(std::move(base)), dir_(std::move(dir)),
          variants_(experiment_variants(spec.name, base_)) {}

    json execute(json& timing) {
        json summary{{"seed", base_.integer("seed")}, {"directory", dir_.filename().string()}};
        fs::create_directories(dir_);
        write_text(dir_ / "config.cfg", base_.serialize());
        write_text(dir_ / "manifest.txt", "dyffuse " + std::string(kVersion) + "\nexperiment = " + spec_.name +
                                              "\nseed = " + base_.raw("seed") + "\n");
        if (spec_.name == "ode-order") {
            summary["ode_order"] = ode_order();
            return summary;
        }
        for (const auto& stage : spec_.stages) {
            const auto t0 = std::chrono::steady_clock::now();
            if (stage == "gen-data") gen_data();
            if (stage == "train") summary["training"] = train();
            if (stage == "sample") sample_all();
            if (stage == "evaluate") summary["variants"] = evaluate_all();
            timing[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        return summary;
    }

private:
    fs::path data_dir() const { return dir_ / "data"; }
    fs::path model_path(const std::string& tag) const { return dir_ / "models" / (tag + ".dyfp"); }
    fs::path forecast_path(const std::string& variant, std::size_t k) const {
        return numbered(dir_ / "forecasts" / variant, "case", k, ".dyft");
    }

    json ode_order() {
        const auto r = measure_error_order(spec_.ode);
        write_csv(dir_ / "ode_order.csv", [&](std::ostream& o) { write_error_csv(o, r); });
        auto fit = [](const std::optional<LogLogFit>& f) {
            return f ? json{{"slope", f->slope}, {"ci_low", f->ci_low}, {"ci_high", f->ci_high}} : json(nullptr);
        };
        return {{"cold", fit(r.cold_fit)},
                {"naive", fit(r.naive_fit)},
                {"naive_error_at_smallest_step", r.naive_error.back()},
                {"cold_error_at_smallest_step", r.cold_error.back()}};
    }

    void gen_data() { save_dataset(data_dir(), generate_dataset(base_)); }

    const Dataset& data() {
        if (!data_) data_ = load_dataset(data_dir());
        return *data_;
    }

    InterpolatorModel interpolator(const Config& c) {
        auto m = load_interpolator(model_path(interpolator_tag(c)));
        m.freeze(true);
        return m;
    }

    json train() {
        json out = json::object();
        std::set<std::string> done;
        auto once = [&](const std::string& tag, auto fit, ModelMeta extra = {}) {
            if (!done.insert(tag).second) return;
            auto r = fit();
            save_model(model_path(tag), r.model, std::move(extra));
            save_history_csv(dir_ / "models" / (tag + ".history.csv"), r.history);
            out[tag] = history_json(r.history);
        };
        for (const auto& v : variants_) {
            if (v.kind != Variant::Kind::diffusion) {
                once(barebone_tag(v.config), [&] { return fit_barebone(v.config, data()); });
                continue;
            }
            once(interpolator_tag(v.config), [&] { return fit_interpolator(v.config, data()); });
            once(forecaster_tag(v.config), [&] { return fit_forecaster(v.config, data(), interpolator(v.config)); },
                 {{"aux_steps", v.config.raw("aux_steps_k")}});
        }
        return out;
    }

    void sample_all() {
        for (const auto& v : variants_) {
            const auto cases = eval_cases(v.config, data());
            SamplingPlan plan = sampling_plan_from(v.config);
            plan.keep_step_forecasts = v.step_curve;
            std::vector<EnsembleForecast> fc;
            if (v.kind == Variant::Kind::diffusion) {
                const auto f = load_forecaster(model_path(forecaster_tag(v.config)));
                fc = forecast_cases(f, interpolator(v.config), data(), cases, plan);
            } else {
                const auto b = load_barebone(model_path(barebone_tag(v.config)));
                fc = baseline_cases(b, v.kind == Variant::Kind::mc_dropout ? BaselineKind::dropout
                                                                           : BaselineKind::perturbation,
                                    v.config.real("perturbation_sigma"), data(), cases, plan);
            }
            fs::create_directories(dir_ / "forecasts" / v.name);
            for (std::size_t k = 0; k < cases.size(); ++k) {
                save_forecast(forecast_path(v.name, k), fc[k], data().test.at(cases[k].trajectory),
                              {{"variant", v.name},
                               {"initial_condition", {{"split", "test"},
                                                      {"trajectory", cases[k].trajectory},
                                                      {"start", cases[k].start}}}});
            }
        }
    }

    json evaluate_all() {
        json out = json::object();
        for (const auto& v : variants_) {
            const auto cases = eval_cases(v.config, data());
            std::vector<EnsembleForecast> fc;
            for (std::size_t k = 0; k < cases.size(); ++k) fc.push_back(load_forecast(forecast_path(v.name, k)).forecast);
            const MetricsReport r = score_cases(fc, data(), cases);
            write_csv(dir_ / "metrics" / (v.name + ".csv"), [&](std::ostream& o) { write_metrics_csv(o, r); });
            json j = report_json(r);
            const auto& p = fc.at(0).passes;
            j["passes_per_member"] = {{"forecaster", p.forecaster},
                                      {"interpolator", p.interpolator},
                                      {"refinement", p.refinement},
                                      {"total", p.total()}};
            j["schedule"] = fc.at(0).schedule.str();
            double seconds = 0.0;
            for (const auto& f : fc) seconds += f.seconds;
            j["sampling_seconds"] = seconds;
            if (v.step_curve) {
                const StepCurve s = step_curve(fc, data(), cases);
                write_csv(dir_ / "metrics" / (v.name + ".steps.csv"), [&](std::ostream& o) { write_step_curve_csv(o, s); });
                if (s.trend) j["step_trend"] = {{"spearman", s.trend->rho}, {"p_negative", s.trend->p_negative}};
            }
            out[v.name] = j;
        }
        return out;
    }

    const ExperimentSpec& spec_;
    Config base_;
    fs::path dir_;
    std::vector<Variant> variants_;
    std::optional<Dataset> data_;
};

}  // namespace detail

struct ExperimentOutcome {
    json summary;
    fs::path directory;
};

/// Runs `spec` into spec.out/seed_<s>/ for every seed and writes
/// spec.out/summary.json. Wall-clock values live under "timing" and are the
/// only run-to-run differences. A failing stage is recorded in the summary
/// and rethrown.
inline ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
    const auto names = list_builtin_experiments();
    if (std::find(names.begin(), names.end(), spec.name) == names.end()) {
        throw ConfigError("unknown experiment '" + spec.name + "'");
    }
    detail::check_stages(spec.stages);
    std::vector<std::uint64_t> seeds = spec.seeds;
    if (seeds.empty()) seeds.push_back(spec.config.integer("seed"));

    json summary{{"experiment", spec.name}, {"version", kVersion}, {"stages", spec.stages}, {"seeds", seeds}};
    json timing{{"started", detail::utc_now()}};
    summary["runs"] = json::array();
    fs::create_directories(spec.out);
    const auto t0 = std::chrono::steady_clock::now();
    auto finish = [&](const char* status) {
        summary["status"] = status;
        timing["finished"] = detail::utc_now();
        timing["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        summary["timing"] = timing;
        detail::write_text(spec.out / "summary.json", summary.dump(2) + "\n");
    };
    if (spec.stages.empty()) {
        finish("ok");
        return {summary, spec.out};
    }
    try {
        for (std::uint64_t s : seeds) {
            Config c = spec.config;
            c.set("seed", std::to_string(s));
            detail::Run run(spec, c, spec.out / ("seed_" + std::to_string(s)));
            json t = json::object();
            summary["runs"].push_back(run.execute(t));
            timing["seed_" + std::to_string(s)] = t;
        }
    } catch (const std::exception& e) {
        summary["error"] = e.what();
        finish("failed");
        throw;
    }
    finish("ok");
    return {summary, spec.out};
}

}  // namespace dyffuse
