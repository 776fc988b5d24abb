// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// dyffuse command-line driver. Exit status: 0 success, 1 runtime failure,
// 2 bad usage or configuration.

#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "dyffuse/dyffuse.hpp"

using namespace dyffuse;

namespace {

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;

    void attach(CLI::App* app) {
        app->add_option("--config", path, "key = value configuration file");
        app->add_option("--set", sets, "override a config key (key=value), repeatable");
        app->add_option("--seed", seed, "root seed (beats DYFFUSE_SEED and the config)");
        app->add_option("--jobs", jobs, "worker threads for ensemble members");
    }

    Config load() const {
        Config c = path.empty() ? Config() : Config::load(path);
        for (const auto& s : sets) c.apply(s);
        c.apply_environment();
        if (seed) c.set("seed", std::to_string(*seed));
        if (jobs) c.set("jobs", std::to_string(*jobs));
        return c;
    }
};

/// "file.dyft@t" -> (file, t); t defaults to 0.
std::pair<std::string, std::size_t> parse_init(const std::string& s) {
    const auto at = s.rfind('@');
    if (at == std::string::npos) return {s, 0};
    try {
        std::size_t pos = 0;
        const std::string idx = s.substr(at + 1);
        const auto t = std::stoul(idx, &pos);
        if (pos != idx.size()) throw std::invalid_argument(idx);
        return {s.substr(0, at), t};
    } catch (const std::logic_error&) {
        throw ConfigError("--init expects path@index, got '" + s + "'");
    }
}

std::vector<std::size_t> parse_indices(const std::string& s) {
    Config c;
    c.set("inference_keep_indices", s);
    return c.indices("inference_keep_indices");
}

Dataset dataset_for(const Config& c, const std::string& dir) {
    return dir.empty() ? generate_dataset(c) : load_dataset(dir);
}

template <class Model>
void save_trained(const std::string& out, const TrainResult<Model>& r, const std::string& history,
                  ModelMeta extra = {}) {
    save_model(out, r.model, std::move(extra));
    save_history_csv(history.empty() ? out + ".history.csv" : history, r.history);
    const LossDrop d = loss_drop(r.history);
    std::cout << "validation loss " << d.initial << " -> " << d.best << " (epoch " << d.best_epoch << ", ratio "
              << d.ratio() << ")\nwrote " << out << '\n';
}

void print_report(const MetricsReport& r) {
    std::cout << "members " << r.members << "  mean CRPS " << r.mean_crps << "  mean MSE " << r.mean_mse;
    if (r.mean_ssr) std::cout << "  mean SSR " << *r.mean_ssr;
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dyffuse: dynamics-informed diffusion forecasting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "simulate spring-mesh trajectories");
    ConfigArgs gen_cfg;
    gen_cfg.attach(gen);
    std::string gen_system = "spring-mesh", gen_out;
    std::optional<std::size_t> gen_rows, gen_cols, gen_steps, gen_stride;
    gen->add_option("--system", gen_system, "dynamical system")->check(CLI::IsMember({"spring-mesh"}));
    gen->add_option("--rows", gen_rows);
    gen->add_option("--cols", gen_cols);
    gen->add_option("--steps", gen_steps, "integrator steps per trajectory");
    gen->add_option("--stride", gen_stride, "integrator steps between snapshots");
    gen->add_option("--out", gen_out, "dataset directory, or a single .dyft trajectory")->required();

    // train-interpolator / train-forecaster / train-barebone
    auto* ti = app.add_subcommand("train-interpolator", "Stage 1: fit the stochastic interpolator");
    auto* tf = app.add_subcommand("train-forecaster", "Stage 2: fit the forecaster against a frozen interpolator");
    auto* tb = app.add_subcommand("train-barebone", "fit the multi-step barebone baseline");
    ConfigArgs train_cfg;
    std::string data_dir, train_out, history_out, interp_ckpt;
    for (auto* s : {ti, tf, tb}) {
        train_cfg.attach(s);
        s->add_option("--data", data_dir, "dataset directory (default: simulate from the config)");
        s->add_option("--out", train_out, "checkpoint path (.dyfp)")->required();
        s->add_option("--history", history_out, "loss history CSV (default: <out>.history.csv)");
    }
    tf->add_option("--interpolator", interp_ckpt, "frozen Stage 1 checkpoint")->required();

    // sample
    auto* sm = app.add_subcommand("sample", "draw an ensemble forecast");
    std::string sm_f, sm_i, sm_init, sm_out, sm_refine = "off", sm_keep, sm_sampler = "cold";
    std::size_t sm_members = 20, sm_jobs = 1, sm_rollout = 0;
    std::uint64_t sm_seed = 0;
    bool sm_nodrop = false, sm_steps = false;
    sm->add_option("--forecaster", sm_f)->required();
    sm->add_option("--interpolator", sm_i)->required();
    sm->add_option("--init", sm_init, "initial condition as trajectory.dyft@index")->required();
    sm->add_option("--members", sm_members);
    sm->add_option("--seed", sm_seed);
    sm->add_option("--refine", sm_refine)->check(CLI::IsMember({"on", "off", "fill", "overwrite"}));
    sm->add_option("--keep-indices", sm_keep, "schedule indices kept, e.g. 0,3,5");
    sm->add_option("--sampler", sm_sampler)->check(CLI::IsMember({"cold", "naive"}));
    sm->add_option("--rollout", sm_rollout, "autoregressive evaluation horizon H (0: one window)");
    sm->add_option("--jobs", sm_jobs);
    sm->add_flag("--no-dropout", sm_nodrop, "disable interpolator dropout");
    sm->add_flag("--keep-steps", sm_steps, "also store every intermediate x_h estimate");
    sm->add_option("--out", sm_out)->required();

    // baseline
    auto* bl = app.add_subcommand("baseline", "ensemble from a barebone model");
    std::string bl_kind, bl_model, bl_init, bl_out;
    std::size_t bl_members = 20, bl_jobs = 1;
    double bl_sigma = 0.05;
    std::uint64_t bl_seed = 0;
    bl->add_option("kind", bl_kind)->required()->check(CLI::IsMember({"dropout", "perturb"}));
    bl->add_option("--model", bl_model)->required();
    bl->add_option("--init", bl_init, "initial condition as trajectory.dyft@index")->required();
    bl->add_option("--members", bl_members);
    bl->add_option("--sigma", bl_sigma, "perturbation scale");
    bl->add_option("--seed", bl_seed);
    bl->add_option("--jobs", bl_jobs);
    bl->add_option("--out", bl_out)->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a forecast file against a trajectory");
    std::string ev_f, ev_t, ev_out;
    std::optional<std::size_t> ev_start;
    bool ev_fair = false;
    ev->add_option("--forecast", ev_f)->required();
    ev->add_option("--truth", ev_t)->required();
    ev->add_option("--start", ev_start, "index of x_t in the truth (default: from the forecast sidecar)");
    ev->add_flag("--fair", ev_fair, "fair CRPS estimator instead of the textbook one");
    ev->add_option("--out", ev_out, "report CSV")->required();

    // experiment
    auto* ex = app.add_subcommand("experiment", "run a built-in experiment");
    ConfigArgs ex_cfg;
    ex_cfg.attach(ex);
    std::string ex_name, ex_out = "runs", ex_stages, ex_system = "exp";
    std::vector<std::uint64_t> ex_seeds;
    std::optional<double> ex_eps, ex_bias;
    ex->add_option("name", ex_name)->required()->check(CLI::IsMember(list_builtin_experiments()));
    ex->add_option("--out", ex_out, "run directory (ode-order: a .csv path is also accepted)");
    ex->add_option("--stages", ex_stages, "comma-separated subset of gen-data,train,sample,evaluate");
    ex->add_option("--seeds", ex_seeds, "root seeds, one run directory each")->delimiter(',');
    ex->add_option("--system", ex_system, "ode-order oracle")->check(CLI::IsMember({"exp", "harmonic"}));
    ex->add_option("--eps", ex_eps, "ode-order forecaster perturbation");
    ex->add_option("--bias", ex_bias, "ode-order interpolator bias");

    auto* ls = app.add_subcommand("list-experiments", "print the built-in experiment names");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*gen) {
            Config c = gen_cfg.load();
            if (gen_rows) c.set("rows", std::to_string(*gen_rows));
            if (gen_cols) c.set("cols", std::to_string(*gen_cols));
            if (gen_steps) c.set("steps", std::to_string(*gen_steps));
            if (gen_stride) c.set("stride", std::to_string(*gen_stride));
            c.set("system", gen_system);
            if (fs::path(gen_out).extension() == ".dyft") {
                const SpringMeshSystem sys = mesh_from(c);
                Rng rng = Rng::substream(c.integer("seed"), "trajectory", 0);
                const MeshState init =
                    random_initial_state(sys, rng, c.real("position_sigma"), c.real("momentum_sigma"));
                save_trajectory(gen_out, simulate_spring_mesh(sys, init, c.size("steps"), c.size("stride")));
            } else {
                save_dataset(gen_out, generate_dataset(c));
                detail::write_text(fs::path(gen_out) / "config.cfg", c.serialize());
            }
            std::cout << "wrote " << gen_out << '\n';
        } else if (*ti) {
            const Config c = train_cfg.load();
            save_trained(train_out, fit_interpolator(c, dataset_for(c, data_dir)), history_out);
        } else if (*tf) {
            const Config c = train_cfg.load();
            InterpolatorModel I = load_interpolator(interp_ckpt);
            I.freeze(true);
            save_trained(train_out, fit_forecaster(c, dataset_for(c, data_dir), I), history_out,
                         {{"aux_steps", c.raw("aux_steps_k")}});
        } else if (*tb) {
            const Config c = train_cfg.load();
            save_trained(train_out, fit_barebone(c, dataset_for(c, data_dir)), history_out);
        } else if (*sm) {
            const auto f = load_forecaster(sm_f);
            auto I = load_interpolator(sm_i);
            I.freeze(!sm_nodrop);
            const auto [traj_path, t] = parse_init(sm_init);
            const Trajectory traj = load_trajectory(traj_path);
            if (t >= traj.length()) throw DomainError("--init index beyond the trajectory");
            SampleRequest req;
            req.x_t = traj.snapshot(t);
            const ModelMeta meta = read_meta(meta_path(sm_f));
            const auto aux = meta.find("aux_steps");
            const Schedule full = make_schedule(f.horizon(), aux == meta.end() ? 0 : std::stoul(aux->second));
            req.schedule = sm_keep.empty() ? full : subset_schedule(full, parse_indices(sm_keep));
            req.refine = parse_refinement(sm_refine);
            req.members = sm_members;
            req.seed = sm_seed;
            req.jobs = sm_jobs;
            req.keep_step_forecasts = sm_steps;
            const Sampler smp = parse_sampler(sm_sampler);
            const EnsembleForecast fc = sm_rollout > 0
                ? autoregressive_rollout(NeuralForecaster{&f}, NeuralInterpolator{&I}, req, sm_rollout, smp)
                : sample(NeuralForecaster{&f}, NeuralInterpolator{&I}, req, smp);
            save_forecast(sm_out, fc, traj,
                          {{"initial_condition", {{"file", traj_path}, {"start", t}}},
                           {"refine", to_string(req.refine)}});
            std::cout << "wrote " << sm_out << " (" << fc.size() << " members, " << fc.times.size()
                      << " outputs, " << fc.passes.total() << " passes per member)\n";
        } else if (*bl) {
            const auto model = load_barebone(bl_model);
            const auto [traj_path, t] = parse_init(bl_init);
            const Trajectory traj = load_trajectory(traj_path);
            if (t >= traj.length()) throw DomainError("--init index beyond the trajectory");
            BaselineRequest req{traj.snapshot(t), {}, bl_members, bl_seed, bl_jobs};
            const EnsembleForecast fc =
                bl_kind == "dropout" ? dropout_ensemble(model, req) : perturbation_ensemble(model, req, bl_sigma);
            save_forecast(bl_out, fc, traj,
                          {{"initial_condition", {{"file", traj_path}, {"start", t}}}, {"baseline", bl_kind}});
            std::cout << "wrote " << bl_out << '\n';
        } else if (*ev) {
            const LoadedForecast lf = load_forecast(ev_f);
            std::size_t start = 0;
            if (ev_start) {
                start = *ev_start;
            } else if (lf.sidecar.contains("initial_condition")) {
                start = lf.sidecar["initial_condition"].at("start").get<std::size_t>();
            }
            const MetricsReport r = evaluate(lf.forecast, load_trajectory(ev_t), start,
                                             ev_fair ? CrpsEstimator::fair : CrpsEstimator::textbook);
            detail::write_csv(ev_out, [&](std::ostream& o) { write_metrics_csv(o, r); });
            json j = detail::report_json(r);
            j["seconds"] = r.seconds;
            j["estimator"] = ev_fair ? "fair" : "textbook";
            detail::write_text(sidecar_path(ev_out), j.dump(2) + "\n");
            print_report(r);
        } else if (*ex) {
            ExperimentSpec spec;
            spec.name = ex_name;
            spec.config = ex_cfg.load();
            spec.seeds = ex_seeds;
            if (!ex_stages.empty()) {
                spec.stages.clear();
                std::stringstream ss(ex_stages);
                for (std::string s; std::getline(ss, s, ',');) spec.stages.push_back(detail::trim(s));
            }
            if (ex_system == "harmonic") {
                spec.ode.system = OracleSystem::harmonic(1.0);
                spec.ode.x0 = Tensor::vector({1.0, 0.0});
            }
            if (ex_eps) spec.ode.eps = *ex_eps;
            if (ex_bias) spec.ode.bias = *ex_bias;
            if (ex_name == "ode-order" && fs::path(ex_out).extension() == ".csv") {
                const auto r = measure_error_order(spec.ode);
                detail::write_csv(ex_out, [&](std::ostream& o) { write_error_csv(o, r); });
                if (r.cold_fit) std::cout << "cold slope " << r.cold_fit->slope << '\n';
                if (r.naive_fit) std::cout << "naive slope " << r.naive_fit->slope << '\n';
                std::cout << "naive error at smallest step " << r.naive_error.back() << '\n';
                return 0;
            }
            spec.out = ex_out;
            const auto outcome = run_experiment(spec);
            std::cout << outcome.summary.dump(2) << '\n';
        } else if (*ls) {
            for (const auto& n : list_builtin_experiments()) std::cout << n << '\n';
        }
    } catch (const ConfigError& e) {
        std::cerr << "dyffuse: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "dyffuse: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
