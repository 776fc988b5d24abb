// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"
#include "support.hpp"

using namespace dyffuse;
using namespace dyffuse::testing;

TEST_CASE("builtin experiment list", "[experiment]") {
    const auto names = list_builtin_experiments();
    for (const char* n : {"pipeline", "ode-order", "cold-vs-naive", "no-dropout", "refinement-on-off",
                          "conditioning-sweep", "horizon-sweep", "aux-steps-sweep", "accel-sweep", "step-vs-crps",
                          "baselines"}) {
        CHECK(std::find(names.begin(), names.end(), n) != names.end());
    }
    for (const auto& n : names) CHECK_NOTHROW(experiment_variants(n, Config()));
    CHECK_THROWS_AS(experiment_variants("warp-drive", Config()), ConfigError);
}

TEST_CASE("accelerated variants keep evenly spread auxiliary steps", "[experiment]") {
    Config c;
    c.set("aux_steps_k", "8");
    const auto v = experiment_variants("accel-sweep", c);
    REQUIRE(v.size() == 5);
    CHECK(inference_schedule_from(v.front().config).size() == 16);
    CHECK(inference_schedule_from(v.back().config).steps() == std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7});
    for (const auto& var : v) CHECK_NOTHROW(inference_schedule_from(var.config));
}

TEST_CASE("experiment argument errors", "[experiment]") {
    TempDir dir("exp_err");
    ExperimentSpec spec;
    spec.config = tiny_config();
    spec.out = dir.path();

    SECTION("empty stage list writes only the summary") {
        spec.stages = {};
        const auto r = run_experiment(spec);
        CHECK(r.summary.at("status") == "ok");
        CHECK(std::filesystem::exists(dir.path() / "summary.json"));
        CHECK_FALSE(std::filesystem::exists(dir.path() / "seed_0"));
    }
    SECTION("unknown experiment") {
        spec.name = "nope";
        CHECK_THROWS_AS(run_experiment(spec), ConfigError);
    }
    SECTION("stages out of order") {
        spec.stages = {"train", "gen-data"};
        CHECK_THROWS_AS(run_experiment(spec), ConfigError);
        spec.stages = {"fly"};
        CHECK_THROWS_AS(run_experiment(spec), ConfigError);
    }
    SECTION("missing inputs name the file and mark the summary") {
        spec.stages = {"train"};
        try {
            (void)run_experiment(spec);
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("data") != std::string::npos);
        }
        CHECK(slurp(dir.path() / "summary.json").find("\"failed\"") != std::string::npos);
    }
}

TEST_CASE("tiny pipeline reruns are byte identical", "[experiment]") {
    TempDir a("exp_a"), b("exp_b");
    ExperimentSpec spec;
    spec.name = "step-vs-crps";
    spec.config = tiny_config();
    spec.out = a.path();
    const auto first = run_experiment(spec);
    spec.out = b.path();
    (void)run_experiment(spec);

    std::size_t compared = 0;
    const auto diff = differing_artifacts(a.path(), b.path(), &compared);
    CHECK(diff.empty());
    for (const auto& f : diff) UNSCOPED_INFO("differs: " << f);
    CHECK(compared >= 10);

    const auto& run = first.summary.at("runs").at(0);
    CHECK(run.at("variants").at("cold").contains("step_trend"));
    CHECK(std::filesystem::exists(a.path() / "seed_0" / "metrics" / "cold.steps.csv"));
    CHECK(std::filesystem::exists(a.path() / "seed_0" / "models" / "forecaster_h4_k0_none.dyfp.meta"));
}

TEST_CASE("separate seeds go to separate run directories", "[experiment]") {
    TempDir dir("exp_seeds");
    ExperimentSpec spec;
    spec.config = tiny_config();
    spec.stages = {"gen-data"};
    spec.seeds = {1, 2};
    spec.out = dir.path();
    (void)run_experiment(spec);
    const auto d1 = slurp(dir.path() / "seed_1" / "data" / "train_000.dyft");
    const auto d2 = slurp(dir.path() / "seed_2" / "data" / "train_000.dyft");
    CHECK_FALSE(d1.empty());
    CHECK(d1 != d2);
}

TEST_CASE("forecast files round trip", "[experiment]") {
    TempDir dir("fc");
    SampleRequest req;
    req.x_t = Tensor(Shape{1, 2}, 0.5);
    req.schedule = make_schedule(3, 1);
    req.members = 3;
    req.seed = 7;
    req.keep_step_forecasts = true;
    const OracleInterpolatorRule lin{OracleSystem::scalar(0.0), 3.0, 0.0};
    auto f = [](const Tensor& x, double s) { return add_scalar(x, 3.0 - s); };
    const auto fc = cold_sample(f, lin, req);
    const Trajectory like = toy_trajectory(4, 2, [](std::size_t t, std::size_t) { return double(t); });
    const auto path = dir.path() / "f.dyft";
    save_forecast(path, fc, like, {{"variant", "x"}});
    const auto back = load_forecast(path);
    CHECK(back.sidecar.at("variant") == "x");
    CHECK(back.forecast.times == fc.times);
    CHECK(back.forecast.seeds == fc.seeds);
    CHECK(back.forecast.schedule == fc.schedule);
    CHECK(back.forecast.passes.total() == fc.passes.total());
    REQUIRE(back.forecast.members.size() == 3);
    REQUIRE(back.forecast.step_forecasts.size() == 3);
    for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t j = 0; j < fc.times.size(); ++j)
            CHECK(detail::max_abs_diff(back.forecast.members[m][j], fc.members[m][j]) < 1e-6);
    CHECK_THROWS_AS(load_forecast(dir.path() / "missing.dyft"), FormatError);
}
