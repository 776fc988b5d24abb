// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"
#include "support.hpp"

#include <sstream>

using namespace dyffuse;
using namespace dyffuse::testing;

namespace {

Tensor members(std::vector<double> v) {
    const std::size_t m = v.size();
    return Tensor(Shape{m, 1}, std::move(v));
}

Tensor one(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

/// The double-sum definition, element by element.
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

EnsembleForecast forecast_of(const std::vector<Tensor>& per_time) {
    EnsembleForecast f;
    const std::size_t m = per_time[0].dim(0);
    f.members.assign(m, {});
    for (std::size_t t = 0; t < per_time.size(); ++t) {
        f.times.push_back(double(t + 1));
        for (std::size_t i = 0; i < m; ++i) f.members[i].push_back(slice_leading(per_time[t], i));
    }
    return f;
}

}  // namespace

TEST_CASE("CRPS examples", "[metrics]") {
    CHECK(crps(members({2}), one(5)) == 3.0);
    CHECK(crps(members({1, 3}), one(2)) == 0.5);
    CHECK(crps(members({2, 2, 2}), one(2)) == 0.0);
    CHECK_THROWS_AS(crps(Tensor(Shape{0, 1}), one(1)), DomainError);
    CHECK_THROWS_AS(crps(members({1, 2}), Tensor(Shape{2})), ShapeError);
}

TEST_CASE("CRPS matches the double sum on random ensembles", "[metrics]") {
    Rng rng(21);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto m = static_cast<std::size_t>(rng.uniform_int(1, 12));
        const auto e = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const Tensor ens = standard_normal({m, e}, rng), truth = standard_normal({e}, rng);
        worst = std::max(worst, std::abs(crps(ens, truth) - crps_brute(ens, truth)));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("CRPS properties", "[metrics]") {
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor ens = standard_normal({7, 5}, rng), truth = standard_normal({5}, rng);
        const double base = crps(ens, truth);
        CHECK(base >= 0.0);

        // Shifts by a power of two are exact in binary floating point.
        const double c = 4.0;
        CHECK(crps(add_scalar(ens, c), add_scalar(truth, c)) == Catch::Approx(base).margin(1e-12));
        const double a = 0.1 + 3.0 * rng.uniform();
        CHECK(std::abs(crps(a * ens, a * truth) - a * base) <= 1e-12);

        // One member: the mean absolute error, exactly.
        const Tensor single = standard_normal({1, 5}, rng);
        double mae = 0.0;
        for (std::size_t k = 0; k < 5; ++k) mae += std::abs(single[k] - truth[k]);
        CHECK(crps(single, truth) == mae / 5.0);
    }
}

TEST_CASE("fair CRPS estimator", "[metrics]") {
    // {1, 3} vs 2: term1 = 1, pair sum 4, fair weight 1/4.
    CHECK(crps(members({1, 3}), one(2), CrpsEstimator::fair) == 0.0);
    CHECK_THROWS_AS(crps(members({1}), one(2), CrpsEstimator::fair), DomainError);
}

TEST_CASE("MSE of the ensemble mean", "[metrics]") {
    CHECK(mse_ensemble_mean(members({1, 3}), one(1)) == 1.0);
    CHECK(mse_ensemble_mean(members({1, 3}), one(2)) == 0.0);
    Rng rng(23);
    const Tensor ens = standard_normal({5, 9}, rng), truth = standard_normal({9}, rng);
    double s = 0.0;
    for (std::size_t k = 0; k < 9; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 5; ++i) mean += ens[i * 9 + k];
        mean /= 5.0;
        s += (mean - truth[k]) * (mean - truth[k]);
    }
    CHECK(std::abs(mse_ensemble_mean(ens, truth) - s / 9.0) <= 1e-12);
}

TEST_CASE("SSR examples", "[metrics]") {
    CHECK(std::abs(ssr(members({1, 3}), one(1)) - std::sqrt(2.0)) <= 1e-9);
    CHECK(std::abs(ssr(members({0, 2}), one(3)) - std::sqrt(2.0) / 2.0) <= 1e-9);
    CHECK(ssr(members({0.3, 0.3, 0.3}), one(1)) == 0.0);
    CHECK(std::isinf(ssr(members({1, 3}), one(2))));
    CHECK_THROWS_AS(ssr(members({1}), one(2)), DomainError);
}

TEST_CASE("SSR is near 1 for a calibrated Gaussian ensemble", "[metrics]") {
    Rng rng(24);
    const std::size_t e = 100000;
    const Tensor truth = standard_normal({e}, rng);
    const Tensor ens = standard_normal({50, e}, rng);
    const double r = ssr(ens, truth);
    CHECK(r >= 0.95);
    CHECK(r <= 1.05);
}

TEST_CASE("evaluate composes the scalar scores", "[metrics]") {
    Rng rng(25);
    std::vector<Tensor> per_time, truth;
    for (int t = 0; t < 4; ++t) {
        per_time.push_back(standard_normal({2, 3, 2}, rng));
        truth.push_back(standard_normal({3, 2}, rng));
    }
    const auto f = forecast_of(per_time);
    const MetricsReport r = evaluate(f, std::span<const Tensor>(truth));
    REQUIRE(r.crps.size() == 4);
    double sum = 0.0;
    for (std::size_t t = 0; t < 4; ++t) {
        CHECK(r.crps[t] == crps(per_time[t], truth[t]));
        CHECK(r.mse[t] == mse_ensemble_mean(per_time[t], truth[t]));
        CHECK(r.ssr[t] == ssr(per_time[t], truth[t]));
        sum += r.crps[t];
    }
    CHECK(std::abs(r.mean_crps - sum / 4.0) <= 1e-12);
    CHECK(r.members == 2);
    CHECK(r.elements == 6);

    // Pooling a report with itself changes nothing.
    const std::vector<MetricsReport> twice{r, r};
    const MetricsReport p = pool_reports(twice);
    CHECK(p.cases == 2);
    for (std::size_t t = 0; t < 4; ++t) {
        CHECK(p.crps[t] == Catch::Approx(r.crps[t]).epsilon(1e-14));
        CHECK(p.ssr[t] == Catch::Approx(r.ssr[t]).epsilon(1e-14));
    }

    std::ostringstream csv;
    write_metrics_csv(csv, r);
    CHECK(csv.str().rfind("timestep,crps,mse,ssr\n1,", 0) == 0);
    CHECK(csv.str().find("\nmean,") != std::string::npos);

    const std::vector<Tensor> short_truth(truth.begin(), truth.begin() + 3);
    CHECK_THROWS_AS(evaluate(f, std::span<const Tensor>(short_truth)), ShapeError);
}

TEST_CASE("evaluate against a trajectory", "[metrics]") {
    const Trajectory traj = toy_trajectory(6, 2, [](std::size_t t, std::size_t k) { return double(t + k); });
    EnsembleForecast f;
    f.times = {1, 2};
    f.members = {{traj.snapshot(2), traj.snapshot(3)}};
    const auto r = evaluate(f, traj, 1);
    CHECK(r.mean_crps == 0.0);
    CHECK(r.mean_mse == 0.0);
    CHECK_FALSE(r.mean_ssr.has_value());

    f.times = {1.5, 2};
    try {
        (void)evaluate(f, traj, 1);
        FAIL("expected a domain error");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("1.5") != std::string::npos);
    }
    f.times = {1, 5};
    CHECK_THROWS_AS(evaluate(f, traj, 1), DomainError);
}

TEST_CASE("Spearman rank correlation", "[metrics]") {
    const auto down = spearman({1, 2, 3, 4, 5, 6}, {6, 5, 4, 3, 2, 1});
    CHECK(down.rho == Catch::Approx(-1.0));
    CHECK(down.exact);
    CHECK(down.p_negative == Catch::Approx(1.0 / 720.0));

    const auto up = spearman({1, 2, 3, 4}, {1, 2, 3, 4});
    CHECK(up.rho == Catch::Approx(1.0));
    CHECK(up.p_negative == Catch::Approx(1.0));

    // Ties share average ranks.
    CHECK(average_ranks({3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});

    std::vector<double> x, y;
    for (int k = 0; k < 30; ++k) {
        x.push_back(k);
        y.push_back(-k + (k % 3));
    }
    const auto big = spearman(x, y);
    CHECK_FALSE(big.exact);
    CHECK(big.rho < -0.9);
    CHECK(big.p_negative < 1e-6);
    CHECK_THROWS_AS(spearman({1, 2}, {1, 2}), DomainError);
    CHECK_THROWS_AS(spearman({1, 2, 3}, {1, 2}), ShapeError);
}
