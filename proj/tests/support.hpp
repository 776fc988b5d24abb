// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests and the acceptance binary.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dyffuse/dyffuse.hpp"

namespace dyffuse::testing {

/// |fd - g| <= rel * (|fd| + |g|) + abs.
inline bool grad_close(double fd, double g, double rel = 1e-4, double abs = 1e-8) {
    return std::abs(fd - g) <= rel * (std::abs(fd) + std::abs(g)) + abs;
}

struct GradCheck {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst = 0.0;
    std::string worst_at;
    bool ok() const { return failed == 0 && checked > 0; }
};

/// Central differences (step `eps`) against reverse mode for a scalar
/// function of several input tensors. `build` must construct the loss from
/// the given input Vars on the given tape.
inline GradCheck check_input_grads(std::vector<Tensor> inputs,
                                   const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                                   double eps = 1e-5, double rel = 1e-4) {
    auto eval = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(tape.input(x));
        return tape.value(build(tape, vs)).item();
    };
    Tape tape;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(tape.input(x));
    Var loss = build(tape, vs);
    tape.backward(loss);
    GradCheck out;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const Tensor g = tape.grad(vs[a]);
        for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
            const double v = inputs[a][i];
            inputs[a][i] = v + eps;
            const double up = eval(inputs);
            inputs[a][i] = v - eps;
            const double down = eval(inputs);
            inputs[a][i] = v;
            const double fd = (up - down) / (2.0 * eps);
            ++out.checked;
            const double err = std::abs(fd - g[i]) / (std::abs(fd) + std::abs(g[i]) + 1e-12);
            if (!grad_close(fd, g[i], rel)) ++out.failed;
            if (err > out.worst && !grad_close(fd, g[i], rel)) {
                out.worst = err;
                out.worst_at = "input " + std::to_string(a) + "[" + std::to_string(i) + "]";
            }
        }
    }
    return out;
}

/// Same check against model parameters; `loss` must rebuild the full graph.
inline GradCheck check_param_grads(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& build,
                                   double eps = 1e-5, double rel = 1e-4) {
    auto eval = [&] {
        Tape tape;
        return tape.value(build(tape)).item();
    };
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(build(tape));
    }
    GradCheck out;
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            const double v = p->value[i];
            p->value[i] = v + eps;
            const double up = eval();
            p->value[i] = v - eps;
            const double down = eval();
            p->value[i] = v;
            const double fd = (up - down) / (2.0 * eps);
            ++out.checked;
            if (!grad_close(fd, p->grad[i], rel)) {
                ++out.failed;
                const double err = std::abs(fd - p->grad[i]) / (std::abs(fd) + std::abs(p->grad[i]) + 1e-12);
                if (err > out.worst) {
                    out.worst = err;
                    out.worst_at = p->name + "[" + std::to_string(i) + "]";
                }
            }
        }
    }
    return out;
}

/// Uniform entries on [lo, hi] kept at least `gap` away from zero, for ops
/// with a kink there (relu, l1).
inline Tensor away_from_zero(const Shape& shape, Rng& rng, double gap = 1e-2, double lo = -2.0, double hi = 2.0) {
    Tensor t(shape);
    for (double& v : t.data()) {
        do {
            v = rng.uniform(lo, hi);
        } while (std::abs(v) < gap);
    }
    return t;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("dyffuse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Normalized trajectory (T, C) of a 1-channel toy series built from `f(t)`.
inline Trajectory toy_trajectory(std::size_t T, std::size_t width, const std::function<double(std::size_t, std::size_t)>& f) {
    Tensor raw(Shape{T, 1, width});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t k = 0; k < width; ++k) raw[t * width + k] = f(t, k);
    return {"toy", raw, 1.0, Normalization::identity(1)};
}

/// One gradient check per supported op on random inputs drawn from `seed`.
/// Inputs that feed relu or the L1 error are kept away from the kink.
struct OpCase {
    std::string name;
    std::function<GradCheck(std::uint64_t)> run;
};

inline std::vector<OpCase> op_cases() {
    using namespace ops;
    auto l2 = [](Tape& t, Var y) {
        // Weighted square keeps every output entry's gradient distinct.
        Tensor w(t.value(y).shape());
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
        return mean_error(t, mul(t, y, t.constant(w)), t.constant(Tensor(t.value(y).shape())), Norm::l2);
    };
    std::vector<OpCase> cases;
    cases.push_back({"affine", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({3, 4}, r), standard_normal({4, 5}, r), standard_normal({5}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, affine(t, v[0], v[1], v[2])); });
    }});
    cases.push_back({"gelu", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({3, 4}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, gelu(t, v[0])); });
    }});
    cases.push_back({"silu", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({3, 4}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, silu(t, v[0])); });
    }});
    cases.push_back({"relu", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({away_from_zero({3, 4}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, relu(t, v[0])); });
    }});
    cases.push_back({"add", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 3}, r), standard_normal({2, 3}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, add(t, v[0], v[1])); });
    }});
    cases.push_back({"sub", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 3}, r), standard_normal({2, 3}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, sub(t, v[0], v[1])); });
    }});
    cases.push_back({"mul", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 3}, r), standard_normal({2, 3}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, mul(t, v[0], v[1])); });
    }});
    cases.push_back({"scale_shift", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads(
            {standard_normal({2, 3}, r), standard_normal({2, 3}, r), standard_normal({2, 3}, r)},
            [&](Tape& t, const std::vector<Var>& v) { return l2(t, scale_shift(t, v[0], v[1], v[2])); });
    }});
    cases.push_back({"concat_cols", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 3}, r), standard_normal({2, 2}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, concat_cols(t, v[0], v[1])); });
    }});
    cases.push_back({"slice_cols", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 5}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return l2(t, slice_cols(t, v[0], 1, 4)); });
    }});
    cases.push_back({"gather_rows", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({4, 3}, r)}, [&](Tape& t, const std::vector<Var>& v) {
            return l2(t, gather_rows(t, v[0], {2, 0, 2}));
        });
    }});
    cases.push_back({"dropout", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({3, 4}, r)}, [&](Tape& t, const std::vector<Var>& v) {
            Rng mask(s + 1);  // same mask for every evaluation
            return l2(t, dropout(t, v[0], DropoutSpec{0.3, false}, mask));
        });
    }});
    cases.push_back({"error_sum_l1", [=](std::uint64_t s) {
        Rng r(s);
        Tensor a = standard_normal({3, 3}, r);
        Tensor d = away_from_zero({3, 3}, r);
        return check_input_grads({a, a + d}, [&](Tape& t, const std::vector<Var>& v) {
            return error_sum(t, v[0], v[1], Norm::l1, 4.0);
        });
    }});
    cases.push_back({"error_sum_l2", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({3, 3}, r), standard_normal({3, 3}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) { return error_sum(t, v[0], v[1], Norm::l2, 4.0); });
    }});
    cases.push_back({"weighted_sum", [=](std::uint64_t s) {
        Rng r(s);
        return check_input_grads({standard_normal({2, 2}, r), standard_normal({2, 2}, r)},
                                 [&](Tape& t, const std::vector<Var>& v) {
                                     Var a = mean_error(t, v[0], t.constant(Tensor({2, 2})), Norm::l2);
                                     Var b = mean_error(t, v[1], t.constant(Tensor({2, 2}, 0.5)), Norm::l2);
                                     return weighted_sum(t, {{0.25, a}, {1.5, b}});
                                 });
    }});
    return cases;
}

/// Parameter gradients of the three model roles on a tiny backbone, one
/// activation per role so each nonlinearity is covered end to end.
inline std::vector<OpCase> backbone_cases() {
    auto tiny = [](Activation act, double drop) {
        NetConfig c;
        c.snapshot_shape = {3};
        c.horizon = 4;
        c.hidden = {5, 4, 5};
        c.time_features = 4;
        c.time_dim = 6;
        c.activation = act;
        c.dropout.rate = drop;
        return c;
    };
    std::vector<OpCase> cases;
    cases.push_back({"interpolator backbone", [=](std::uint64_t s) {
        Rng init(s);
        InterpolatorModel m(tiny(Activation::gelu, 0.2), init);
        Tensor a = standard_normal({2, 3}, init), b = standard_normal({2, 3}, init), y = standard_normal({2, 3}, init);
        const std::vector<double> t{1.0, 2.5};
        return check_param_grads(m.parameters(), [&](Tape& tape) {
            Rng mask(s + 7);
            Var p = m.forward(tape, tape.constant(a), tape.constant(b), t, Mode::train, &mask);
            return ops::mean_error(tape, p, tape.constant(y), Norm::l2);
        });
    }});
    cases.push_back({"forecaster backbone", [=](std::uint64_t s) {
        Rng init(s);
        ForecasterModel m(tiny(Activation::silu, 0.0), Conditioning::clean, init);
        Tensor a = standard_normal({2, 3}, init), c = standard_normal({2, 3}, init), y = standard_normal({2, 3}, init);
        const std::vector<double> t{0.0, 3.0};
        return check_param_grads(m.parameters(), [&](Tape& tape) {
            Var p = m.forward(tape, tape.constant(a), tape.constant(c), t, Mode::inference, nullptr);
            return ops::mean_error(tape, p, tape.constant(y), Norm::l2);
        });
    }});
    cases.push_back({"barebone backbone", [=](std::uint64_t s) {
        Rng init(s);
        NetConfig cfg = tiny(Activation::relu, 0.0);
        BarebonePredictor m(cfg, init);
        Tensor a = standard_normal({3, 3}, init), y = standard_normal({3, 3}, init);
        const std::vector<double> t{1.0, 2.0, 4.0};
        return check_param_grads(m.parameters(), [&](Tape& tape) {
            Var p = m.forward(tape, tape.constant(a), t, Mode::inference, nullptr);
            return ops::mean_error(tape, p, tape.constant(y), Norm::l2);
        });
    }});
    return cases;
}

/// Random closed-form system: scalar, 2x2 or 3x3 linear, or harmonic, with
/// mild rates so states stay O(1) over the horizon.
inline OracleSystem random_oracle(Rng& rng) {
    switch (rng.uniform_int(0, 3)) {
        case 0: return OracleSystem::scalar(rng.uniform(-0.5, 0.5));
        case 1:
        case 2: {
            const auto n = static_cast<Eigen::Index>(rng.uniform_int(2, 3));
            Eigen::MatrixXd a(n, n);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.uniform(-0.4, 0.4);
            return OracleSystem::vector(a);
        }
        default: return OracleSystem::harmonic(rng.uniform(0.3, 1.5));
    }
}

inline Tensor random_state(const OracleSystem& sys, Rng& rng) {
    const std::size_t n = sys.kind == OracleKind::linear_scalar ? 1
                          : sys.kind == OracleKind::harmonic    ? 2
                                                                : static_cast<std::size_t>(sys.generator.rows());
    Tensor x(Shape{n});
    for (double& v : x.data()) v = rng.uniform(-1.5, 1.5);
    return x;
}

/// Random schedule: h in [1, 12], k in [0, 6], then a random subset.
inline Schedule random_schedule(Rng& rng) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 12));
    const auto k = static_cast<std::size_t>(rng.uniform_int(0, 6));
    const Schedule full = make_schedule(h, k);
    std::vector<std::size_t> keep{0};
    for (std::size_t n = 1; n < full.size(); ++n) {
        if (rng.uniform() < 0.7) keep.push_back(n);
    }
    return subset_schedule(full, keep);
}

/// Cold sampling with exact oracle rules: largest deviation from the closed
/// form over every schedule time and the horizon.
inline double oracle_exactness_error(std::uint64_t seed) {
    Rng rng(seed);
    const OracleSystem sys = random_oracle(rng);
    const Schedule S = random_schedule(rng);
    const double h = static_cast<double>(S.horizon());
    const auto pair = OracleModelPair::exact(sys, h);
    SampleRequest req;
    req.x_t = random_state(sys, rng);
    req.schedule = S;
    for (std::size_t n = 1; n < S.size(); ++n) req.outputs.push_back(S[n]);
    req.outputs.push_back(h);
    req.members = 2;
    req.seed = seed;
    const auto f = cold_sample(pair.forecaster, pair.interpolator, req);
    double worst = 0.0;
    for (const auto& member : f.members) {
        for (std::size_t j = 0; j < f.times.size(); ++j) {
            worst = std::max(worst, detail::max_abs_diff(member[j], sys.advance(req.x_t, f.times[j])));
        }
    }
    return worst;
}

/// One random operand set; true when the explicit Euler update and the cold
/// inner update agree bit for bit.
inline bool euler_matches_cold_step(std::uint64_t seed) {
    Rng rng(seed);
    const OracleSystem sys = random_oracle(rng);
    const double h = rng.uniform(1.0, 10.0);
    const OracleForecasterRule f{sys, h, rng.uniform(-0.2, 0.2)};
    const OracleInterpolatorRule interp{sys, h, rng.uniform(-0.5, 0.5)};
    const Tensor x_t = random_state(sys, rng);
    const Tensor x = random_state(sys, rng);
    const double s = rng.uniform(0.0, h);
    const double ds = rng.uniform(0.0, h - s);
    StepContext a{&x_t, 0, 1, nullptr}, b{&x_t, 0, 1, nullptr};
    const Tensor euler = euler_step(f, interp, x_t, x, s, ds, a);
    const Tensor cold = cold_step(f, interp, x_t, x, s, s + ds, b).next;
    return euler == cold;
}

/// Intermediates of both samplers under a constant forecaster and the linear
/// interpolator shifted by `bias`.
struct BiasRun {
    std::vector<Tensor> cold;
    std::vector<Tensor> naive;
};

inline BiasRun biased_intermediates(std::uint64_t seed, double bias) {
    Rng rng(seed);
    const auto h = static_cast<std::size_t>(rng.uniform_int(2, 10));
    const auto k = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const Tensor x_t = Tensor::vector({rng.uniform(-2, 2), rng.uniform(-2, 2)});
    const Tensor c = Tensor::vector({rng.uniform(-2, 2), rng.uniform(-2, 2)});
    auto forecaster = [c](const Tensor&, double) { return c; };
    const OracleInterpolatorRule interp{OracleSystem::scalar(0.0), static_cast<double>(h), bias};
    SampleRequest req;
    req.x_t = x_t;
    req.schedule = make_schedule(h, k);
    for (std::size_t n = 1; n < req.schedule.size(); ++n) req.outputs.push_back(req.schedule[n]);
    BiasRun out;
    out.cold = cold_sample(forecaster, interp, req).members[0];
    out.naive = naive_sample(forecaster, interp, req).members[0];
    return out;
}

/// A 2x2 mesh with a few small trajectories and tiny networks: every stage
/// of an experiment finishes in about a second.
inline Config tiny_config() {
    Config c;
    for (const auto& [k, v] : std::vector<std::pair<const char*, const char*>>{
             {"rows", "2"}, {"cols", "2"}, {"steps", "60"}, {"stride", "5"},
             {"train_trajectories", "2"}, {"val_trajectories", "1"}, {"test_trajectories", "1"},
             {"horizon", "4"}, {"forecaster_width", "8"}, {"interpolator_width", "8"},
             {"barebone_width", "8"}, {"hidden_layers", "1"}, {"time_features", "4"}, {"time_dim", "4"},
             {"epochs", "2"}, {"batch_size", "8"}, {"crps_every", "1"}, {"val_members", "2"},
             {"val_crps_windows", "2"}, {"members", "3"}, {"eval_windows", "2"}}) {
        c.set(k, v);
    }
    return c;
}

/// Relative paths of files whose bytes differ between two run trees, limited
/// to the deterministic artifact types. Files present on one side only count.
inline std::vector<std::string> differing_artifacts(const std::filesystem::path& a, const std::filesystem::path& b,
                                                    std::size_t* compared = nullptr) {
    namespace fs = std::filesystem;
    static const std::set<std::string> exts{".dyft", ".dyfp", ".csv", ".meta", ".cfg"};
    auto collect = [&](const fs::path& root) {
        std::set<std::string> out;
        for (const auto& e : fs::recursive_directory_iterator(root)) {
            if (e.is_regular_file() && exts.count(e.path().extension().string())) {
                out.insert(fs::relative(e.path(), root).string());
            }
        }
        return out;
    };
    const auto fa = collect(a), fb = collect(b);
    std::vector<std::string> diff;
    for (const auto& f : fa) {
        if (!fb.count(f) || slurp(a / f) != slurp(b / f)) diff.push_back(f);
    }
    for (const auto& f : fb) {
        if (!fa.count(f)) diff.push_back(f);
    }
    if (compared) *compared = fa.size();
    return diff;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace dyffuse::testing
