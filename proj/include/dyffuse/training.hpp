// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training. Stage 1 regresses the interpolator on interior
// snapshots; Stage 2 trains the forecaster on the frozen, stochastic
// interpolator's outputs with a one-step look-ahead term.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <vector>

#include "dyffuse/metrics.hpp"
#include "dyffuse/optim.hpp"
#include "dyffuse/sampling.hpp"

namespace dyffuse {

using ops::Norm;

inline std::string to_string(Norm n) { return n == Norm::l1 ? "l1" : "l2"; }
inline Norm parse_norm(const std::string& s) {
    if (s == "l1") return Norm::l1;
    if (s == "l2") return Norm::l2;
    throw DomainError("unknown loss norm '" + s + "' (expected l1 or l2)");
}

struct TrainConfig {
    std::size_t horizon = 8;
    std::size_t aux_steps = 0;
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    Conditioning conditioning = Conditioning::none;
    AdamWConfig optim;
    std::size_t batch_size = 32;
    std::size_t epochs = 200;
    double clip = 1.0;
    Norm norm = Norm::l1;
    std::uint64_t seed = 0;
    /// Stage 2: score a cold-sampled ensemble on the validation set every
    /// `crps_every` epochs (0 disables) and select the best checkpoint by it.
    std::size_t crps_every = 0;
    std::size_t val_members = 20;
    /// At most this many validation windows enter the CRPS estimate.
    std::size_t val_crps_windows = 16;
    /// Restore the best-validation parameters when training ends.
    bool restore_best = true;

    Schedule schedule() const { return make_schedule(horizon, aux_steps); }

    void validate() const {
        if (horizon < 1) throw ConfigError("horizon must be >= 1");
        if (!(lambda1 >= 0.0 && lambda2 >= 0.0) || !(lambda1 + lambda2 > 0.0)) {
            throw ConfigError("loss weights must be non-negative with a positive sum");
        }
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (!(clip > 0.0)) throw ConfigError("gradient clip norm must be positive");
        if (!(optim.lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (crps_every > 0 && val_members < 1) throw ConfigError("validation ensemble needs >= 1 member");
    }
};

/// One CSV row. Epoch 0 is measured before any update.
struct LossRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::optional<double> val_crps;
};

template <class Model>
struct TrainResult {
    Model model;
    std::vector<LossRecord> history;
    std::size_t best_epoch = 0;
};

inline void write_history_csv(std::ostream& out, const std::vector<LossRecord>& h) {
    out.precision(10);
    out << "epoch,train_loss,val_loss,val_crps\n";
    for (const auto& r : h) {
        out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',';
        if (r.val_crps) out << *r.val_crps;
        out << '\n';
    }
}

inline void save_history_csv(const std::filesystem::path& p, const std::vector<LossRecord>& h) {
    std::ofstream out(p);
    if (!out) throw FormatError("cannot write " + p.string());
    write_history_csv(out, h);
}

namespace detail {

inline std::vector<Tensor> snapshot_values(std::vector<Parameter*> params) {
    std::vector<Tensor> out;
    for (auto* p : params) out.push_back(p->value);
    return out;
}

inline void restore_values(std::vector<Parameter*> params, const std::vector<Tensor>& values) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = values[k];
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < count; b += batch) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch)));
    }
    return out;
}

inline void copy_row(Tensor& dst, std::size_t r, const Tensor& src) {
    std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(r * src.numel()));
}

inline void check_finite_loss(double loss, const char* stage, std::size_t epoch) {
    if (!std::isfinite(loss)) {
        throw NumericError(std::string(stage) + ": loss diverged at epoch " + std::to_string(epoch));
    }
}

/// Rethrows tape errors with the epoch that produced them.
template <class Body>
auto at_epoch(const char* stage, std::size_t epoch, Body body) {
    try {
        return body();
    } catch (const NumericError& e) {
        throw NumericError(std::string(stage) + ": epoch " + std::to_string(epoch) + ": " + e.what());
    }
}

inline std::vector<std::size_t> strided_subset(std::size_t count, std::size_t limit) {
    std::vector<std::size_t> idx;
    if (count == 0) return idx;
    const std::size_t take = std::min(count, std::max<std::size_t>(limit, 1));
    for (std::size_t k = 0; k < take; ++k) idx.push_back(k * count / take);
    return idx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1

/// Rows (x_t, x_{t+h}) -> x_{t+i}.
struct Stage1Batch {
    Tensor x_t, x_h, target;
    std::vector<double> times;
};

inline Stage1Batch stage1_batch(const std::vector<WindowView>& windows, const std::vector<std::size_t>& idx,
                                const std::vector<std::size_t>& offsets) {
    const std::size_t B = idx.size(), D = shape_numel(windows.at(idx.at(0)).trajectory().snapshot_shape());
    Stage1Batch b{Tensor(Shape{B, D}), Tensor(Shape{B, D}), Tensor(Shape{B, D}), {}};
    for (std::size_t r = 0; r < B; ++r) {
        const WindowView& w = windows[idx[r]];
        detail::copy_row(b.x_t, r, w.initial());
        detail::copy_row(b.target, r, w.at(offsets[r]));
        detail::copy_row(b.x_h, r, w.target());
        b.times.push_back(static_cast<double>(offsets[r]));
    }
    return b;
}

/// Mean-per-element error of I(x_t, x_h, i) against x_{t+i}.
template <class Model>
Var stage1_objective(Tape& tape, Model& model, const Stage1Batch& b, Norm norm, Mode mode, Rng* rng) {
    Var x_t = tape.reference(b.x_t);
    Var x_h = tape.reference(b.x_h);
    Var pred = model.forward(tape, x_t, x_h, b.times, mode, rng);
    return ops::mean_error(tape, pred, tape.reference(b.target), norm);
}

/// Deterministic loss over every window and every interior i.
inline double stage1_loss(const InterpolatorModel& model, const std::vector<WindowView>& windows, Norm norm) {
    const std::size_t h = model.horizon();
    double total = 0.0;
    std::size_t rows = 0;
    std::vector<std::size_t> idx, off;
    auto flush = [&] {
        if (idx.empty()) return;
        Tape tape;
        auto b = stage1_batch(windows, idx, off);
        total += tape.value(stage1_objective(tape, model, b, norm, Mode::inference, nullptr)).item() *
                 static_cast<double>(idx.size());
        rows += idx.size();
        idx.clear();
        off.clear();
    };
    for (std::size_t w = 0; w < windows.size(); ++w) {
        for (std::size_t i = 1; i < h; ++i) {
            idx.push_back(w);
            off.push_back(i);
            if (idx.size() == 256) flush();
        }
    }
    flush();
    if (rows == 0) throw DomainError("stage1_loss: no windows");
    return total / static_cast<double>(rows);
}

/// Trains `model` in place on i ~ U{1, ..., h-1} and returns it with its
/// history; the best-validation parameters are restored at the end.
inline TrainResult<InterpolatorModel> train_interpolator(InterpolatorModel model, std::vector<WindowView>& train,
                                                         std::vector<WindowView>& val, const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.horizon;
    if (h < 2) throw DomainError("train_interpolator: horizon must be >= 2 to have interior targets");
    if (model.horizon() != h) throw DomainError("train_interpolator: model horizon differs from config");
    if (model.frozen()) throw DomainError("train_interpolator: model is frozen");
    if (train.empty() || val.empty()) throw DomainError("train_interpolator: empty split");

    Rng data = Rng::substream(cfg.seed, "data", 1);
    Rng drop = Rng::substream(cfg.seed, "dropout", 1);
    AdamW opt(cfg.optim);
    auto params = model.parameters();

    TrainResult<InterpolatorModel> result;
    LossRecord first{0, stage1_loss(model, train, cfg.norm), stage1_loss(model, val, cfg.norm), std::nullopt};
    detail::check_finite_loss(first.val_loss, "stage 1", 0);
    result.history.push_back(first);
    double best = first.val_loss;
    auto best_values = detail::snapshot_values(params);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& idx : detail::epoch_batches(train.size(), cfg.batch_size, data)) {
            std::vector<std::size_t> off;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                off.push_back(static_cast<std::size_t>(data.uniform_int(1, static_cast<long long>(h - 1))));
            }
            const auto b = stage1_batch(train, idx, off);
            const double loss = detail::at_epoch("stage 1", epoch, [&] {
                Tape tape;
                Var l = stage1_objective(tape, model, b, cfg.norm, Mode::train, &drop);
                zero_grads(params);
                tape.backward(l);
                return tape.value(l).item();
            });
            detail::check_finite_loss(loss, "stage 1", epoch);
            clip_grad_norm(params, cfg.clip);
            opt.step(params);
            sum += loss * static_cast<double>(idx.size());
            count += idx.size();
        }
        LossRecord rec{epoch, sum / static_cast<double>(count), stage1_loss(model, val, cfg.norm), std::nullopt};
        detail::check_finite_loss(rec.val_loss, "stage 1", epoch);
        if (rec.val_loss < best) {
            best = rec.val_loss;
            best_values = detail::snapshot_values(params);
            result.best_epoch = epoch;
        }
        result.history.push_back(rec);
    }
    if (cfg.restore_best) detail::restore_values(params, best_values);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Stage 2

struct Stage2Batch {
    Tensor x_t, x_h;
    std::vector<std::size_t> steps;
};

/// Reads only x_t and x_{t+h} from each window.
inline Stage2Batch stage2_batch(const std::vector<WindowView>& windows, const std::vector<std::size_t>& idx,
                                const std::vector<std::size_t>& steps) {
    const std::size_t B = idx.size(), D = shape_numel(windows.at(idx.at(0)).trajectory().snapshot_shape());
    Stage2Batch b{Tensor(Shape{B, D}), Tensor(Shape{B, D}), steps};
    for (std::size_t r = 0; r < B; ++r) {
        detail::copy_row(b.x_t, r, windows[idx[r]].initial());
        detail::copy_row(b.x_h, r, windows[idx[r]].target());
    }
    return b;
}

struct Stage2Terms {
    double first = 0.0;
    double look_ahead = 0.0;
};

namespace detail {

inline Tensor conditioning_rows(Conditioning mode, const Tensor& x_t, const std::vector<std::size_t>& rows,
                                const std::vector<std::size_t>& steps, std::size_t N, Rng& rng) {
    const std::size_t D = x_t.dim(1);
    Tensor out(Shape{rows.size(), D});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        Tensor row = batch_row(x_t, rows[r], Shape{D});
        auto c = make_conditioning(mode, row, steps[r], N, rng);
        copy_row(out, r, *c);
    }
    return out;
}

}  // namespace detail

/// lambda1 |F(I(x_t, x_h, i_n), i_n) - x_h| + lambda2 |F(I(x_t, F(...), i_{n+1}), i_{n+1}) - x_h|,
/// both normalized by B * D. Rows at n = N - 1 add nothing to the second term.
/// The interpolator draws dropout masks from `rng` (a fresh mask per call).
template <class Forecaster>
Var stage2_objective(Tape& tape, Forecaster& f, const InterpolatorModel& interp, const Schedule& S,
                     const Stage2Batch& b, const TrainConfig& cfg, Mode mode, Rng& rng, Stage2Terms* terms = nullptr) {
    const std::size_t B = b.x_t.dim(0), D = b.x_t.dim(1), N = S.size();
    if (b.steps.size() != B) throw ShapeError("stage2: one step index per row required");
    Rng* interp_rng = interp.stochastic() ? &rng : nullptr;
    const double divisor = static_cast<double>(B * D);

    // Interpolated inputs: x_t itself at n = 0, I(x_t, x_h, i_n) otherwise.
    Tensor input = b.x_t;
    std::vector<std::size_t> pos;
    for (std::size_t r = 0; r < B; ++r) {
        if (b.steps[r] >= N) throw DomainError("stage2: step index out of range");
        if (b.steps[r] > 0) pos.push_back(r);
    }
    if (!pos.empty()) {
        Tape local;
        Var xt = ops::gather_rows(local, local.reference(b.x_t), pos);
        Var xh = ops::gather_rows(local, local.reference(b.x_h), pos);
        std::vector<double> t;
        for (auto r : pos) t.push_back(S[b.steps[r]]);
        const Tensor& y = local.value(interp.forward(local, xt, xh, t, Mode::inference, interp_rng));
        for (std::size_t k = 0; k < pos.size(); ++k) {
            std::copy(y.data().begin() + static_cast<std::ptrdiff_t>(k * D),
                      y.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * D),
                      input.data().begin() + static_cast<std::ptrdiff_t>(pos[k] * D));
        }
    }

    std::vector<std::size_t> all(B);
    std::iota(all.begin(), all.end(), 0);
    std::vector<double> t1;
    for (auto n : b.steps) t1.push_back(S[n]);
    std::optional<Var> c1;
    if (f.conditioning() != Conditioning::none) {
        c1 = tape.constant(detail::conditioning_rows(f.conditioning(), b.x_t, all, b.steps, N, rng));
    }
    Var x_h = tape.reference(b.x_h);
    Var pred1 = f.forward(tape, tape.constant(std::move(input)), c1, t1, mode, &rng);
    Var loss1 = ops::error_sum(tape, pred1, x_h, cfg.norm, divisor);

    std::vector<std::pair<double, Var>> parts{{cfg.lambda1, loss1}};
    std::vector<std::size_t> ahead;
    for (std::size_t r = 0; r < B; ++r) {
        if (b.steps[r] + 1 < N) ahead.push_back(r);
    }
    double second = 0.0;
    if (cfg.lambda2 > 0.0 && !ahead.empty()) {
        Var x_t = tape.reference(b.x_t);
        Var xt_a = ops::gather_rows(tape, x_t, ahead);
        Var xh_hat = ops::gather_rows(tape, pred1, ahead);
        std::vector<double> t2;
        std::vector<std::size_t> next;
        for (auto r : ahead) {
            t2.push_back(S[b.steps[r] + 1]);
            next.push_back(b.steps[r] + 1);
        }
        Var mid = interp.forward(tape, xt_a, xh_hat, t2, Mode::inference, interp_rng);
        std::optional<Var> c2;
        if (f.conditioning() != Conditioning::none) {
            c2 = tape.constant(detail::conditioning_rows(f.conditioning(), b.x_t, ahead, next, N, rng));
        }
        Var pred2 = f.forward(tape, mid, c2, t2, mode, &rng);
        Var loss2 = ops::error_sum(tape, pred2, ops::gather_rows(tape, x_h, ahead), cfg.norm, divisor);
        second = tape.value(loss2).item();
        parts.emplace_back(cfg.lambda2, loss2);
    }
    if (terms) *terms = {tape.value(loss1).item(), second};
    return ops::weighted_sum(tape, std::move(parts));
}

/// Objective over every window and every n, with a fixed stream so repeated
/// calls are comparable across epochs.
inline double stage2_loss(const ForecasterModel& f, const InterpolatorModel& interp, const Schedule& S,
                          const std::vector<WindowView>& windows, const TrainConfig& cfg, std::uint64_t stream) {
    Rng rng(stream);
    double total = 0.0;
    std::size_t rows = 0;
    std::vector<std::size_t> idx, steps;
    auto flush = [&] {
        if (idx.empty()) return;
        Tape tape;
        auto b = stage2_batch(windows, idx, steps);
        total += tape.value(stage2_objective(tape, f, interp, S, b, cfg, Mode::inference, rng)).item() *
                 static_cast<double>(idx.size());
        rows += idx.size();
        idx.clear();
        steps.clear();
    };
    for (std::size_t w = 0; w < windows.size(); ++w) {
        for (std::size_t n = 0; n < S.size(); ++n) {
            idx.push_back(w);
            steps.push_back(n);
            if (idx.size() == 256) flush();
        }
    }
    flush();
    if (rows == 0) throw DomainError("stage2_loss: no windows");
    return total / static_cast<double>(rows);
}

/// Mean CRPS over outputs 1..h of a cold-sampled ensemble, pooled over a
/// strided subset of validation windows.
inline double validation_crps(const ForecasterModel& f, const InterpolatorModel& interp, const Schedule& S,
                              const std::vector<WindowView>& windows, std::size_t members, std::size_t max_windows,
                              std::uint64_t seed) {
    double total = 0.0;
    const auto pick = detail::strided_subset(windows.size(), max_windows);
    for (std::size_t k : pick) {
        const WindowView& w = windows[k];
        SampleRequest req;
        req.x_t = w.initial();
        req.schedule = S;
        req.members = members;
        req.seed = derive_seed(seed, "validation", k);
        auto fc = cold_sample(NeuralForecaster{&f}, NeuralInterpolator{&interp}, req);
        std::vector<Tensor> truth;
        for (double j : fc.times) truth.push_back(w.at(static_cast<std::size_t>(j)));
        total += evaluate(fc, truth).mean_crps;
    }
    return total / static_cast<double>(pick.size());
}

inline TrainResult<ForecasterModel> train_forecaster(ForecasterModel model, const InterpolatorModel& interp,
                                                     std::vector<WindowView>& train, std::vector<WindowView>& val,
                                                     const TrainConfig& cfg) {
    cfg.validate();
    if (!interp.frozen()) throw DomainError("train_forecaster: the interpolator must be frozen first");
    if (interp.horizon() != cfg.horizon || model.horizon() != cfg.horizon) {
        throw DomainError("train_forecaster: interpolator, forecaster and config horizons differ");
    }
    if (model.conditioning() != cfg.conditioning) {
        throw DomainError("train_forecaster: model conditioning differs from config");
    }
    if (train.empty() || val.empty()) throw DomainError("train_forecaster: empty split");
    const auto interp_hash = params_hash(interp.parameters());
    const Schedule S = cfg.schedule();
    const std::size_t N = S.size();

    Rng data = Rng::substream(cfg.seed, "data", 2);
    Rng drop = Rng::substream(cfg.seed, "dropout", 2);
    const std::uint64_t val_stream = derive_seed(cfg.seed, "validation", 2);
    AdamW opt(cfg.optim);
    auto params = model.parameters();

    auto crps_now = [&](std::size_t epoch) -> std::optional<double> {
        if (cfg.crps_every == 0) return std::nullopt;
        if (epoch % cfg.crps_every != 0 && epoch != cfg.epochs) return std::nullopt;
        return validation_crps(model, interp, S, val, cfg.val_members, cfg.val_crps_windows, val_stream);
    };
    auto score = [&](const LossRecord& r) { return r.val_crps ? *r.val_crps : r.val_loss; };

    TrainResult<ForecasterModel> result;
    LossRecord first{0, stage2_loss(model, interp, S, train, cfg, val_stream),
                     stage2_loss(model, interp, S, val, cfg, val_stream), crps_now(0)};
    detail::check_finite_loss(first.val_loss, "stage 2", 0);
    result.history.push_back(first);
    double best = score(first);
    auto best_values = detail::snapshot_values(params);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& idx : detail::epoch_batches(train.size(), cfg.batch_size, data)) {
            std::vector<std::size_t> steps;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                steps.push_back(static_cast<std::size_t>(data.uniform_int(0, static_cast<long long>(N - 1))));
            }
            const auto b = stage2_batch(train, idx, steps);
            const double loss = detail::at_epoch("stage 2", epoch, [&] {
                Tape tape;
                Var l = stage2_objective(tape, model, interp, S, b, cfg, Mode::train, drop);
                zero_grads(params);
                tape.backward(l);
                return tape.value(l).item();
            });
            detail::check_finite_loss(loss, "stage 2", epoch);
            clip_grad_norm(params, cfg.clip);
            opt.step(params);
            sum += loss * static_cast<double>(idx.size());
            count += idx.size();
        }
        LossRecord rec{epoch, sum / static_cast<double>(count), stage2_loss(model, interp, S, val, cfg, val_stream),
                       crps_now(epoch)};
        detail::check_finite_loss(rec.val_loss, "stage 2", epoch);
        // Rows without a CRPS estimate cannot compete when selection uses CRPS.
        if ((cfg.crps_every == 0 || rec.val_crps) && score(rec) < best) {
            best = score(rec);
            best_values = detail::snapshot_values(params);
            result.best_epoch = epoch;
        }
        result.history.push_back(rec);
    }
    if (cfg.restore_best) detail::restore_values(params, best_values);
    if (params_hash(interp.parameters()) != interp_hash) {
        throw Error("train_forecaster: interpolator parameters changed during Stage 2");
    }
    result.model = std::move(model);
    return result;
}

}  // namespace dyffuse
