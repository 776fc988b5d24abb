// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Non-diffusion ensembles over a barebone multi-step predictor F(x_t, i).

#pragma once

#include <chrono>

#include "dyffuse/training.hpp"

namespace dyffuse {

struct BareboneBatch {
    Tensor x_t, target;
    std::vector<double> times;
};

inline BareboneBatch barebone_batch(const std::vector<WindowView>& windows, const std::vector<std::size_t>& idx,
                                    const std::vector<std::size_t>& offsets) {
    const std::size_t B = idx.size(), D = shape_numel(windows.at(idx.at(0)).trajectory().snapshot_shape());
    BareboneBatch b{Tensor(Shape{B, D}), Tensor(Shape{B, D}), {}};
    for (std::size_t r = 0; r < B; ++r) {
        detail::copy_row(b.x_t, r, windows[idx[r]].initial());
        detail::copy_row(b.target, r, windows[idx[r]].at(offsets[r]));
        b.times.push_back(static_cast<double>(offsets[r]));
    }
    return b;
}

template <class Model>
Var barebone_objective(Tape& tape, Model& model, const BareboneBatch& b, Norm norm, Mode mode, Rng* rng) {
    Var pred = model.forward(tape, tape.reference(b.x_t), b.times, mode, rng);
    return ops::mean_error(tape, pred, tape.reference(b.target), norm);
}

/// Deterministic loss over every window and every i in 1..h.
inline double barebone_loss(const BarebonePredictor& model, const std::vector<WindowView>& windows, Norm norm) {
    double total = 0.0;
    std::size_t rows = 0;
    std::vector<std::size_t> idx, off;
    auto flush = [&] {
        if (idx.empty()) return;
        Tape tape;
        auto b = barebone_batch(windows, idx, off);
        total += tape.value(barebone_objective(tape, model, b, norm, Mode::inference, nullptr)).item() *
                 static_cast<double>(idx.size());
        rows += idx.size();
        idx.clear();
        off.clear();
    };
    for (std::size_t w = 0; w < windows.size(); ++w) {
        for (std::size_t i = 1; i <= model.horizon(); ++i) {
            idx.push_back(w);
            off.push_back(i);
            if (idx.size() == 256) flush();
        }
    }
    flush();
    if (rows == 0) throw DomainError("barebone_loss: no windows");
    return total / static_cast<double>(rows);
}

/// Multi-step regression on i ~ U{1, ..., h}. Use Norm::l2 for the standard
/// baseline.
inline TrainResult<BarebonePredictor> train_barebone(BarebonePredictor model, std::vector<WindowView>& train,
                                                     std::vector<WindowView>& val, const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.horizon;
    if (model.horizon() != h) throw DomainError("train_barebone: model horizon differs from config");
    if (train.empty() || val.empty()) throw DomainError("train_barebone: empty split");

    Rng data = Rng::substream(cfg.seed, "data", 3);
    Rng drop = Rng::substream(cfg.seed, "dropout", 3);
    AdamW opt(cfg.optim);
    auto params = model.parameters();

    TrainResult<BarebonePredictor> result;
    LossRecord first{0, barebone_loss(model, train, cfg.norm), barebone_loss(model, val, cfg.norm), std::nullopt};
    detail::check_finite_loss(first.val_loss, "barebone", 0);
    result.history.push_back(first);
    double best = first.val_loss;
    auto best_values = detail::snapshot_values(params);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& idx : detail::epoch_batches(train.size(), cfg.batch_size, data)) {
            std::vector<std::size_t> off;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                off.push_back(static_cast<std::size_t>(data.uniform_int(1, static_cast<long long>(h))));
            }
            const auto b = barebone_batch(train, idx, off);
            const double loss = detail::at_epoch("barebone", epoch, [&] {
                Tape tape;
                Var l = barebone_objective(tape, model, b, cfg.norm, Mode::train, &drop);
                zero_grads(params);
                tape.backward(l);
                return tape.value(l).item();
            });
            detail::check_finite_loss(loss, "barebone", epoch);
            clip_grad_norm(params, cfg.clip);
            opt.step(params);
            sum += loss * static_cast<double>(idx.size());
            count += idx.size();
        }
        LossRecord rec{epoch, sum / static_cast<double>(count), barebone_loss(model, val, cfg.norm), std::nullopt};
        detail::check_finite_loss(rec.val_loss, "barebone", epoch);
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

struct BaselineRequest {
    Tensor x_t;
    /// Output times in (0, h]; empty means {1, ..., h}.
    std::vector<double> outputs;
    std::size_t members = 1;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

namespace detail {

template <class Member>
EnsembleForecast baseline_ensemble(const BarebonePredictor& model, const BaselineRequest& req, Member member) {
    if (req.members < 1) throw DomainError("baseline: ensemble size must be >= 1");
    const auto start = std::chrono::steady_clock::now();
    const std::size_t h = model.horizon();
    EnsembleForecast out;
    out.times = req.outputs.empty() ? default_outputs(h) : req.outputs;
    std::sort(out.times.begin(), out.times.end());
    for (double j : out.times) {
        if (!(j > 0.0 && j <= static_cast<double>(h))) {
            throw DomainError("baseline: output time " + std::to_string(j) + " outside (0, h]");
        }
    }
    out.schedule = make_schedule(h);
    out.passes = {out.times.size(), 0, 0};
    out.members.resize(req.members);
    out.seeds.resize(req.members);
    for_each_member(req.members, req.jobs, [&](std::size_t m) {
        const std::uint64_t seed = member_seed(req.seed, m);
        Rng rng(seed);
        out.seeds[m] = seed;
        out.members[m] = member(rng, out.times);
    });
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

}  // namespace detail

/// Monte-Carlo dropout: one stream per member, drawn from across that
/// member's output times.
inline EnsembleForecast dropout_ensemble(const BarebonePredictor& model, const BaselineRequest& req) {
    BarebonePredictor mc = model;
    mc.set_inference_dropout(true);
    return detail::baseline_ensemble(mc, req, [&](Rng& rng, const std::vector<double>& times) {
        std::vector<Tensor> row;
        for (double j : times) row.push_back(mc.predict(req.x_t, j, &rng));
        return row;
    });
}

/// Member m forecasts deterministically from x_t + sigma * eps_m.
inline EnsembleForecast perturbation_ensemble(const BarebonePredictor& model, const BaselineRequest& req,
                                              double sigma = 0.05) {
    if (!(sigma >= 0.0)) throw DomainError("perturbation scale must be non-negative");
    BarebonePredictor det = model;
    det.set_inference_dropout(false);
    return detail::baseline_ensemble(det, req, [&](Rng& rng, const std::vector<double>& times) {
        Tensor x = req.x_t;
        for (double& v : x.data()) v += sigma * rng.normal();
        std::vector<Tensor> row;
        for (double j : times) row.push_back(det.predict(x, j, nullptr));
        return row;
    });
}

}  // namespace dyffuse
