// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "dyffuse/core.hpp"

namespace dyffuse {

/// Map from diffusion step n to dynamical time i_n within a horizon h.
/// Always starts at 0 and increases strictly below h.
class Schedule {
public:
    Schedule(std::size_t horizon, std::vector<double> steps, std::size_t aux_count = 0,
             bool subsampled = false)
        : horizon_(horizon), steps_(std::move(steps)), aux_count_(aux_count), subsampled_(subsampled) {
        if (horizon_ < 1) throw DomainError("schedule: horizon must be >= 1");
        if (steps_.empty() || steps_[0] != 0.0) throw DomainError("schedule: i_0 must be 0");
        for (std::size_t n = 1; n < steps_.size(); ++n) {
            if (!(steps_[n] > steps_[n - 1])) {
                throw DomainError("schedule: steps must increase strictly (at n = " + std::to_string(n) + ")");
            }
        }
        if (!(steps_.back() < static_cast<double>(horizon_))) {
            throw DomainError("schedule: steps must stay below the horizon");
        }
    }

    std::size_t horizon() const { return horizon_; }
    std::size_t size() const { return steps_.size(); }
    std::size_t aux_count() const { return aux_count_; }
    bool subsampled() const { return subsampled_; }
    const std::vector<double>& steps() const { return steps_; }
    double operator[](std::size_t n) const { return steps_.at(n); }

    bool contains(double i) const { return std::find(steps_.begin(), steps_.end(), i) != steps_.end(); }

    /// Whether any step lies strictly inside (0, 1), where the interpolator
    /// never saw training targets.
    bool has_fractional_early_steps() const {
        return std::any_of(steps_.begin(), steps_.end(), [](double i) { return i > 0.0 && i < 1.0; });
    }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t n = 0; n < steps_.size(); ++n) os << (n ? ", " : "") << steps_[n];
        os << ']';
        return os.str();
    }

    friend bool operator==(const Schedule& a, const Schedule& b) {
        return a.horizon_ == b.horizon_ && a.steps_ == b.steps_;
    }

private:
    std::size_t horizon_;
    std::vector<double> steps_;
    std::size_t aux_count_;
    bool subsampled_;
};

/// [0] + {j/(k+1) : j = 1..k} + {1, ..., h-1}; N = h + k.
inline Schedule make_schedule(std::size_t h, std::size_t k = 0) {
    if (h < 1) throw DomainError("make_schedule: horizon must be >= 1");
    std::vector<double> steps{0.0};
    for (std::size_t j = 1; j <= k; ++j) {
        steps.push_back(static_cast<double>(j) / static_cast<double>(k + 1));
    }
    for (std::size_t i = 1; i < h; ++i) steps.push_back(static_cast<double>(i));
    return Schedule(h, std::move(steps), k);
}

/// Keeps the steps at the given sorted indices; index 0 is mandatory since the
/// reverse process starts from the initial conditions.
inline Schedule subset_schedule(const Schedule& s, const std::vector<std::size_t>& keep) {
    if (keep.empty() || keep[0] != 0) {
        throw DomainError("subset_schedule: kept indices must start with 0");
    }
    std::vector<double> steps;
    std::size_t aux = 0;
    for (std::size_t k = 0; k < keep.size(); ++k) {
        if (k > 0 && keep[k] <= keep[k - 1]) throw DomainError("subset_schedule: indices must be sorted");
        if (keep[k] >= s.size()) {
            throw DomainError("subset_schedule: index " + std::to_string(keep[k]) + " out of range");
        }
        const double i = s[keep[k]];
        steps.push_back(i);
        if (i > 0.0 && i < 1.0) ++aux;
    }
    const bool dropped = keep.size() != s.size();
    return Schedule(s.horizon(), std::move(steps), aux, s.subsampled() || dropped);
}

/// Indices of the integer (base) steps {0, 1, ..., h-1}: drops every auxiliary step.
inline std::vector<std::size_t> base_step_indices(const Schedule& s) {
    std::vector<std::size_t> keep;
    for (std::size_t n = 0; n < s.size(); ++n) {
        if (s[n] == static_cast<double>(static_cast<std::size_t>(s[n]))) keep.push_back(n);
    }
    return keep;
}

}  // namespace dyffuse
