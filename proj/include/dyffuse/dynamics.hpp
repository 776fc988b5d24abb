// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth dynamics: a spring-mesh simulator, closed-form linear systems
// used as exact oracles, normalized trajectories and their "DYFT" file format.

#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dyffuse/core.hpp"
#include "dyffuse/tensor.hpp"

namespace dyffuse {

// ---------------------------------------------------------------------------
// Normalization and trajectories

/// Per-channel z-score statistics.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> stddev;

    static Normalization identity(std::size_t channels) {
        return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
    }

    std::size_t channels() const { return mean.size(); }
    friend bool operator==(const Normalization&, const Normalization&) = default;
};

/// Statistics pooled over a set of raw series shaped (T, C, spatial...).
/// Constant channels get unit scale.
inline Normalization compute_normalization(std::span<const Tensor> raw) {
    if (raw.empty()) throw DomainError("compute_normalization: no data");
    const std::size_t channels = raw[0].dim(1);
    std::vector<long double> sum(channels, 0.0L), sq(channels, 0.0L);
    std::vector<std::size_t> count(channels, 0);
    for (const Tensor& series : raw) {
        if (series.rank() < 2 || series.dim(1) != channels) {
            throw ShapeError("compute_normalization: inconsistent series shape " +
                             shape_str(series.shape()));
        }
        const std::size_t T = series.dim(0);
        const std::size_t per_channel = series.numel() / (T * channels);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t k = 0; k < per_channel; ++k) {
                    const double v = series[(t * channels + c) * per_channel + k];
                    sum[c] += v;
                    sq[c] += static_cast<long double>(v) * v;
                    ++count[c];
                }
    }
    Normalization n;
    for (std::size_t c = 0; c < channels; ++c) {
        const long double mu = sum[c] / count[c];
        const long double var = sq[c] / count[c] - mu * mu;
        const double sd = var > 1e-24L ? static_cast<double>(std::sqrt(var)) : 1.0;
        n.mean.push_back(static_cast<double>(mu));
        n.stddev.push_back(sd);
    }
    return n;
}

namespace detail {

template <class F>
Tensor map_channels(const Tensor& series, std::size_t channel_axis, std::size_t channels, F f) {
    if (series.rank() <= channel_axis || series.dim(channel_axis) != channels) {
        throw ShapeError("normalization: channel axis mismatch for " + shape_str(series.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < channel_axis; ++a) outer *= series.dim(a);
    for (std::size_t a = channel_axis + 1; a < series.rank(); ++a) inner *= series.dim(a);
    Tensor out(series.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < inner; ++k) {
                const std::size_t idx = (o * channels + c) * inner + k;
                out[idx] = f(series[idx], c);
            }
    return out;
}

}  // namespace detail

inline Tensor normalize(const Tensor& raw, const Normalization& n, std::size_t channel_axis = 1) {
    return detail::map_channels(raw, channel_axis, n.channels(),
                                [&](double v, std::size_t c) { return (v - n.mean[c]) / n.stddev[c]; });
}

inline Tensor denormalize(const Tensor& z, const Normalization& n, std::size_t channel_axis = 1) {
    return detail::map_channels(z, channel_axis, n.channels(),
                                [&](double v, std::size_t c) { return v * n.stddev[c] + n.mean[c]; });
}

/// Time-ordered normalized snapshots, shape (T, C, spatial...).
struct Trajectory {
    std::string system_id;
    Tensor snapshots;
    double dt = 1.0;
    Normalization normalization;

    std::size_t length() const { return snapshots.rank() ? snapshots.dim(0) : 0; }

    Shape snapshot_shape() const {
        return Shape(snapshots.shape().begin() + 1, snapshots.shape().end());
    }

    Tensor snapshot(std::size_t t) const { return slice_leading(snapshots, t); }

    void validate() const {
        if (snapshots.rank() < 2 || snapshots.dim(0) < 2) {
            throw ShapeError("trajectory needs shape (T >= 2, C, ...), got " +
                             shape_str(snapshots.shape()));
        }
        if (normalization.channels() != snapshots.dim(1)) {
            throw ShapeError("trajectory normalization has " +
                             std::to_string(normalization.channels()) + " channels, data has " +
                             std::to_string(snapshots.dim(1)));
        }
    }
};

// ---------------------------------------------------------------------------
// DYFT files
//
//   magic "DYFT", version u32 (= 1), system-id (u64 length + UTF-8), dt f64,
//   rank u64, dims rank x u64, channel mean (u64 count + f64 values),
//   channel std (u64 count + f64 values), payload prod(dims) x f32.
// Little-endian throughout. Forecast files prepend a member axis to dims.

inline constexpr std::uint32_t kSeriesFormatVersion = 1;

struct SeriesFile {
    std::string system_id;
    double dt = 1.0;
    Tensor data;
    Normalization normalization;
};

inline void write_series(std::ostream& out, const SeriesFile& f) {
    out.write("DYFT", 4);
    io::put<std::uint32_t>(out, kSeriesFormatVersion);
    io::put_string(out, f.system_id);
    io::put<double>(out, f.dt);
    io::put<std::uint64_t>(out, f.data.rank());
    for (std::size_t d : f.data.shape()) io::put<std::uint64_t>(out, d);
    io::put<std::uint64_t>(out, f.normalization.mean.size());
    for (double v : f.normalization.mean) io::put<double>(out, v);
    io::put<std::uint64_t>(out, f.normalization.stddev.size());
    for (double v : f.normalization.stddev) io::put<double>(out, v);
    for (double v : f.data.data()) io::put<float>(out, static_cast<float>(v));
}

inline SeriesFile read_series(std::istream& in) {
    io::expect_magic(in, "DYFT");
    const auto version = io::get<std::uint32_t>(in);
    if (version != kSeriesFormatVersion) {
        throw FormatError("DYFT: unsupported version " + std::to_string(version));
    }
    SeriesFile f;
    f.system_id = io::get_string(in);
    f.dt = io::get<double>(in);
    const auto rank = io::get<std::uint64_t>(in);
    if (rank > 16) throw FormatError("DYFT: implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = io::get<std::uint64_t>(in);
    auto read_array = [&] {
        const auto n = io::get<std::uint64_t>(in);
        if (n > (1u << 20)) throw FormatError("DYFT: implausible channel count");
        std::vector<double> v(n);
        for (double& x : v) x = io::get<double>(in);
        return v;
    };
    f.normalization.mean = read_array();
    f.normalization.stddev = read_array();
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = static_cast<double>(io::get<float>(in));
    f.data = Tensor(std::move(shape), std::move(data));
    return f;
}

inline void save_series_file(const std::filesystem::path& path, const SeriesFile& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_series(out, f);
}

inline SeriesFile load_series_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_series(in);
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
    traj.validate();
    save_series_file(path, {traj.system_id, traj.dt, traj.snapshots, traj.normalization});
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
    SeriesFile f = load_series_file(path);
    Trajectory traj{f.system_id, std::move(f.data), f.dt, std::move(f.normalization)};
    traj.validate();
    return traj;
}

// ---------------------------------------------------------------------------
// Spring mesh

/// Particles on a rows x cols grid joined to their horizontal and vertical
/// neighbours by Hookean springs. Anchored particles never move.
struct SpringMeshSystem {
    std::size_t rows = 4;
    std::size_t cols = 4;
    double mass = 1.0;
    double spring_constant = 1.0;
    double rest_length = 1.0;
    double dt = 1e-2;
    /// One flag per particle (row-major); empty means "top row anchored".
    std::vector<bool> fixed;

    std::size_t particles() const { return rows * cols; }

    bool is_fixed(std::size_t k) const { return fixed.empty() ? k < cols : static_cast<bool>(fixed[k]); }

    void validate() const {
        if (rows == 0 || cols == 0) throw DomainError("spring mesh: empty grid");
        if (!(mass > 0.0 && spring_constant > 0.0 && dt > 0.0 && rest_length >= 0.0)) {
            throw DomainError("spring mesh: mass, spring constant and dt must be positive");
        }
        if (!fixed.empty() && fixed.size() != particles()) {
            throw DomainError("spring mesh: fixed mask has wrong length");
        }
    }

    std::vector<std::pair<std::size_t, std::size_t>> springs() const {
        std::vector<std::pair<std::size_t, std::size_t>> s;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t k = r * cols + c;
                if (c + 1 < cols) s.emplace_back(k, k + 1);
                if (r + 1 < rows) s.emplace_back(k, k + cols);
            }
        return s;
    }
};

/// Positions and momenta, 2 components per particle.
struct MeshState {
    std::vector<double> q;
    std::vector<double> p;
};

inline MeshState rest_state(const SpringMeshSystem& sys) {
    MeshState s{std::vector<double>(2 * sys.particles()), std::vector<double>(2 * sys.particles())};
    for (std::size_t r = 0; r < sys.rows; ++r)
        for (std::size_t c = 0; c < sys.cols; ++c) {
            const std::size_t k = r * sys.cols + c;
            s.q[2 * k] = static_cast<double>(c) * sys.rest_length;
            s.q[2 * k + 1] = -static_cast<double>(r) * sys.rest_length;
        }
    return s;
}

/// Rest configuration with Gaussian jitter on the free particles.
inline MeshState random_initial_state(const SpringMeshSystem& sys, Rng& rng, double position_sigma,
                                      double momentum_sigma) {
    MeshState s = rest_state(sys);
    for (std::size_t k = 0; k < sys.particles(); ++k) {
        if (sys.is_fixed(k)) continue;
        for (int d = 0; d < 2; ++d) {
            s.q[2 * k + d] += position_sigma * rng.normal();
            s.p[2 * k + d] += momentum_sigma * rng.normal();
        }
    }
    return s;
}

inline std::vector<double> mesh_forces(const SpringMeshSystem& sys, const std::vector<double>& q) {
    std::vector<double> f(q.size(), 0.0);
    for (auto [a, b] : sys.springs()) {
        const double dx = q[2 * b] - q[2 * a];
        const double dy = q[2 * b + 1] - q[2 * a + 1];
        const double len = std::hypot(dx, dy);
        if (len == 0.0) continue;
        const double mag = sys.spring_constant * (len - sys.rest_length) / len;
        f[2 * a] += mag * dx;
        f[2 * a + 1] += mag * dy;
        f[2 * b] -= mag * dx;
        f[2 * b + 1] -= mag * dy;
    }
    for (std::size_t k = 0; k < sys.particles(); ++k) {
        if (sys.is_fixed(k)) f[2 * k] = f[2 * k + 1] = 0.0;
    }
    return f;
}

inline double mesh_energy(const SpringMeshSystem& sys, const MeshState& s) {
    double kinetic = 0.0;
    for (double p : s.p) kinetic += p * p;
    kinetic /= 2.0 * sys.mass;
    double potential = 0.0;
    for (auto [a, b] : sys.springs()) {
        const double len = std::hypot(s.q[2 * b] - s.q[2 * a], s.q[2 * b + 1] - s.q[2 * a + 1]);
        potential += 0.5 * sys.spring_constant * (len - sys.rest_length) * (len - sys.rest_length);
    }
    return kinetic + potential;
}

/// One velocity-Verlet (leapfrog) step with step size `dt` (may be negative).
inline void leapfrog_step(const SpringMeshSystem& sys, MeshState& s, double dt) {
    auto f = mesh_forces(sys, s.q);
    for (std::size_t i = 0; i < s.p.size(); ++i) s.p[i] += 0.5 * dt * f[i];
    for (std::size_t k = 0; k < sys.particles(); ++k) {
        if (sys.is_fixed(k)) continue;
        s.q[2 * k] += dt * s.p[2 * k] / sys.mass;
        s.q[2 * k + 1] += dt * s.p[2 * k + 1] / sys.mass;
    }
    f = mesh_forces(sys, s.q);
    for (std::size_t i = 0; i < s.p.size(); ++i) s.p[i] += 0.5 * dt * f[i];
}

/// Snapshot tensor (4, rows, cols) with channels (qx, qy, px, py).
inline Tensor mesh_snapshot(const SpringMeshSystem& sys, const MeshState& s) {
    const std::size_t n = sys.particles();
    Tensor out(Shape{4, sys.rows, sys.cols});
    for (std::size_t k = 0; k < n; ++k) {
        out[k] = s.q[2 * k];
        out[n + k] = s.q[2 * k + 1];
        out[2 * n + k] = s.p[2 * k];
        out[3 * n + k] = s.p[2 * k + 1];
    }
    return out;
}

inline std::string spring_mesh_id(const SpringMeshSystem& sys) {
    return "spring-mesh-" + std::to_string(sys.rows) + "x" + std::to_string(sys.cols);
}

/// Integrates `steps` leapfrog steps and records every `stride`-th state,
/// starting with the initial one. Returns raw (unnormalized) snapshots
/// shaped (T, 4, rows, cols).
inline Tensor simulate_spring_mesh_raw(const SpringMeshSystem& sys, MeshState state, std::size_t steps,
                                       std::size_t stride) {
    sys.validate();
    if (steps < 1 || stride < 1) throw DomainError("simulate_spring_mesh: steps and stride must be >= 1");
    if (state.q.size() != 2 * sys.particles() || state.p.size() != 2 * sys.particles()) {
        throw ShapeError("simulate_spring_mesh: initial state does not match the grid");
    }
    for (double v : state.q)
        if (!std::isfinite(v)) throw NumericError("simulate_spring_mesh: non-finite initial state");
    for (double v : state.p)
        if (!std::isfinite(v)) throw NumericError("simulate_spring_mesh: non-finite initial state");

    std::vector<Tensor> snaps{mesh_snapshot(sys, state)};
    for (std::size_t step = 1; step <= steps; ++step) {
        leapfrog_step(sys, state, sys.dt);
        for (std::size_t i = 0; i < state.q.size(); ++i) {
            if (!(std::abs(state.q[i]) <= 1e12 && std::abs(state.p[i]) <= 1e12)) {
                throw NumericError("spring mesh integration blew up at step " + std::to_string(step));
            }
        }
        if (step % stride == 0) snaps.push_back(mesh_snapshot(sys, state));
    }
    return stack(snaps);
}

/// Simulates and normalizes. Without `stats` the trajectory is normalized
/// with its own statistics (training split); otherwise with the given ones.
inline Trajectory simulate_spring_mesh(const SpringMeshSystem& sys, const MeshState& initial,
                                       std::size_t steps, std::size_t stride,
                                       const std::optional<Normalization>& stats = std::nullopt) {
    Tensor raw = simulate_spring_mesh_raw(sys, initial, steps, stride);
    Normalization n = stats ? *stats : compute_normalization(std::span<const Tensor>(&raw, 1));
    Trajectory traj{spring_mesh_id(sys), normalize(raw, n), sys.dt * static_cast<double>(stride), n};
    traj.validate();
    return traj;
}

// ---------------------------------------------------------------------------
// Closed-form oracle systems x(s) = Phi(s) x0

enum class OracleKind { linear_scalar, linear_vector, harmonic };

struct OracleSystem {
    OracleKind kind = OracleKind::linear_scalar;
    double rate = 0.0;          // a, for linear_scalar
    Eigen::MatrixXd generator;  // A, for linear_vector
    double frequency = 1.0;     // omega, for harmonic

    static OracleSystem scalar(double a) { return {OracleKind::linear_scalar, a, {}, 1.0}; }
    static OracleSystem vector(Eigen::MatrixXd a) {
        if (a.rows() != a.cols() || a.rows() == 0) throw DomainError("oracle generator must be square");
        return {OracleKind::linear_vector, 0.0, std::move(a), 1.0};
    }
    static OracleSystem harmonic(double omega) {
        if (!(omega > 0.0)) throw DomainError("harmonic frequency must be positive");
        return {OracleKind::harmonic, 0.0, {}, omega};
    }

    /// Exact state at time `s` (any real) starting from `x0` at time 0.
    Tensor advance(const Tensor& x0, double s) const {
        if (!std::isfinite(s)) throw DomainError("oracle time must be finite");
        if (s == 0.0) return x0;
        switch (kind) {
            case OracleKind::linear_scalar: return std::exp(rate * s) * x0;
            case OracleKind::linear_vector: {
                const auto n = generator.rows();
                if (static_cast<Eigen::Index>(x0.numel()) != n) {
                    throw ShapeError("oracle state has " + std::to_string(x0.numel()) +
                                     " entries, generator is " + std::to_string(n) + "x" +
                                     std::to_string(n));
                }
                const Eigen::MatrixXd phi = (generator * s).exp();
                Eigen::Map<const Eigen::VectorXd> x(x0.data().data(), n);
                Eigen::VectorXd y = phi * x;
                return Tensor(x0.shape(), std::vector<double>(y.data(), y.data() + n));
            }
            case OracleKind::harmonic: {
                if (x0.numel() != 2) throw ShapeError("harmonic oracle state is (position, velocity)");
                const double w = frequency, c = std::cos(w * s), sn = std::sin(w * s);
                return Tensor(x0.shape(), std::vector<double>{x0[0] * c + x0[1] * sn / w,
                                                              -x0[0] * w * sn + x0[1] * c});
            }
        }
        throw DomainError("unknown oracle kind");
    }
};

inline Tensor oracle_state(const OracleSystem& sys, const Tensor& x0, double s) {
    return sys.advance(x0, s);
}

// ---------------------------------------------------------------------------
// Training windows

/// Records which snapshot indices each training example touched.
class AccessProbe {
public:
    void record(std::size_t example, std::size_t snapshot) { touched_[example].insert(snapshot); }
    void clear() { touched_.clear(); }
    const std::map<std::size_t, std::set<std::size_t>>& touched() const { return touched_; }

private:
    std::map<std::size_t, std::set<std::size_t>> touched_;
};

/// A (x_t, {x_{t+i}}, x_{t+h}) item that references its trajectory. Snapshot
/// payloads are only materialized through the accessors.
class WindowView {
public:
    WindowView(const Trajectory* traj, std::size_t start, std::size_t horizon, std::size_t id)
        : traj_(traj), start_(start), horizon_(horizon), id_(id) {}

    std::size_t start() const { return start_; }
    std::size_t horizon() const { return horizon_; }
    std::size_t id() const { return id_; }
    const Trajectory& trajectory() const { return *traj_; }

    void attach(AccessProbe* probe) { probe_ = probe; }

    Tensor initial() const { return fetch(start_); }
    Tensor target() const { return fetch(start_ + horizon_); }

    /// x_{t+i} for 0 <= i <= h.
    Tensor at(std::size_t i) const {
        if (i > horizon_) throw DomainError("window offset " + std::to_string(i) + " beyond horizon");
        return fetch(start_ + i);
    }

private:
    Tensor fetch(std::size_t index) const {
        if (probe_) probe_->record(id_, index);
        return traj_->snapshot(index);
    }

    const Trajectory* traj_;
    std::size_t start_;
    std::size_t horizon_;
    std::size_t id_;
    AccessProbe* probe_ = nullptr;
};

/// Every window of length h (l = 1 input snapshot): T - h items.
inline std::vector<WindowView> split_windows(const Trajectory& traj, std::size_t h,
                                             std::size_t first_id = 0) {
    if (h < 1) throw DomainError("split_windows: horizon must be >= 1");
    if (traj.length() < h + 1) {
        throw DomainError("split_windows: trajectory of length " + std::to_string(traj.length()) +
                          " is shorter than horizon + 1 = " + std::to_string(h + 1));
    }
    std::vector<WindowView> out;
    for (std::size_t t = 0; t + h < traj.length(); ++t) out.emplace_back(&traj, t, h, first_id + t);
    return out;
}

inline std::vector<WindowView> split_windows(std::span<const Trajectory> trajs, std::size_t h) {
    std::vector<WindowView> out;
    for (const auto& traj : trajs) {
        auto w = split_windows(traj, h, out.size());
        out.insert(out.end(), w.begin(), w.end());
    }
    return out;
}

}  // namespace dyffuse
