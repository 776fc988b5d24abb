// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Time-conditioned perceptron backbones and the three model roles built on
// them: the stochastic interpolator, the deterministic forecaster and the
// barebone multi-step predictor used by the baselines. Also hosts the
// closed-form oracle rules that implement the same interfaces exactly.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dyffuse/autodiff.hpp"
#include "dyffuse/checkpoint.hpp"
#include "dyffuse/dynamics.hpp"

namespace dyffuse {

// ---------------------------------------------------------------------------
// Time embedding

/// [sin(w_j t)]_j ++ [cos(w_j t)]_j with w_j = 10000^(-j / (dim/2 - 1)).
inline std::vector<double> time_embed(double t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) {
        throw DomainError("time_embed: dimension must be even and positive, got " + std::to_string(dim));
    }
    const std::size_t half = dim / 2;
    std::vector<double> out(dim);
    for (std::size_t j = 0; j < half; ++j) {
        const double w = half == 1 ? 1.0
                                   : std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half - 1));
        out[j] = std::sin(w * t);
        out[half + j] = std::cos(w * t);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backbone

enum class Activation { gelu, silu, relu };
enum class Mode { train, inference };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::gelu: return "gelu";
        case Activation::silu: return "silu";
        case Activation::relu: return "relu";
    }
    return "?";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "silu") return Activation::silu;
    if (s == "relu") return Activation::relu;
    throw DomainError("unknown activation '" + s + "'");
}

struct BackboneSpec {
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::vector<std::size_t> hidden{64, 64, 64};
    std::size_t time_features = 16;
    std::size_t time_dim = 32;
    Activation activation = Activation::gelu;
    DropoutSpec dropout;
};

/// Perceptron whose hidden layers are modulated by a learned time embedding:
///   e      = Linear(GeLU(Linear(sincos(t))))
///   h_l    = act(Linear(h_{l-1}) * (1 + scale_l(e)) + shift_l(e)), then dropout
///   output = Linear(h_L)
/// where (scale_l, shift_l) = split(Linear(SiLU(e))).
class Backbone {
public:
    Backbone() = default;

    Backbone(BackboneSpec spec, Rng& init) : spec_(std::move(spec)) {
        validate(spec_.dropout);
        if (spec_.input_dim == 0 || spec_.output_dim == 0 || spec_.hidden.empty()) {
            throw DomainError("backbone: input, output and hidden sizes must be positive");
        }
        add_linear("time.0", spec_.time_features, spec_.time_dim, init);
        add_linear("time.1", spec_.time_dim, spec_.time_dim, init);
        std::size_t prev = spec_.input_dim;
        for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
            add_linear("block" + std::to_string(l) + ".linear", prev, spec_.hidden[l], init);
            add_linear("block" + std::to_string(l) + ".film", spec_.time_dim, 2 * spec_.hidden[l], init);
            prev = spec_.hidden[l];
        }
        add_linear("head", prev, spec_.output_dim, init);
    }

    const BackboneSpec& spec() const { return spec_; }
    DropoutSpec& dropout() { return spec_.dropout; }
    const DropoutSpec& dropout() const { return spec_.dropout; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (const auto& p : params_) out.push_back(&p);
        return out;
    }

    /// Zeroes the output layer so the network outputs exactly 0.
    void zero_head() {
        for (auto& p : params_) {
            if (p.name.rfind("head.", 0) == 0) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
        }
    }

    /// Forward pass with gradients flowing into this backbone's parameters.
    Var forward(Tape& tape, Var input, std::span<const double> times, Mode mode, Rng* rng) {
        return run(*this, tape, input, times, mode, rng,
                   [&tape](Parameter& p) { return tape.param(p); });
    }

    /// Forward pass treating the parameters as constants (frozen model).
    Var forward(Tape& tape, Var input, std::span<const double> times, Mode mode, Rng* rng) const {
        return run(*this, tape, input, times, mode, rng,
                   [&tape](const Parameter& p) { return tape.reference(p.value); });
    }

    bool dropout_active(Mode mode, const Rng* rng) const {
        if (spec_.dropout.rate == 0.0) return false;
        if (mode == Mode::train) return true;
        return spec_.dropout.active_at_inference && rng != nullptr;
    }

private:
    void add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& init) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Tensor w(Shape{in, out}), b(Shape{out});
        for (double& v : w.data()) v = init.uniform(-bound, bound);
        for (double& v : b.data()) v = init.uniform(-bound, bound);
        params_.emplace_back(name + ".weight", std::move(w));
        params_.emplace_back(name + ".bias", std::move(b));
    }

    template <class Self, class Bind>
    static Var run(Self& self, Tape& tape, Var input, std::span<const double> times, Mode mode, Rng* rng,
                   Bind bind) {
        const BackboneSpec& spec = self.spec_;
        const Tensor& x = tape.value(input);
        if (x.rank() != 2 || x.dim(1) != spec.input_dim) {
            throw ShapeError("backbone: expected input (B, " + std::to_string(spec.input_dim) + "), got " +
                             shape_str(x.shape()));
        }
        const std::size_t batch = x.dim(0);
        if (times.size() != batch) {
            throw ShapeError("backbone: " + std::to_string(times.size()) + " times for batch of " +
                             std::to_string(batch));
        }
        const bool drop = self.dropout_active(mode, rng);
        if (mode == Mode::train && spec.dropout.rate > 0.0 && rng == nullptr) {
            throw DomainError("backbone: training with dropout needs a random stream");
        }

        Tensor feats(Shape{batch, spec.time_features});
        for (std::size_t r = 0; r < batch; ++r) {
            auto e = time_embed(times[r], spec.time_features);
            std::copy(e.begin(), e.end(), feats.data().begin() + static_cast<std::ptrdiff_t>(r * spec.time_features));
        }
        auto& P = self.params_;
        std::size_t k = 0;
        auto linear = [&](Var in) {
            Var w = bind(P[k]);
            Var b = bind(P[k + 1]);
            k += 2;
            return ops::affine(tape, in, w, b);
        };

        Var emb = linear(tape.constant(std::move(feats)));
        emb = ops::gelu(tape, emb);
        emb = linear(emb);
        Var emb_act = ops::silu(tape, emb);

        Var h = input;
        for (std::size_t width : spec.hidden) {
            h = linear(h);
            Var film = linear(emb_act);
            Var scale = ops::slice_cols(tape, film, 0, width);
            Var shift = ops::slice_cols(tape, film, width, 2 * width);
            h = ops::scale_shift(tape, h, scale, shift);
            switch (spec.activation) {
                case Activation::gelu: h = ops::gelu(tape, h); break;
                case Activation::silu: h = ops::silu(tape, h); break;
                case Activation::relu: h = ops::relu(tape, h); break;
            }
            if (drop) h = ops::dropout(tape, h, spec.dropout, *rng);
        }
        return linear(h);
    }

    BackboneSpec spec_;
    std::vector<Parameter> params_;
};

/// Rows of snapshots flattened into a (B, D) matrix.
inline Tensor as_batch(std::span<const Tensor> snapshots) {
    if (snapshots.empty()) throw ShapeError("as_batch: empty batch");
    const std::size_t d = snapshots[0].numel();
    Tensor out(Shape{snapshots.size(), d});
    for (std::size_t r = 0; r < snapshots.size(); ++r) {
        if (snapshots[r].numel() != d) throw ShapeError("as_batch: ragged snapshots");
        std::copy(snapshots[r].data().begin(), snapshots[r].data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return out;
}

inline Tensor batch_row(const Tensor& batch, std::size_t r, const Shape& shape) {
    const std::size_t d = batch.dim(1);
    auto first = batch.storage().begin() + static_cast<std::ptrdiff_t>(r * d);
    return Tensor(shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(d)));
}

// ---------------------------------------------------------------------------
// Model roles

struct NetConfig {
    Shape snapshot_shape;
    std::size_t horizon = 1;
    std::vector<std::size_t> hidden{64, 64, 64};
    std::size_t time_features = 16;
    std::size_t time_dim = 32;
    Activation activation = Activation::gelu;
    DropoutSpec dropout;
    /// Adds the primary input snapshot to the network output.
    bool skip = false;
};

namespace detail {

inline void require_snapshot(const char* who, const Shape& expected, const Tensor& x) {
    if (x.shape() != expected) {
        throw ShapeError(std::string(who) + ": expected snapshot " + shape_str(expected) + ", got " +
                         shape_str(x.shape()));
    }
}

inline BackboneSpec backbone_spec(const NetConfig& cfg, std::size_t input_dim, std::size_t output_dim) {
    return {input_dim, output_dim, cfg.hidden, cfg.time_features, cfg.time_dim, cfg.activation, cfg.dropout};
}

}  // namespace detail

/// I(x_t, x_{t+h}, i) ~ x_{t+i}. The two snapshots are concatenated along the
/// feature axis. Stochastic at inference through Monte-Carlo dropout.
class InterpolatorModel {
public:
    InterpolatorModel() = default;
    InterpolatorModel(NetConfig cfg, Rng& init)
        : cfg_(std::move(cfg)),
          dim_(shape_numel(cfg_.snapshot_shape)),
          net_(detail::backbone_spec(cfg_, 2 * dim_, dim_), init) {
        if (cfg_.horizon < 1) throw DomainError("interpolator: horizon must be >= 1");
    }

    const NetConfig& config() const { return cfg_; }
    std::size_t horizon() const { return cfg_.horizon; }
    std::size_t dim() const { return dim_; }
    Backbone& backbone() { return net_; }
    const Backbone& backbone() const { return net_; }

    /// Locks the parameters for Stage 2 and, by default, keeps dropout active
    /// at inference so the frozen model stays stochastic.
    void freeze(bool stochastic = true) {
        frozen_ = true;
        net_.dropout().active_at_inference = stochastic;
    }
    bool frozen() const { return frozen_; }

    void set_inference_dropout(bool on) { net_.dropout().active_at_inference = on; }
    bool stochastic() const { return net_.dropout().rate > 0.0 && net_.dropout().active_at_inference; }

    template <class Self>
    static Var forward_impl(Self& self, Tape& tape, Var x_t, Var x_h, std::span<const double> times, Mode mode,
                            Rng* rng) {
        Var out = self.net_.forward(tape, ops::concat_cols(tape, x_t, x_h), times, mode, rng);
        return self.cfg_.skip ? ops::add(tape, out, x_t) : out;
    }

    Var forward(Tape& tape, Var x_t, Var x_h, std::span<const double> times, Mode mode, Rng* rng) {
        return forward_impl(*this, tape, x_t, x_h, times, mode, rng);
    }
    Var forward(Tape& tape, Var x_t, Var x_h, std::span<const double> times, Mode mode, Rng* rng) const {
        return forward_impl(*this, tape, x_t, x_h, times, mode, rng);
    }

    /// One estimate of x_{t+i}, 0 < i < h. With a stream and inference dropout
    /// enabled this is a random draw; otherwise deterministic.
    Tensor interpolate(const Tensor& x_t, const Tensor& x_h, double i, Rng* rng = nullptr) const {
        detail::require_snapshot("interpolate", cfg_.snapshot_shape, x_t);
        detail::require_snapshot("interpolate", cfg_.snapshot_shape, x_h);
        if (!(i > 0.0 && i < static_cast<double>(cfg_.horizon))) {
            throw DomainError("interpolate: i = " + std::to_string(i) + " outside (0, " +
                              std::to_string(cfg_.horizon) + ")");
        }
        Tape tape;
        const double t[1] = {i};
        Var a = tape.constant(x_t.reshaped(Shape{1, dim_}));
        Var b = tape.constant(x_h.reshaped(Shape{1, dim_}));
        Var y = forward(tape, a, b, t, Mode::inference, rng);
        return tape.value(y).reshaped(cfg_.snapshot_shape);
    }

    std::vector<Parameter*> parameters() { return net_.parameters(); }
    std::vector<const Parameter*> parameters() const { return net_.parameters(); }

private:
    NetConfig cfg_;
    std::size_t dim_ = 0;
    Backbone net_;
    bool frozen_ = false;
};

enum class Conditioning { none, clean, noised };

inline std::string to_string(Conditioning c) {
    switch (c) {
        case Conditioning::none: return "none";
        case Conditioning::clean: return "clean";
        case Conditioning::noised: return "noised";
    }
    return "?";
}

inline Conditioning parse_conditioning(const std::string& s) {
    if (s == "none") return Conditioning::none;
    if (s == "clean") return Conditioning::clean;
    if (s == "noised") return Conditioning::noised;
    throw DomainError("unknown conditioning mode '" + s + "' (expected none, clean or noised)");
}

/// Extra forecaster input c(x_t, n): absent, x_t itself, or
/// (n/(N-1)) x_t + (1 - n/(N-1)) eps with eps ~ N(0, I). A single-step
/// schedule (N = 1) uses weight 1.
inline std::optional<Tensor> make_conditioning(Conditioning mode, const Tensor& x_t, std::size_t n,
                                               std::size_t steps, Rng& rng) {
    if (steps == 0 || n > steps - 1) {
        throw DomainError("make_conditioning: step " + std::to_string(n) + " outside [0, " +
                          std::to_string(steps) + ")");
    }
    switch (mode) {
        case Conditioning::none: return std::nullopt;
        case Conditioning::clean: return x_t;
        case Conditioning::noised: {
            if (n == steps - 1) return x_t;
            const double alpha = static_cast<double>(n) / static_cast<double>(steps - 1);
            Tensor out(x_t.shape());
            for (std::size_t k = 0; k < x_t.numel(); ++k) out[k] = alpha * x_t[k] + (1.0 - alpha) * rng.normal();
            return out;
        }
    }
    throw DomainError("make_conditioning: invalid mode");
}

/// F(x, i_n[, c]) ~ x_{t+h}. Deterministic at inference.
class ForecasterModel {
public:
    ForecasterModel() = default;
    ForecasterModel(NetConfig cfg, Conditioning conditioning, Rng& init)
        : cfg_(std::move(cfg)),
          conditioning_(conditioning),
          dim_(shape_numel(cfg_.snapshot_shape)),
          net_(detail::backbone_spec(cfg_, conditioning == Conditioning::none ? dim_ : 2 * dim_, dim_), init) {
        net_.dropout().active_at_inference = false;
    }

    const NetConfig& config() const { return cfg_; }
    Conditioning conditioning() const { return conditioning_; }
    std::size_t horizon() const { return cfg_.horizon; }
    std::size_t dim() const { return dim_; }
    Backbone& backbone() { return net_; }
    const Backbone& backbone() const { return net_; }

    template <class Self>
    static Var forward_impl(Self& self, Tape& tape, Var x, std::optional<Var> cond, std::span<const double> times,
                            Mode mode, Rng* rng) {
        if ((self.conditioning_ == Conditioning::none) != !cond.has_value()) {
            throw DomainError("forecaster: conditioning input does not match mode " + to_string(self.conditioning_));
        }
        Var in = cond ? ops::concat_cols(tape, x, *cond) : x;
        Var out = self.net_.forward(tape, in, times, mode, mode == Mode::train ? rng : nullptr);
        return self.cfg_.skip ? ops::add(tape, out, x) : out;
    }

    Var forward(Tape& tape, Var x, std::optional<Var> cond, std::span<const double> times, Mode mode, Rng* rng) {
        return forward_impl(*this, tape, x, cond, times, mode, rng);
    }
    Var forward(Tape& tape, Var x, std::optional<Var> cond, std::span<const double> times, Mode mode,
                Rng* rng) const {
        return forward_impl(*this, tape, x, cond, times, mode, rng);
    }

    Tensor forecast(const Tensor& x, double s, const std::optional<Tensor>& cond = std::nullopt) const {
        detail::require_snapshot("forecast", cfg_.snapshot_shape, x);
        if (!(s >= 0.0 && s < static_cast<double>(cfg_.horizon))) {
            throw DomainError("forecast: i_n = " + std::to_string(s) + " outside [0, " +
                              std::to_string(cfg_.horizon) + ")");
        }
        Tape tape;
        const double t[1] = {s};
        Var a = tape.constant(x.reshaped(Shape{1, dim_}));
        std::optional<Var> c;
        if (cond) {
            detail::require_snapshot("forecast conditioning", cfg_.snapshot_shape, *cond);
            c = tape.constant(cond->reshaped(Shape{1, dim_}));
        }
        Var y = forward(tape, a, c, t, Mode::inference, nullptr);
        return tape.value(y).reshaped(cfg_.snapshot_shape);
    }

    std::vector<Parameter*> parameters() { return net_.parameters(); }
    std::vector<const Parameter*> parameters() const { return net_.parameters(); }

private:
    NetConfig cfg_;
    Conditioning conditioning_ = Conditioning::none;
    std::size_t dim_ = 0;
    Backbone net_;
};

/// Time-conditioned multi-step predictor F(x_t, i) ~ x_{t+i}, i in [1, h].
class BarebonePredictor {
public:
    BarebonePredictor() = default;
    BarebonePredictor(NetConfig cfg, Rng& init)
        : cfg_(std::move(cfg)), dim_(shape_numel(cfg_.snapshot_shape)), net_(detail::backbone_spec(cfg_, dim_, dim_), init) {
        if (cfg_.horizon < 1) throw DomainError("barebone: horizon must be >= 1");
    }

    const NetConfig& config() const { return cfg_; }
    std::size_t horizon() const { return cfg_.horizon; }
    std::size_t dim() const { return dim_; }
    Backbone& backbone() { return net_; }
    const Backbone& backbone() const { return net_; }
    void set_inference_dropout(bool on) { net_.dropout().active_at_inference = on; }

    template <class Self>
    static Var forward_impl(Self& self, Tape& tape, Var x, std::span<const double> times, Mode mode, Rng* rng) {
        Var out = self.net_.forward(tape, x, times, mode, rng);
        return self.cfg_.skip ? ops::add(tape, out, x) : out;
    }
    Var forward(Tape& tape, Var x, std::span<const double> times, Mode mode, Rng* rng) {
        return forward_impl(*this, tape, x, times, mode, rng);
    }
    Var forward(Tape& tape, Var x, std::span<const double> times, Mode mode, Rng* rng) const {
        return forward_impl(*this, tape, x, times, mode, rng);
    }

    Tensor predict(const Tensor& x_t, double i, Rng* rng = nullptr) const {
        detail::require_snapshot("predict", cfg_.snapshot_shape, x_t);
        Tape tape;
        const double t[1] = {i};
        Var a = tape.constant(x_t.reshaped(Shape{1, dim_}));
        Var y = forward(tape, a, t, Mode::inference, rng);
        return tape.value(y).reshaped(cfg_.snapshot_shape);
    }

    std::vector<Parameter*> parameters() { return net_.parameters(); }
    std::vector<const Parameter*> parameters() const { return net_.parameters(); }

private:
    NetConfig cfg_;
    std::size_t dim_ = 0;
    Backbone net_;
};

// ---------------------------------------------------------------------------
// Closed-form rules over an OracleSystem

/// (1 - i/h) x(i | x_t) + (i/h) x(i | x_{t+h}) + bias, where x(i | y) propagates
/// y exactly to time i. Exact on true trajectories when bias = 0; at i = 0 it
/// returns x_t (+ bias).
struct OracleInterpolatorRule {
    OracleSystem system;
    double horizon = 1.0;
    double bias = 0.0;

    Tensor operator()(const Tensor& x_t, const Tensor& x_h, double i) const {
        const double w = i / horizon;
        Tensor from_start = system.advance(x_t, i);
        Tensor from_end = system.advance(x_h, i - horizon);
        Tensor out(x_t.shape());
        for (std::size_t k = 0; k < out.numel(); ++k) {
            out[k] = (1.0 - w) * from_start[k] + w * from_end[k] + bias;
        }
        return out;
    }
};

/// x(h | x at time s) * (1 + eps sin(s)); eps = 0 gives the exact forecaster.
struct OracleForecasterRule {
    OracleSystem system;
    double horizon = 1.0;
    double eps = 0.0;

    Tensor operator()(const Tensor& x, double s) const {
        Tensor y = system.advance(x, horizon - s);
        if (eps != 0.0) y = (1.0 + eps * std::sin(s)) * y;
        return y;
    }
};

struct OracleModelPair {
    OracleInterpolatorRule interpolator;
    OracleForecasterRule forecaster;

    static OracleModelPair exact(const OracleSystem& sys, double horizon) {
        return {{sys, horizon, 0.0}, {sys, horizon, 0.0}};
    }
};

// ---------------------------------------------------------------------------
// Model files: DYFP parameters at `path`, key-value metadata at `path.meta`.

using ModelMeta = std::map<std::string, std::string>;

inline std::filesystem::path meta_path(const std::filesystem::path& p) {
    return p.string() + ".meta";
}

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoul(tok));
    }
    return out;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline ModelMeta net_meta(const std::string& kind, const NetConfig& cfg) {
    return {{"kind", kind},
            {"horizon", std::to_string(cfg.horizon)},
            {"snapshot_shape", join_sizes(cfg.snapshot_shape)},
            {"hidden", join_sizes(cfg.hidden)},
            {"time_features", std::to_string(cfg.time_features)},
            {"time_dim", std::to_string(cfg.time_dim)},
            {"time_input", "raw"},
            {"activation", to_string(cfg.activation)},
            {"dropout_rate", format_double(cfg.dropout.rate)},
            {"dropout_at_inference", cfg.dropout.active_at_inference ? "true" : "false"},
            {"skip", cfg.skip ? "true" : "false"}};
}

inline const std::string& meta_get(const ModelMeta& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw FormatError("model metadata is missing key '" + key + "'");
    return it->second;
}

inline NetConfig net_config_from(const ModelMeta& m) {
    NetConfig cfg;
    cfg.horizon = std::stoul(meta_get(m, "horizon"));
    cfg.snapshot_shape = split_sizes(meta_get(m, "snapshot_shape"));
    cfg.hidden = split_sizes(meta_get(m, "hidden"));
    cfg.time_features = std::stoul(meta_get(m, "time_features"));
    cfg.time_dim = std::stoul(meta_get(m, "time_dim"));
    cfg.activation = parse_activation(meta_get(m, "activation"));
    cfg.dropout.rate = std::stod(meta_get(m, "dropout_rate"));
    cfg.dropout.active_at_inference = meta_get(m, "dropout_at_inference") == "true";
    cfg.skip = meta_get(m, "skip") == "true";
    return cfg;
}

}  // namespace detail

inline void write_meta(const std::filesystem::path& path, const ModelMeta& meta) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    for (const auto& [k, v] : meta) out << k << " = " << v << '\n';
}

inline ModelMeta read_meta(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read " + path.string());
    ModelMeta meta;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw FormatError("bad metadata line: " + line);
        meta[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return meta;
}

inline ModelMeta model_meta(const InterpolatorModel& m) { return detail::net_meta("interpolator", m.config()); }
inline ModelMeta model_meta(const BarebonePredictor& m) { return detail::net_meta("barebone", m.config()); }
inline ModelMeta model_meta(const ForecasterModel& m) {
    auto meta = detail::net_meta("forecaster", m.config());
    meta["conditioning"] = to_string(m.conditioning());
    return meta;
}

template <class Model>
void save_model(const std::filesystem::path& path, const Model& model, ModelMeta extra = {}) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto params = model.parameters();
    save_params_file(path, params);
    ModelMeta meta = model_meta(model);
    meta.insert(extra.begin(), extra.end());
    write_meta(meta_path(path), meta);
}

namespace detail {

template <class Model>
Model finish_load(Model model, const std::filesystem::path& path) {
    auto params = model.parameters();
    load_into(params, load_params_file(path));
    return model;
}

inline ModelMeta expect_kind(const std::filesystem::path& path, const std::string& kind) {
    ModelMeta meta = read_meta(meta_path(path));
    if (meta_get(meta, "kind") != kind) {
        throw FormatError(path.string() + " holds a " + meta_get(meta, "kind") + ", expected " + kind);
    }
    return meta;
}

}  // namespace detail

inline InterpolatorModel load_interpolator(const std::filesystem::path& path) {
    auto meta = detail::expect_kind(path, "interpolator");
    Rng unused(0);
    return detail::finish_load(InterpolatorModel(detail::net_config_from(meta), unused), path);
}

inline ForecasterModel load_forecaster(const std::filesystem::path& path) {
    auto meta = detail::expect_kind(path, "forecaster");
    Rng unused(0);
    return detail::finish_load(
        ForecasterModel(detail::net_config_from(meta), parse_conditioning(detail::meta_get(meta, "conditioning")), unused),
        path);
}

inline BarebonePredictor load_barebone(const std::filesystem::path& path) {
    auto meta = detail::expect_kind(path, "barebone");
    Rng unused(0);
    return detail::finish_load(BarebonePredictor(detail::net_config_from(meta), unused), path);
}

}  // namespace dyffuse
