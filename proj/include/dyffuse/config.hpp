// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` run configuration with a typed schema. Lines starting
// with '#' are comments. Unknown keys and malformed values are errors.

#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dyffuse/baselines.hpp"

namespace dyffuse {

enum class FieldType { integer, real, boolean, text, index_list };

struct FieldSpec {
    std::string key;
    FieldType type;
    std::string fallback;
    std::string doc;
};

/// Every recognized key, in serialization order.
inline const std::vector<FieldSpec>& config_schema() {
    static const std::vector<FieldSpec> schema{
        {"seed", FieldType::integer, "0", "root seed for every random substream"},
        // data
        {"system", FieldType::text, "spring-mesh", "dynamical system"},
        {"rows", FieldType::integer, "4", "mesh rows"},
        {"cols", FieldType::integer, "4", "mesh columns"},
        {"mass", FieldType::real, "1", "particle mass"},
        {"spring_constant", FieldType::real, "1", "spring stiffness"},
        {"rest_length", FieldType::real, "1", "spring natural length"},
        {"dt", FieldType::real, "0.01", "integrator step"},
        {"steps", FieldType::integer, "500", "integrator steps per trajectory"},
        {"stride", FieldType::integer, "10", "integrator steps between snapshots"},
        {"position_sigma", FieldType::real, "0.2", "initial position jitter"},
        {"momentum_sigma", FieldType::real, "0.2", "initial momentum jitter"},
        {"train_trajectories", FieldType::integer, "48", "training trajectories"},
        {"val_trajectories", FieldType::integer, "4", "validation trajectories"},
        {"test_trajectories", FieldType::integer, "4", "test trajectories"},
        // schedule
        {"horizon", FieldType::integer, "8", "training horizon h"},
        {"aux_steps_k", FieldType::integer, "0", "auxiliary steps in (0, 1)"},
        {"inference_keep_indices", FieldType::index_list, "", "schedule indices kept at inference (empty = all)"},
        // networks
        {"forecaster_width", FieldType::integer, "128", "forecaster hidden width"},
        {"interpolator_width", FieldType::integer, "64", "interpolator hidden width"},
        {"hidden_layers", FieldType::integer, "3", "hidden layers per backbone"},
        {"time_features", FieldType::integer, "16", "sinusoidal time features"},
        {"time_dim", FieldType::integer, "32", "time embedding width"},
        {"activation", FieldType::text, "gelu", "gelu, silu or relu"},
        {"interpolator_dropout", FieldType::real, "0.2", "interpolator dropout rate"},
        {"forecaster_dropout", FieldType::real, "0", "forecaster dropout rate (training only)"},
        {"interpolator_inference_dropout", FieldType::boolean, "true", "keep interpolator dropout on while sampling"},
        {"skip", FieldType::boolean, "false", "add the input snapshot to network outputs"},
        {"conditioning", FieldType::text, "none", "forecaster conditioning: none, clean or noised"},
        // optimization
        {"lambda1", FieldType::real, "0.5", "weight of the direct forecast term"},
        {"lambda2", FieldType::real, "0.5", "weight of the look-ahead term"},
        {"lr", FieldType::real, "0.001", "AdamW learning rate"},
        {"beta1", FieldType::real, "0.9", "AdamW beta1"},
        {"beta2", FieldType::real, "0.99", "AdamW beta2"},
        {"weight_decay", FieldType::real, "0.0001", "AdamW decoupled weight decay"},
        {"batch_size", FieldType::integer, "32", "minibatch size"},
        {"epochs", FieldType::integer, "200", "training epochs per stage"},
        {"clip", FieldType::real, "1", "gradient clipping max norm"},
        {"loss_norm", FieldType::text, "l1", "diffusion-model loss: l1 or l2"},
        {"crps_every", FieldType::integer, "40", "Stage 2 validation CRPS period in epochs (0 = off)"},
        {"val_members", FieldType::integer, "20", "validation ensemble size"},
        {"val_crps_windows", FieldType::integer, "16", "validation windows scored by CRPS"},
        // baselines
        {"barebone_width", FieldType::integer, "64", "barebone hidden width"},
        {"barebone_dropout", FieldType::real, "0.2", "barebone dropout rate"},
        {"barebone_loss_norm", FieldType::text, "l2", "barebone loss: l1 or l2"},
        {"perturbation_sigma", FieldType::real, "0.05", "initial-condition perturbation scale"},
        // sampling and evaluation
        {"sampler", FieldType::text, "cold", "cold or naive"},
        {"refine", FieldType::text, "off", "refinement: off, on (overwrite) or fill"},
        {"members", FieldType::integer, "20", "ensemble size"},
        {"eval_windows", FieldType::integer, "32", "test initial conditions scored"},
        {"jobs", FieldType::integer, "1", "worker threads for ensemble members"},
    };
    return schema;
}

inline const FieldSpec& field_spec(const std::string& key) {
    for (const auto& f : config_schema()) {
        if (f.key == key) return f;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline void check_value(const FieldSpec& f, const std::string& v) {
    auto fail = [&] { throw ConfigError("config key '" + f.key + "': invalid value '" + v + "'"); };
    try {
        std::size_t pos = 0;
        switch (f.type) {
            case FieldType::integer:
                if (v.empty() || v[0] == '-') fail();
                std::stoull(v, &pos);
                if (pos != v.size()) fail();
                break;
            case FieldType::real:
                std::stod(v, &pos);
                if (pos != v.size()) fail();
                break;
            case FieldType::boolean:
                if (v != "true" && v != "false") fail();
                break;
            case FieldType::index_list: {
                std::stringstream ss(v);
                std::string tok;
                while (std::getline(ss, tok, ',')) {
                    tok = trim(tok);
                    if (tok.empty() || tok[0] == '-') fail();
                    std::stoull(tok, &pos);
                    if (pos != tok.size()) fail();
                }
                break;
            }
            case FieldType::text:
                if (v.find('\n') != std::string::npos) fail();
                break;
        }
    } catch (const std::logic_error&) {
        fail();
    }
}

}  // namespace detail

class Config {
public:
    Config() {
        for (const auto& f : config_schema()) values_[f.key] = f.fallback;
    }

    static Config parse(const std::string& text) {
        Config c;
        std::stringstream ss(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
            }
            c.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
        }
        return c;
    }

    static Config load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    void set(const std::string& key, const std::string& value) {
        detail::check_value(field_spec(key), value);
        values_[key] = value;
    }

    /// Applies a "key=value" override.
    void apply(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
        set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
    }

    /// DYFFUSE_SEED, when set, replaces the configured seed.
    void apply_environment() {
        if (const char* s = std::getenv("DYFFUSE_SEED")) set("seed", s);
    }

    const std::string& raw(const std::string& key) const {
        field_spec(key);
        return values_.at(key);
    }

    std::uint64_t integer(const std::string& key) const { return std::stoull(typed(key, FieldType::integer)); }
    std::size_t size(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }
    double real(const std::string& key) const { return std::stod(typed(key, FieldType::real)); }
    bool boolean(const std::string& key) const { return typed(key, FieldType::boolean) == "true"; }
    const std::string& text(const std::string& key) const { return typed(key, FieldType::text); }

    std::vector<std::size_t> indices(const std::string& key) const {
        std::vector<std::size_t> out;
        std::stringstream ss(typed(key, FieldType::index_list));
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoul(detail::trim(tok)));
        return out;
    }

    /// Every key in schema order; parse(serialize()) == *this.
    std::string serialize() const {
        std::ostringstream os;
        for (const auto& f : config_schema()) os << f.key << " = " << values_.at(f.key) << '\n';
        return os.str();
    }

    friend bool operator==(const Config& a, const Config& b) { return a.values_ == b.values_; }

private:
    const std::string& typed(const std::string& key, FieldType type) const {
        if (field_spec(key).type != type) throw ConfigError("config key '" + key + "' has a different type");
        return values_.at(key);
    }

    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views

inline SpringMeshSystem mesh_from(const Config& c) {
    if (c.text("system") != "spring-mesh") throw ConfigError("unsupported system '" + c.text("system") + "'");
    SpringMeshSystem sys;
    sys.rows = c.size("rows");
    sys.cols = c.size("cols");
    sys.mass = c.real("mass");
    sys.spring_constant = c.real("spring_constant");
    sys.rest_length = c.real("rest_length");
    sys.dt = c.real("dt");
    sys.validate();
    return sys;
}

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.horizon = c.size("horizon");
    t.aux_steps = c.size("aux_steps_k");
    t.lambda1 = c.real("lambda1");
    t.lambda2 = c.real("lambda2");
    t.conditioning = parse_conditioning(c.text("conditioning"));
    t.optim = {c.real("lr"), c.real("beta1"), c.real("beta2"), c.real("weight_decay"), 1e-8};
    t.batch_size = c.size("batch_size");
    t.epochs = c.size("epochs");
    t.clip = c.real("clip");
    t.norm = parse_norm(c.text("loss_norm"));
    t.seed = c.integer("seed");
    t.crps_every = c.size("crps_every");
    t.val_members = c.size("val_members");
    t.val_crps_windows = c.size("val_crps_windows");
    t.validate();
    return t;
}

inline NetConfig net_config_from(const Config& c, const Shape& snapshot, std::size_t width, double dropout) {
    NetConfig n;
    n.snapshot_shape = snapshot;
    n.horizon = c.size("horizon");
    n.hidden.assign(c.size("hidden_layers"), width);
    n.time_features = c.size("time_features");
    n.time_dim = c.size("time_dim");
    n.activation = parse_activation(c.text("activation"));
    n.dropout.rate = dropout;
    n.skip = c.boolean("skip");
    if (n.hidden.empty()) throw ConfigError("hidden_layers must be >= 1");
    return n;
}

/// The full training schedule, reduced to the kept indices when given.
inline Schedule inference_schedule_from(const Config& c) {
    const Schedule full = make_schedule(c.size("horizon"), c.size("aux_steps_k"));
    const auto keep = c.indices("inference_keep_indices");
    return keep.empty() ? full : subset_schedule(full, keep);
}

}  // namespace dyffuse
