// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"
#include "support.hpp"

#include <cstdlib>

using namespace dyffuse;
using namespace dyffuse::testing;

namespace {

std::filesystem::path committed_config() {
    return std::filesystem::path(DYFFUSE_SOURCE_DIR) / "configs" / "desk_spring_mesh.cfg";
}

}  // namespace

TEST_CASE("the committed config loads and matches the defaults", "[config]") {
    const Config c = Config::load(committed_config());
    CHECK(c == Config());
    CHECK(c.size("horizon") == 8);
    CHECK(c.size("forecaster_width") == 128);
    CHECK(c.size("interpolator_width") == 64);
    CHECK(c.boolean("interpolator_inference_dropout"));
    CHECK(c.indices("inference_keep_indices").empty());

    const TrainConfig t = train_config_from(c);
    CHECK(t.lambda1 == 0.5);
    CHECK(t.lambda2 == 0.5);
    CHECK(t.norm == Norm::l1);
    CHECK(t.optim.lr == 1e-3);
    const SpringMeshSystem sys = mesh_from(c);
    CHECK(sys.particles() == 16);
    CHECK(inference_schedule_from(c).size() == 8);
}

TEST_CASE("serialize round trips", "[config]") {
    Config c;
    c.set("horizon", "16");
    c.set("inference_keep_indices", "0, 2, 5");
    c.apply("lr=0.0005");
    c.apply(" conditioning = noised ");
    const Config back = Config::parse(c.serialize());
    CHECK(back == c);
    CHECK(back.real("lr") == 5e-4);
    CHECK(back.indices("inference_keep_indices") == std::vector<std::size_t>{0, 2, 5});
    CHECK(back.text("conditioning") == "noised");
}

TEST_CASE("invalid configs are rejected", "[config]") {
    Config c;
    CHECK_THROWS_AS(c.set("horizn", "8"), ConfigError);
    CHECK_THROWS_AS(c.set("horizon", "-1"), ConfigError);
    CHECK_THROWS_AS(c.set("horizon", "8.5"), ConfigError);
    CHECK_THROWS_AS(c.set("lr", "fast"), ConfigError);
    CHECK_THROWS_AS(c.set("skip", "yes"), ConfigError);
    CHECK_THROWS_AS(c.set("inference_keep_indices", "0,,2"), ConfigError);
    CHECK_THROWS_AS(c.apply("horizon"), ConfigError);
    CHECK_THROWS_AS(c.text("horizon"), ConfigError);
    CHECK_THROWS_AS(Config::parse("horizon 8\n"), ConfigError);
    CHECK_THROWS_AS(Config::load("/nonexistent/x.cfg"), ConfigError);
    try {
        (void)Config::parse("# comment\n\nhorizon = 8\nbogus = 1\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("bogus") != std::string::npos);
    }
    c.set("lambda1", "0");
    c.set("lambda2", "0");
    CHECK_THROWS_AS(train_config_from(c), ConfigError);
    Config s;
    s.set("system", "pendulum");
    CHECK_THROWS_AS(mesh_from(s), ConfigError);
}

TEST_CASE("DYFFUSE_SEED overrides the seed", "[config]") {
    Config c;
    ::setenv("DYFFUSE_SEED", "123", 1);
    c.apply_environment();
    ::unsetenv("DYFFUSE_SEED");
    CHECK(c.integer("seed") == 123);
    Config d;
    d.apply_environment();
    CHECK(d.integer("seed") == 0);
}
