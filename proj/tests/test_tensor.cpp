// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"
#include "support.hpp"

using namespace dyffuse;

TEST_CASE("tensor shape and data agree", "[tensor]") {
    Tensor t(Shape{2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK(Tensor::scalar(4.0).item() == 4.0);
    CHECK_THROWS_AS(t.reshaped(Shape{5}), ShapeError);
    CHECK(t.reshaped(Shape{3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("stack and slice_leading are inverse", "[tensor]") {
    Rng rng(5);
    std::vector<Tensor> items;
    for (int k = 0; k < 4; ++k) items.push_back(standard_normal(Shape{2, 3}, rng));
    const Tensor s = stack(items);
    REQUIRE(s.shape() == Shape{4, 2, 3});
    for (std::size_t k = 0; k < 4; ++k) CHECK(slice_leading(s, k) == items[k]);
    CHECK_THROWS_AS(slice_leading(s, 4), ShapeError);
    items.push_back(Tensor(Shape{3}));
    CHECK_THROWS_AS(stack(items), ShapeError);
}

TEST_CASE("shape errors name the operation and shapes", "[tensor]") {
    try {
        (void)(Tensor(Shape{2}) + Tensor(Shape{3}));
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("(2)") != std::string::npos);
        CHECK(msg.find("(3)") != std::string::npos);
    }
}

TEST_CASE("named substreams are reproducible and distinct", "[tensor]") {
    CHECK(derive_seed(1, "data", 0) == derive_seed(1, "data", 0));
    CHECK(derive_seed(1, "data", 0) != derive_seed(1, "data", 1));
    CHECK(derive_seed(1, "data", 0) != derive_seed(1, "init", 0));
    CHECK(derive_seed(1, "data", 0) != derive_seed(2, "data", 0));
    Rng a = Rng::substream(9, "member", 3), b = Rng::substream(9, "member", 3);
    for (int k = 0; k < 100; ++k) CHECK(a.normal() == b.normal());
}

TEST_CASE("parameter checkpoints round trip bitwise", "[tensor]") {
    Rng rng(2);
    Parameter a("layer.weight", standard_normal(Shape{3, 4}, rng));
    Parameter b("layer.bias", standard_normal(Shape{4}, rng));
    std::vector<const Parameter*> ps{&a, &b};
    std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
    write_params(buf, ps);
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 4) == "DYFP");
    auto back = read_params(buf);
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "layer.weight");
    CHECK(back[0].value == a.value);
    CHECK(back[1].value == b.value);

    Parameter c("layer.weight", Tensor(Shape{3, 4}));
    Parameter d("layer.bias", Tensor(Shape{4}));
    std::vector<Parameter*> targets{&c, &d};
    load_into(targets, back);
    CHECK(params_hash(std::vector<const Parameter*>{&c, &d}) == params_hash(ps));

    Parameter wrong("layer.bias", Tensor(Shape{5}));
    std::vector<Parameter*> bad{&wrong};
    CHECK_THROWS_AS(load_into(bad, back), ShapeError);
    Parameter missing("other", Tensor(Shape{1}));
    std::vector<Parameter*> absent{&missing};
    CHECK_THROWS_AS(load_into(absent, back), FormatError);
}

TEST_CASE("checkpoint readers reject foreign bytes", "[tensor]") {
    std::stringstream junk(std::string("NOPE\x01\x00\x00\x00", 8));
    CHECK_THROWS_AS(read_params(junk), FormatError);
    std::stringstream future(std::string("DYFP\x07\x00\x00\x00", 8));
    CHECK_THROWS_AS(read_params(future), FormatError);
    std::stringstream truncated(std::string("DYFP\x01\x00\x00\x00\x05", 9));
    CHECK_THROWS_AS(read_params(truncated), FormatError);
}
