#include "forge/error.hpp"
#include "forge/surgery.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <cstring>

using namespace forge;

namespace {

bool bit_equal(const Mat & a, const Mat & b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

} // namespace

TEST_CASE("plan validation") {
    const auto spec = testing::tiny_spec(12, 16, 2);
    CHECK_THROWS_AS(plan_surgery(spec, 0, 5), Error);
    CHECK_THROWS_AS(plan_surgery(spec, 3, 11), Error);
    CHECK_THROWS_AS(plan_surgery(spec, 7, 6), Error);
    const auto p = plan_surgery(spec, 6, 10);
    CHECK(p.surrogate_layers() == 8);
    CHECK(p.translator_init_layer == 6);
    try {
        plan_surgery(spec, 0, 5);
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::plan);
    }
}

TEST_CASE("surrogate layout for (6, 10) on twelve layers") {
    const auto target = init_model(testing::tiny_spec(12, 16, 2), 3);
    const auto s = build_surrogate(target, plan_surgery(target.spec, 6, 10));
    CHECK(s.model.n_layers() == 8);
    CHECK(s.source_layers == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 11});
    CHECK(target.parameter_count() - s.model.parameter_count() ==
          4 * (target.parameter_count() - init_model(testing::tiny_spec(11, 16, 2), 3).parameter_count()));
    CHECK(bit_equal(s.model.layers[6].wq, target.layers[6].wq));
    CHECK(bit_equal(s.model.layers[7].w_down, target.layers[11].w_down));
    CHECK(trainable_layers(s) == std::vector<bool>{false, false, false, false, false, false, true, false});
    CHECK(frozen_mismatches(s, target).empty());
    CHECK(s.parent_checksum == checksum(target));
}

TEST_CASE("shared prefix hidden states are bit-exact") {
    const auto target = init_model(testing::tiny_spec(8, 16, 2), 5);
    const auto s = build_surrogate(target, plan_surgery(target.spec, 4, 6));
    const std::vector<int> ids = {0, 2, 7, 30, 31, 32, 1, 3, 7, 40};
    const auto a = forward_with_hidden(target, ids);
    const auto b = forward_with_hidden(s.model, ids);
    for (int l = 0; l < 4; ++l) {
        CHECK(bit_equal(a.hidden_states[l], b.hidden_states[l]));
    }
}

TEST_CASE("control variant unfreezes every other layer below the translator") {
    const auto target = init_model(testing::tiny_spec(12, 16, 2), 3);
    const auto plan = plan_surgery(target.spec, 6, 10);
    const auto c = build_control_variant(target, plan);
    CHECK(trainable_layers(c) == std::vector<bool>{true, false, true, false, true, false, true, false});
    const auto s = build_surrogate(target, plan);
    CHECK(checksum(c.model) == checksum(s.model));
    CHECK(c.trainable_keys != s.trainable_keys);
    const auto c5 = build_control_variant(target, plan_surgery(target.spec, 5, 8));
    CHECK(trainable_layers(c5) == std::vector<bool>{false, true, false, true, false, true, false, false, false});
}

TEST_CASE("surrogate layer count formula over random plans") {
    Rng rng(77);
    for (int t = 0; t < 20; ++t) {
        const int L = static_cast<int>(4 + rng.below(12));
        const int a = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - 2)));
        const int b = a + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - 1 - a)));
        CAPTURE(L);
        CAPTURE(a);
        CAPTURE(b);
        const auto target = init_model(testing::tiny_spec(L, 8, 2), static_cast<std::uint64_t>(t));
        const auto s = build_surrogate(target, plan_surgery(target.spec, a, b));
        CHECK(s.model.n_layers() == L - (b - a + 1) + 1);
        CHECK(s.plan.surrogate_layers() == s.model.n_layers());
    }
}

TEST_CASE("frozen mismatches are reported and manifests round trip") {
    const auto target = init_model(testing::tiny_spec(6, 16, 2), 8);
    auto s = build_surrogate(target, plan_surgery(target.spec, 2, 3));
    s.model.layers[2].wq(0, 0) += 1.0f;  // translator: allowed
    CHECK(frozen_mismatches(s, target).empty());
    s.model.layers[1].wk(0, 0) += 1.0f;
    CHECK(frozen_mismatches(s, target) == std::vector<std::string>{"layers.1.wk"});
    const auto back = surrogate_from_manifest(s.model, s.manifest_fields());
    CHECK(back.trainable_keys == s.trainable_keys);
    CHECK(back.source_layers == s.source_layers);
    auto bad = s.manifest_fields();
    bad["source_layers"] = std::vector<int>{0, 1};
    CHECK_THROWS_AS(surrogate_from_manifest(s.model, bad), Error);
    const auto other = init_model(testing::tiny_spec(7, 16, 2), 8);
    CHECK_THROWS_AS(build_surrogate(other, plan_surgery(target.spec, 2, 3)), Error);
}
