#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "calibrate.hpp"
#include "oracles.hpp"

using namespace ernn;
using namespace ernn::calibrate;

TEST_CASE("observe tracks max-abs") {
    RangeObserver obs;
    std::vector<float> zeros(4, 0.0f);
    obs.observe("t", zeros);
    CHECK(obs.stats().at("t").max_abs == 0.0f);

    std::vector<float> a{-3.0f, 2.0f};
    std::vector<float> b{1.0f};
    obs.observe("t", a);
    obs.observe("t", b);
    CHECK(obs.stats().at("t").max_abs == 3.0f);
    CHECK(obs.stats().at("t").min == -3.0f);
    CHECK(obs.stats().at("t").max == 2.0f);
    CHECK(obs.stats().at("t").count == 3);

    // idempotent for repeated identical vectors
    obs.observe("t", a);
    CHECK(obs.stats().at("t").max_abs == 3.0f);
}

TEST_CASE("observe equals a brute-force max over many vectors") {
    SplitMix64 rng(151);
    RangeObserver obs;
    float global = 0.0f;
    for (int k = 0; k < 1000; ++k) {
        auto v = oracle::random_vector(rng, 1 + int(rng.below(16)), -7.0, 7.0);
        for (float x : v) {
            global = std::max(global, std::fabs(x));
        }
        obs.observe("x", v);
    }
    CHECK(obs.stats().at("x").max_abs == global);
}

TEST_CASE("observe rejects non-finite values naming the tensor") {
    RangeObserver obs;
    std::vector<float> bad{1.0f, INFINITY};
    try {
        obs.observe("enc0.out", bad);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(std::string(e.what()).find("enc0.out") != std::string::npos);
    }
}

TEST_CASE("finalize computes scales and lists missing tensors") {
    RangeObserver obs;
    std::vector<float> v{12.7f, -1.0f};
    obs.observe("a", v);
    std::vector<float> z{0.0f};
    obs.observe("b", z);
    std::vector<float> w{5.0f};
    obs.observe("c", w);

    std::vector<quant::CalibRequirement> req{{"a", 8}, {"b", 8}, {"c", 16}};
    auto scales = finalize(obs, req);
    CHECK(scales.at("a").scale == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(scales.at("b").scale == 1.0f);  // max-abs 0 -> scale 1
    CHECK(scales.at("c").scale == doctest::Approx(5.0 / 32767.0).epsilon(1e-6));

    std::vector<quant::CalibRequirement> more{{"a", 8}, {"missing1", 8}, {"missing2", 16}};
    try {
        finalize(obs, more);
        FAIL("expected error");
    } catch (const Error& e) {
        std::string msg = e.what();
        CHECK(msg.find("missing1") != std::string::npos);
        CHECK(msg.find("missing2") != std::string::npos);
    }
}

TEST_CASE("merge is commutative and associative on finalized scales") {
    SplitMix64 rng(157);
    std::vector<RangeObserver> shards(3);
    std::vector<quant::CalibRequirement> req{{"a", 8}, {"b", 16}};
    for (auto& shard : shards) {
        for (int k = 0; k < 20; ++k) {
            auto va = oracle::random_vector(rng, 8, -4.0, 4.0);
            auto vb = oracle::random_vector(rng, 8, -2.0, 2.0);
            shard.observe("a", va);
            shard.observe("b", vb);
        }
    }
    RangeObserver ab;
    ab.merge(shards[0]);
    ab.merge(shards[1]);
    ab.merge(shards[2]);
    RangeObserver ba;
    ba.merge(shards[2]);
    ba.merge(shards[0]);
    ba.merge(shards[1]);
    auto left = finalize_scales(ab, req);
    auto right = finalize_scales(ba, req);
    CHECK(left == right);
}

TEST_CASE("stats file round-trip") {
    SplitMix64 rng(163);
    RangeObserver obs;
    for (int k = 0; k < 5; ++k) {
        auto v = oracle::random_vector(rng, 6, -3.0, 3.0);
        obs.observe(strformat("tensor%d", k), v);
    }
    std::string path = "/tmp/ernn_test_stats.erns";
    save_stats(obs, path);
    auto loaded = load_stats(path);
    CHECK(loaded.stats().size() == obs.stats().size());
    for (const auto& [id, s] : obs.stats()) {
        const auto& l = loaded.stats().at(id);
        CHECK(l.max_abs == s.max_abs);
        CHECK(l.min == s.min);
        CHECK(l.max == s.max);
        CHECK(l.count == s.count);
    }
    std::remove(path.c_str());
}
