#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pruning.hpp"

using namespace ernn;
using namespace ernn::pruning;

TEST_CASE("schedule endpoints and midpoint") {
    PruningSchedule s;
    s.initial_sparsity = 0.0;
    s.final_sparsity = 0.5;
    s.start_step = 0;
    s.end_step = 100;
    CHECK(sparsity_at_step(s, 0) == 0.0);
    CHECK(sparsity_at_step(s, -5) == 0.0);
    CHECK(sparsity_at_step(s, 100) == 0.5);
    CHECK(sparsity_at_step(s, 100000) == 0.5);
    // s(50) = 0.5 * (1 - 0.5^3)
    CHECK(sparsity_at_step(s, 50) == doctest::Approx(0.4375).epsilon(1e-12));

    s.initial_sparsity = 0.2;
    s.start_step = 10;
    CHECK(sparsity_at_step(s, 10) == 0.2);
    CHECK(sparsity_at_step(s, 3) == 0.2);
}

TEST_CASE("schedule is monotone and clamped") {
    PruningSchedule s;
    s.initial_sparsity = 0.1;
    s.final_sparsity = 0.8;
    s.start_step = 50;
    s.end_step = 1000;
    double prev = -1.0;
    for (int t = 0; t <= 1200; ++t) {
        double v = sparsity_at_step(s, t);
        CHECK(v >= prev);
        CHECK(v >= s.initial_sparsity);
        CHECK(v <= s.final_sparsity);
        prev = v;
    }
}

TEST_CASE("compute_block_mask extremes and hand-ranked case") {
    Matrix w(32, 2);  // 2x2 grid of 16x1 blocks
    // L1 norms: block (0,0)=3, (0,1)=1, (1,0)=2, (1,1)=4
    w.at(0, 0) = 3.0f;
    w.at(0, 1) = 1.0f;
    w.at(16, 0) = -2.0f;
    w.at(16, 1) = 4.0f;

    auto all = compute_block_mask(w, 0.0, 16, 1);
    CHECK(all.pruned_count() == 0);
    auto none = compute_block_mask(w, 1.0, 16, 1);
    CHECK(none.pruned_count() == 4);

    auto half = compute_block_mask(w, 0.5, 16, 1);
    CHECK(half.pruned_count() == 2);
    CHECK_FALSE(half.at(0, 1));  // norm 1 pruned
    CHECK_FALSE(half.at(1, 0));  // norm 2 pruned
    CHECK(half.at(0, 0));
    CHECK(half.at(1, 1));
}

TEST_CASE("ties prune the earlier block index first") {
    Matrix w(32, 2);
    for (int r = 0; r < 32; ++r) {
        for (int c = 0; c < 2; ++c) {
            w.at(r, c) = 1.0f;  // all four blocks have equal norm
        }
    }
    auto m = compute_block_mask(w, 0.5, 16, 1);
    CHECK_FALSE(m.at(0, 0));
    CHECK_FALSE(m.at(0, 1));
    CHECK(m.at(1, 0));
    CHECK(m.at(1, 1));
}

TEST_CASE("mask equals brute-force oracle on random instances") {
    SplitMix64 rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        int grid_r = 1 + int(rng.below(5));
        int grid_c = 1 + int(rng.below(12));
        Matrix w = oracle::random_matrix(rng, grid_r * 16, grid_c);
        if (trial % 4 == 0) {
            // force ties: round weights to a handful of values
            for (auto& v : w.data) {
                v = std::round(v * 2.0f) / 2.0f;
            }
        }
        double sparsity = rng.uniform();
        auto mask = compute_block_mask(w, sparsity, 16, 1);
        auto ref = oracle::brute_force_mask(w, sparsity, 16, 1);
        CHECK(mask.active == ref);
        // sparsity exactness
        size_t blocks = mask.block_count();
        auto expect = size_t(std::floor(sparsity * double(blocks) + 0.5));
        CHECK(mask.pruned_count() == expect);
    }
}

TEST_CASE("apply_mask and mask_gradients") {
    SplitMix64 rng(43);
    Matrix w = oracle::random_matrix(rng, 32, 3);

    auto all = compute_block_mask(w, 0.0, 16, 1);
    auto eff = apply_mask(w, all, 16, 1);
    CHECK(eff.data == w.data);

    auto none = compute_block_mask(w, 1.0, 16, 1);
    eff = apply_mask(w, none, 16, 1);
    for (float v : eff.data) {
        CHECK(v == 0.0f);
    }

    auto half = compute_block_mask(w, 0.5, 16, 1);
    eff = apply_mask(w, half, 16, 1);
    auto grads = mask_gradients(w, half, 16, 1);
    for (int r = 0; r < 32; ++r) {
        for (int c = 0; c < 3; ++c) {
            float expect = half.at(r / 16, c) ? w.at(r, c) : 0.0f;
            CHECK(eff.at(r, c) == expect);
            CHECK(grads.at(r, c) == expect);
        }
    }

    Matrix wrong(16, 3);
    CHECK_THROWS_AS(apply_mask(wrong, half, 16, 1), Error);
}

TEST_CASE("maybe_update_mask recovery at constant sparsity") {
    // 2 blocks; block 0 starts weak and gets strong while pruned
    Matrix w(32, 1);
    w.at(0, 0) = 1.0f;   // block 0 norm 1
    w.at(16, 0) = 2.0f;  // block 1 norm 2

    PruningSchedule sched;
    sched.initial_sparsity = 0.5;
    sched.final_sparsity = 0.5;
    sched.start_step = 0;
    sched.end_step = 10;
    sched.mask_update_interval = 100;

    auto state = make_state(w, sched, 16, 1);
    CHECK_FALSE(state.mask.at(0, 0));
    CHECK(state.mask.at(1, 0));

    // off-interval step leaves the mask alone
    state.retained.at(0, 0) = 5.0f;
    maybe_update_mask(state, 150);
    CHECK_FALSE(state.mask.at(0, 0));

    // on-interval step past end_step still recomputes at final sparsity
    maybe_update_mask(state, 200);
    CHECK(state.mask.at(0, 0));
    CHECK_FALSE(state.mask.at(1, 0));
    CHECK(state.mask.pruned_count() == 1);

    // retained values survived the pruned period untouched
    CHECK(state.retained.at(16, 0) == 2.0f);
}

TEST_CASE("retention across prune and recover") {
    SplitMix64 rng(47);
    Matrix w = oracle::random_matrix(rng, 48, 2);
    PruningSchedule sched;
    sched.initial_sparsity = 0.5;
    sched.final_sparsity = 0.5;
    sched.end_step = 1;
    sched.mask_update_interval = 10;
    auto state = make_state(w, sched, 16, 1);
    auto snapshot = state.retained.data;
    for (int t = 0; t <= 50; ++t) {
        maybe_update_mask(state, t);
    }
    CHECK(state.retained.data == snapshot);
}
