#pragma once

#include <cstdint>
#include <vector>

#include "common.hpp"

namespace ernn::pruning {

// Polynomial sparsity ramp: s(t) climbs from initial_sparsity at start_step
// to final_sparsity at end_step and stays there. The mask is recomputed
// every mask_update_interval steps, also after end_step so blocks pruned
// early can still be recovered.
struct PruningSchedule {
    double initial_sparsity = 0.0;
    double final_sparsity = 0.5;
    int64_t start_step = 0;
    int64_t end_step = 100000;
    int64_t mask_update_interval = 1000;
    int exponent = 3;
};

double sparsity_at_step(const PruningSchedule& sched, int64_t t);

// Boolean mask over the block grid; true = block active.
struct BlockMask {
    int grid_rows = 0;
    int grid_cols = 0;
    std::vector<uint8_t> active;

    bool at(int br, int bc) const { return active[static_cast<size_t>(br) * grid_cols + bc] != 0; }
    size_t block_count() const { return active.size(); }
    size_t pruned_count() const;
    double sparsity() const;
};

// Retained weights are never zeroed; pruning only flips mask bits, so a
// block recovered later re-enters with the values it had when pruned.
struct PruningState {
    Matrix retained;
    BlockMask mask;
    int64_t step = 0;
    PruningSchedule schedule;
    int block_rows = 16;
    int block_cols = 1;
};

PruningState make_state(Matrix retained, PruningSchedule sched, int block_rows, int block_cols);

// Ranks blocks by L1 norm of retained values and masks off the
// round(sparsity * #blocks) lowest; ties prune the earlier
// (block_row, block_col) first. Deterministic.
BlockMask compute_block_mask(const Matrix& retained, double sparsity, int block_rows,
                             int block_cols);

// retained with pruned blocks read as exact zeros; retained is untouched.
Matrix apply_mask(const PruningState& state);
Matrix apply_mask(const Matrix& retained, const BlockMask& mask, int block_rows, int block_cols);

// Zeroes gradient entries of pruned blocks.
Matrix mask_gradients(const Matrix& grad, const BlockMask& mask, int block_rows, int block_cols);

// Recomputes the mask from retained values when t lands on the update
// interval; otherwise only advances the step counter.
void maybe_update_mask(PruningState& state, int64_t t);

}  // namespace ernn::pruning
