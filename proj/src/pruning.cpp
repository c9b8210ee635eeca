#include "pruning.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace ernn::pruning {

double sparsity_at_step(const PruningSchedule& sched, int64_t t) {
    if (t <= sched.start_step) {
        return sched.initial_sparsity;
    }
    if (t >= sched.end_step) {
        return sched.final_sparsity;
    }
    double progress = static_cast<double>(t - sched.start_step) /
                      static_cast<double>(sched.end_step - sched.start_step);
    double s = sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) *
                                          std::pow(1.0 - progress, sched.exponent);
    return std::clamp(s, sched.initial_sparsity, sched.final_sparsity);
}

size_t BlockMask::pruned_count() const {
    size_t n = 0;
    for (uint8_t a : active) {
        n += (a == 0);
    }
    return n;
}

double BlockMask::sparsity() const {
    return active.empty() ? 0.0 : static_cast<double>(pruned_count()) / active.size();
}

static void check_grid(const Matrix& m, int block_rows, int block_cols) {
    if (block_rows <= 0 || block_cols <= 0 || m.rows % block_rows != 0 ||
        m.cols % block_cols != 0) {
        fail(ErrorKind::invalid_argument,
             strformat("matrix %dx%d not divisible by block shape %dx%d", m.rows, m.cols,
                       block_rows, block_cols));
    }
}

BlockMask compute_block_mask(const Matrix& retained, double sparsity, int block_rows,
                             int block_cols) {
    check_grid(retained, block_rows, block_cols);
    if (sparsity < 0.0 || sparsity > 1.0) {
        fail(ErrorKind::invalid_argument, strformat("sparsity %g outside [0, 1]", sparsity));
    }
    BlockMask mask;
    mask.grid_rows = retained.rows / block_rows;
    mask.grid_cols = retained.cols / block_cols;
    mask.active.assign(static_cast<size_t>(mask.grid_rows) * mask.grid_cols, 1);

    size_t n_blocks = mask.active.size();
    auto n_prune = static_cast<size_t>(std::floor(sparsity * static_cast<double>(n_blocks) + 0.5));
    if (n_prune == 0) {
        return mask;
    }

    struct Scored {
        double norm;
        int br;
        int bc;
    };
    std::vector<Scored> scores;
    scores.reserve(n_blocks);
    for (int br = 0; br < mask.grid_rows; ++br) {
        for (int bc = 0; bc < mask.grid_cols; ++bc) {
            double norm = 0.0;
            for (int i = 0; i < block_rows; ++i) {
                const float* row = retained.data.data() +
                                   static_cast<size_t>(br * block_rows + i) * retained.cols +
                                   static_cast<size_t>(bc) * block_cols;
                for (int j = 0; j < block_cols; ++j) {
                    norm += std::fabs(static_cast<double>(row[j]));
                }
            }
            scores.push_back({norm, br, bc});
        }
    }
    auto lowest_first = [](const Scored& a, const Scored& b) {
        return std::tie(a.norm, a.br, a.bc) < std::tie(b.norm, b.br, b.bc);
    };
    std::nth_element(scores.begin(), scores.begin() + (n_prune - 1), scores.end(), lowest_first);
    std::sort(scores.begin(), scores.begin() + n_prune, lowest_first);
    for (size_t k = 0; k < n_prune; ++k) {
        mask.active[static_cast<size_t>(scores[k].br) * mask.grid_cols + scores[k].bc] = 0;
    }
    return mask;
}

PruningState make_state(Matrix retained, PruningSchedule sched, int block_rows, int block_cols) {
    check_grid(retained, block_rows, block_cols);
    PruningState state;
    state.mask = compute_block_mask(retained, sparsity_at_step(sched, 0), block_rows, block_cols);
    state.retained = std::move(retained);
    state.schedule = sched;
    state.block_rows = block_rows;
    state.block_cols = block_cols;
    state.step = 0;
    return state;
}

Matrix apply_mask(const Matrix& retained, const BlockMask& mask, int block_rows, int block_cols) {
    check_grid(retained, block_rows, block_cols);
    if (mask.grid_rows != retained.rows / block_rows ||
        mask.grid_cols != retained.cols / block_cols) {
        fail(ErrorKind::invalid_argument,
             strformat("mask grid %dx%d does not match matrix grid %dx%d", mask.grid_rows,
                       mask.grid_cols, retained.rows / block_rows, retained.cols / block_cols));
    }
    Matrix out(retained.rows, retained.cols);
    for (int r = 0; r < retained.rows; ++r) {
        int br = r / block_rows;
        for (int c = 0; c < retained.cols; ++c) {
            out.at(r, c) = mask.at(br, c / block_cols) ? retained.at(r, c) : 0.0f;
        }
    }
    return out;
}

Matrix apply_mask(const PruningState& state) {
    return apply_mask(state.retained, state.mask, state.block_rows, state.block_cols);
}

Matrix mask_gradients(const Matrix& grad, const BlockMask& mask, int block_rows, int block_cols) {
    return apply_mask(grad, mask, block_rows, block_cols);
}

void maybe_update_mask(PruningState& state, int64_t t) {
    if (t < state.step) {
        fail(ErrorKind::invalid_argument,
             strformat("pruning step going backwards: %lld < %lld", static_cast<long long>(t),
                       static_cast<long long>(state.step)));
    }
    state.step = t;
    if (t % state.schedule.mask_update_interval != 0) {
        return;
    }
    double s = sparsity_at_step(state.schedule, t);
    state.mask = compute_block_mask(state.retained, s, state.block_rows, state.block_cols);
}

}  // namespace ernn::pruning
