#pragma once

#include <cstdint>
#include <vector>

#include "cells.hpp"
#include "pruning.hpp"

namespace ernn::train {

// Small LSTM trained on a synthetic delayed-echo task with gradual block
// pruning on its W and R matrices. Exercises the schedule, gradient
// masking, and recovery; not a production trainer.
struct DemoTrainConfig {
    int input_width = 4;
    int hidden = 32;      // <= 64
    int seq_len = 24;
    int delay = 2;
    int steps = 1200;
    double learning_rate = 0.2;
    pruning::PruningSchedule schedule;  // applied to every W/R matrix
    int block_rows = 16;
    int block_cols = 1;
    uint64_t seed = 1;
    int log_interval = 100;

    DemoTrainConfig() {
        schedule.initial_sparsity = 0.0;
        schedule.final_sparsity = 0.5;
        schedule.start_step = 100;
        schedule.end_step = 800;
        schedule.mask_update_interval = 50;
    }
};

struct DemoTrainLogEntry {
    int64_t step = 0;
    double loss = 0.0;            // training batch loss
    double eval_loss = 0.0;       // fixed held-out batch
    double mask_sparsity = 0.0;
    int64_t mask_churn = 0;       // flips since the previous update
    int64_t recovered_blocks = 0; // pruned -> active flips since previous update
};

struct DemoTrainResult {
    std::vector<DemoTrainLogEntry> log;
    double first_eval_loss = 0.0;  // before training
    double final_eval_loss = 0.0;  // after the last step, same eval batch
    double final_sparsity = 0.0;
    int64_t total_recovered = 0;
    int64_t steps = 0;
};

DemoTrainResult demo_train(const DemoTrainConfig& config);

}  // namespace ernn::train
