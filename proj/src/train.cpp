#include "train.hpp"

#include <cmath>

namespace ernn::train {

using cells::CellState;
using cells::LstmStepCache;
using cells::LstmWeights;
using pruning::BlockMask;
using pruning::PruningState;

namespace {

struct PrunedMatrix {
    PruningState state;

    PrunedMatrix(Matrix retained, const pruning::PruningSchedule& sched, int br, int bc)
        : state(pruning::make_state(std::move(retained), sched, br, bc)) {}

    Matrix effective() const { return pruning::apply_mask(state); }

    void sgd(const Matrix& grad, double lr, int br, int bc) {
        Matrix masked = pruning::mask_gradients(grad, state.mask, br, bc);
        for (size_t k = 0; k < masked.data.size(); ++k) {
            state.retained.data[k] -= static_cast<float>(lr * masked.data[k]);
        }
    }
};

Matrix random_weights(SplitMix64& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (auto& v : m.data) {
        v = static_cast<float>(rng.uniform(-scale, scale));
    }
    return m;
}

}  // namespace

DemoTrainResult demo_train(const DemoTrainConfig& cfg) {
    if (cfg.hidden <= 0 || cfg.hidden > 64) {
        fail(ErrorKind::invalid_argument,
             strformat("demo trainer supports up to 64 hidden units, got %d", cfg.hidden));
    }
    if (cfg.hidden % cfg.block_rows != 0) {
        fail(ErrorKind::invalid_argument,
             strformat("hidden width %d not divisible by block rows %d", cfg.hidden,
                       cfg.block_rows));
    }
    SplitMix64 rng(cfg.seed);
    int in = cfg.input_width, h = cfg.hidden, out = cfg.input_width;
    double init = 0.6 / std::sqrt(double(h));

    // prunable set: the eight W/R matrices; projection and biases stay dense
    std::vector<PrunedMatrix> W, R;
    for (int g = 0; g < 4; ++g) {
        W.emplace_back(random_weights(rng, h, in, init), cfg.schedule, cfg.block_rows,
                       cfg.block_cols);
        R.emplace_back(random_weights(rng, h, out, init), cfg.schedule, cfg.block_rows,
                       cfg.block_cols);
    }
    Matrix proj = random_weights(rng, out, h, init);
    std::vector<std::vector<float>> biases(4, std::vector<float>(h, 0.0f));
    biases[1].assign(h, 1.0f);  // forget gate starts open

    auto assemble = [&]() {
        LstmWeights w;
        w.W_i = W[0].effective();
        w.W_f = W[1].effective();
        w.W_z = W[2].effective();
        w.W_o = W[3].effective();
        w.R_i = R[0].effective();
        w.R_f = R[1].effective();
        w.R_z = R[2].effective();
        w.R_o = R[3].effective();
        w.b_i = biases[0];
        w.b_f = biases[1];
        w.b_z = biases[2];
        w.b_o = biases[3];
        w.W_proj = proj;
        return w;
    };

    auto mask_stats = [&](const std::vector<BlockMask>& before) {
        int64_t churn = 0, recovered = 0;
        for (int g = 0; g < 8; ++g) {
            const auto& now = (g < 4 ? W[g] : R[g - 4]).state.mask;
            const auto& old = before[g];
            for (size_t k = 0; k < now.active.size(); ++k) {
                if (now.active[k] != old.active[k]) {
                    ++churn;
                    if (now.active[k]) {
                        ++recovered;
                    }
                }
            }
        }
        return std::pair<int64_t, int64_t>(churn, recovered);
    };
    auto current_sparsity = [&]() {
        size_t pruned = 0, total = 0;
        for (int g = 0; g < 8; ++g) {
            const auto& mask = (g < 4 ? W[g] : R[g - 4]).state.mask;
            pruned += mask.pruned_count();
            total += mask.block_count();
        }
        return total == 0 ? 0.0 : double(pruned) / double(total);
    };

    // delayed-echo task: predict x[t - delay]
    auto make_sequence = [&](SplitMix64& gen, std::vector<std::vector<float>>& inputs,
                             std::vector<std::vector<float>>& targets) {
        inputs.assign(cfg.seq_len, std::vector<float>(in));
        for (int t = 0; t < cfg.seq_len; ++t) {
            for (auto& v : inputs[t]) {
                v = static_cast<float>(gen.uniform(-1.0, 1.0));
            }
        }
        targets.resize(cfg.seq_len);
        for (int t = 0; t < cfg.seq_len; ++t) {
            targets[t] = t >= cfg.delay ? inputs[t - cfg.delay] : std::vector<float>(in, 0.0f);
        }
    };

    std::vector<std::vector<float>> eval_inputs, eval_targets;
    {
        SplitMix64 eval_rng(cfg.seed ^ 0x5eed5eedull);
        make_sequence(eval_rng, eval_inputs, eval_targets);
    }
    auto eval_loss = [&]() {
        LstmWeights w = assemble();
        CellState state = cells::zero_state(h, out);
        double loss = 0.0;
        double norm = 1.0 / (double(cfg.seq_len) * out);
        for (int t = 0; t < cfg.seq_len; ++t) {
            auto r = cells::lstm_step(w, eval_inputs[t], state);
            state = std::move(r.state);
            for (int k = 0; k < out; ++k) {
                double diff = double(r.h[k]) - eval_targets[t][k];
                loss += diff * diff * norm;
            }
        }
        return loss;
    };

    DemoTrainResult result;
    result.first_eval_loss = eval_loss();
    for (int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<float>> inputs, targets;
        make_sequence(rng, inputs, targets);

        LstmWeights w = assemble();
        CellState state = cells::zero_state(h, out);
        std::vector<LstmStepCache> caches(cfg.seq_len);
        std::vector<std::vector<float>> outputs(cfg.seq_len);
        for (int t = 0; t < cfg.seq_len; ++t) {
            auto r = cells::lstm_step(w, inputs[t], state, &caches[t]);
            state = std::move(r.state);
            outputs[t] = std::move(r.h);
        }

        double loss = 0.0;
        std::vector<std::vector<float>> dh(cfg.seq_len, std::vector<float>(out));
        double norm = 1.0 / (double(cfg.seq_len) * out);
        for (int t = 0; t < cfg.seq_len; ++t) {
            for (int k = 0; k < out; ++k) {
                double diff = double(outputs[t][k]) - targets[t][k];
                loss += diff * diff * norm;
                dh[t][k] = static_cast<float>(2.0 * diff * norm);
            }
        }
        if (!std::isfinite(loss)) {
            fail(ErrorKind::numeric,
                 strformat("training diverged at step %lld (non-finite loss)",
                           static_cast<long long>(step)));
        }

        // backprop through time
        Matrix gW[4], gR[4], gproj;
        std::vector<std::vector<float>> gb(4, std::vector<float>(h, 0.0f));
        std::vector<float> dh_next(out, 0.0f), dc_next(h, 0.0f);
        for (int t = cfg.seq_len - 1; t >= 0; --t) {
            std::vector<float> dht(out);
            for (int k = 0; k < out; ++k) {
                dht[k] = dh[t][k] + dh_next[k];
            }
            auto g = cells::lstm_step_backward(w, caches[t], dht, dc_next);
            dh_next = std::move(g.dh_prev);
            dc_next = std::move(g.dc_prev);
            Matrix* gws[4] = {&g.dW_i, &g.dW_f, &g.dW_z, &g.dW_o};
            Matrix* grs[4] = {&g.dR_i, &g.dR_f, &g.dR_z, &g.dR_o};
            std::vector<float>* gbs[4] = {&g.db_i, &g.db_f, &g.db_z, &g.db_o};
            for (int gi = 0; gi < 4; ++gi) {
                if (gW[gi].rows == 0) {
                    gW[gi] = std::move(*gws[gi]);
                    gR[gi] = std::move(*grs[gi]);
                } else {
                    for (size_t k = 0; k < gW[gi].data.size(); ++k) {
                        gW[gi].data[k] += gws[gi]->data[k];
                    }
                    for (size_t k = 0; k < gR[gi].data.size(); ++k) {
                        gR[gi].data[k] += grs[gi]->data[k];
                    }
                }
                for (int k = 0; k < h; ++k) {
                    gb[gi][k] += (*gbs[gi])[k];
                }
            }
            if (gproj.rows == 0) {
                gproj = std::move(g.dW_proj);
            } else {
                for (size_t k = 0; k < gproj.data.size(); ++k) {
                    gproj.data[k] += g.dW_proj.data[k];
                }
            }
        }

        // masked SGD: pruned blocks receive no updates and keep their values
        for (int g = 0; g < 4; ++g) {
            W[g].sgd(gW[g], cfg.learning_rate, cfg.block_rows, cfg.block_cols);
            R[g].sgd(gR[g], cfg.learning_rate, cfg.block_rows, cfg.block_cols);
            for (int k = 0; k < h; ++k) {
                biases[g][k] -= static_cast<float>(cfg.learning_rate * gb[g][k]);
            }
        }
        for (size_t k = 0; k < proj.data.size(); ++k) {
            proj.data[k] -= static_cast<float>(cfg.learning_rate * gproj.data[k]);
        }

        std::vector<BlockMask> before;
        for (int g = 0; g < 8; ++g) {
            before.push_back((g < 4 ? W[g] : R[g - 4]).state.mask);
        }
        bool updated = (step % cfg.schedule.mask_update_interval) == 0;
        for (int g = 0; g < 4; ++g) {
            pruning::maybe_update_mask(W[g].state, step);
            pruning::maybe_update_mask(R[g].state, step);
        }
        auto [churn, recovered] = mask_stats(before);
        result.total_recovered += recovered;
        if (updated || step % cfg.log_interval == 0 || step == cfg.steps - 1) {
            result.log.push_back(
                {step, loss, eval_loss(), current_sparsity(), churn, recovered});
        }
        ++result.steps;
    }
    result.final_sparsity = current_sparsity();
    result.final_eval_loss = eval_loss();
    return result;
}

}  // namespace ernn::train
