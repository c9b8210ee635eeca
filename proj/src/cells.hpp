#pragma once

#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "blocksparse.hpp"
#include "common.hpp"

namespace ernn::cells {

enum class CellKind { lstm, cifg, sru };

struct LayerNormParams {
    std::vector<float> gain;
    std::vector<float> bias;
    float epsilon = 1e-6f;
    bool enabled = false;
};

// y = gain * (x - mean) / sqrt(var + eps) + bias, population variance.
// Pass-through when disabled.
std::vector<float> layer_norm(std::span<const float> x, const LayerNormParams& p);

// Weight matrices may be dense or block-sparse; both run through the same
// cell step.
using WeightMatrix = std::variant<Matrix, blocksparse::BlockSparseF>;

int weight_rows(const WeightMatrix& w);
int weight_cols(const WeightMatrix& w);
std::vector<float> weight_matvec(const WeightMatrix& w, std::span<const float> x);

// One recurrent layer's parameters. Gate order follows the cell equations:
// input gate i, forget gate f, block input z, output gate o. The gate bias
// is added after layer normalization, so an enabled-LN model fuses the LN
// shift and the cell bias into one vector.
struct LstmWeights {
    WeightMatrix W_i, W_f, W_z, W_o;  // hidden x input
    WeightMatrix R_i, R_f, R_z, R_o;  // hidden x output
    std::vector<float> b_i, b_f, b_z, b_o;
    LayerNormParams ln_i, ln_f, ln_z, ln_o;
    Matrix W_proj;  // output x hidden

    int input_width() const { return weight_cols(W_i); }
    int hidden_width() const { return weight_rows(W_i); }
    int output_width() const { return W_proj.rows; }
};

// LSTM with the input gate coupled to the forget gate: i = 1 - f.
struct CifgWeights {
    WeightMatrix W_f, W_z, W_o;
    WeightMatrix R_f, R_z, R_o;
    std::vector<float> b_f, b_z, b_o;
    LayerNormParams ln_f, ln_z, ln_o;
    Matrix W_proj;

    int input_width() const { return weight_cols(W_f); }
    int hidden_width() const { return weight_rows(W_f); }
    int output_width() const { return W_proj.rows; }
};

// Simple recurrent unit: no recurrent matrices, gates depend on the input
// only. Layer norm sits on the f and r pre-activations and on c before the
// output nonlinearity.
struct SruWeights {
    WeightMatrix W_f, W_r, W_x1, W_x2;  // hidden x input
    std::vector<float> b_f, b_r, b_x1, b_x2;
    LayerNormParams ln_f, ln_r, ln_c;
    Matrix W_proj;

    int input_width() const { return weight_cols(W_f); }
    int hidden_width() const { return weight_rows(W_f); }
    int output_width() const { return W_proj.rows; }
};

struct CellState {
    std::vector<float> c;  // hidden width
    std::vector<float> h;  // output width; unused by SRU steps but kept for uniformity
};

CellState zero_state(int hidden, int output);

struct StepResult {
    std::vector<float> h;
    CellState state;
};

// Raw pre-activation sums (before norm and bias) and the projection input,
// in canonical gate order: lstm {i,f,z,o}, cifg {f,z,o}, sru {f,r,x1,x2}.
// Used for dynamic-range calibration.
struct StepTrace {
    std::vector<std::vector<float>> pre;
    std::vector<float> m;
};

// Forward cache for backprop through one LSTM step.
struct LstmStepCache {
    std::vector<float> x, h_prev, c_prev;
    std::vector<float> s_i, s_f, s_z, s_o;  // W x + R h, before LN/bias
    std::vector<float> i, f, z, o, c, gc, m;
};

StepResult lstm_step(const LstmWeights& w, std::span<const float> x, const CellState& s,
                     LstmStepCache* cache = nullptr, StepTrace* trace = nullptr);
StepResult cifg_step(const CifgWeights& w, std::span<const float> x, const CellState& s,
                     StepTrace* trace = nullptr);
StepResult sru_step(const SruWeights& w, std::span<const float> x, const CellState& s,
                    StepTrace* trace = nullptr);

struct LstmGrads {
    Matrix dW_i, dW_f, dW_z, dW_o;
    Matrix dR_i, dR_f, dR_z, dR_o;
    std::vector<float> db_i, db_f, db_z, db_o;
    std::vector<float> dgain_i, dgain_f, dgain_z, dgain_o;  // zero-sized when LN off
    Matrix dW_proj;
    std::vector<float> dx, dh_prev, dc_prev;
};

// Backprop through one cached step given upstream gradients on h and on the
// next cell state. Requires dense weight matrices. The LN bias gradient
// equals the cell bias gradient and is reported once through db_*.
LstmGrads lstm_step_backward(const LstmWeights& w, const LstmStepCache& cache,
                             std::span<const float> dh, std::span<const float> dc_next);

using CellWeights = std::variant<LstmWeights, CifgWeights, SruWeights>;

CellKind kind_of(const CellWeights& w);
int cell_input_width(const CellWeights& w);
int cell_hidden_width(const CellWeights& w);
int cell_output_width(const CellWeights& w);

StepResult cell_step(const CellWeights& w, std::span<const float> x, const CellState& s,
                     StepTrace* trace = nullptr);

// Left-to-right fold of the step function; returns one output per input.
std::vector<std::vector<float>> run_sequence(const CellWeights& w,
                                             std::span<const std::vector<float>> inputs,
                                             const CellState& init);

}  // namespace ernn::cells
