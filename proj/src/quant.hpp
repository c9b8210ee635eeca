#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "blocksparse.hpp"
#include "cells.hpp"
#include "common.hpp"
#include "fixedpoint.hpp"

namespace ernn::quant {

using fixedpoint::QuantParams;
using fixedpoint::QuantizedTensor;
using fixedpoint::RequantMultiplier;

struct DenseI8 {
    int rows = 0;
    int cols = 0;
    std::vector<int8_t> data;
};

// 8-bit weight matrix with one symmetric per-tensor scale, dense or BCSR.
struct QuantizedMatrix {
    float scale = 1.0f;
    std::variant<DenseI8, blocksparse::BlockSparseI8> payload;

    int rows() const;
    int cols() const;
    bool sparse() const { return std::holds_alternative<blocksparse::BlockSparseI8>(payload); }
};

// Per-tensor max-abs/127 quantization keeping the sparse structure intact.
QuantizedMatrix quantize_weights(const cells::WeightMatrix& w);
QuantizedMatrix quantize_weights(const Matrix& w);

std::vector<int32_t> matvec_i8(const QuantizedMatrix& w, std::span<const int8_t> x);

// On-the-fly activation quantization: x is quantized at max|x|/127 per call
// and the integer accumulators are scaled back to float.
std::vector<float> hybrid_matvec(const QuantizedMatrix& w, std::span<const float> x);

// --- hybrid cells -------------------------------------------------------
// Same dataflow as the float cells with every matvec replaced by
// hybrid_matvec; the input and recurrent vectors are quantized once per
// step each. Gate order matches the float cell structs:
//   lstm: {i, f, z, o}   cifg: {f, z, o}   sru: gates {f, r}, linear {x1, x2}
struct HybridCell {
    cells::CellKind kind = cells::CellKind::lstm;
    std::vector<QuantizedMatrix> W;
    std::vector<QuantizedMatrix> R;  // empty for sru
    std::vector<std::vector<float>> bias;
    std::vector<cells::LayerNormParams> ln;  // sru: {f, r, c}
    QuantizedMatrix proj;
    int input = 0, hidden = 0, output = 0;
};

HybridCell to_hybrid(const cells::CellWeights& w);

cells::StepResult hybrid_cell_step(const HybridCell& w, std::span<const float> x,
                                   const cells::CellState& s);

// --- integer layer norm ---------------------------------------------------
// Normalizes a 16-bit vector with 2^10-scaled integer intermediates: the
// normalized value carries scale 2^-10, the gain is 8-bit, the bias 32-bit
// at 2^-10 times the gain scale, and the output lands back on the gain
// scale. Zero-variance input maps to round(bias / 2^10).
std::vector<int16_t> integer_layer_norm(std::span<const int16_t> q, std::span<const int8_t> gain,
                                        std::span<const int32_t> bias);

// Typed wrapper that checks the bias scale is 2^-10 times the gain scale.
QuantizedTensor integer_layer_norm(const QuantizedTensor& q, const QuantizedTensor& gain,
                                   const QuantizedTensor& bias);

// Widths above this would overflow the 64-bit square accumulation in the
// 2^20-scaled variance.
inline constexpr int kMaxIntegerNormWidth = 2048;

// --- integer cells --------------------------------------------------------
// Fully integer execution. Fixed formats: cell state Q3.12, activation
// inputs Q3.12, activation outputs Q0.15. Everything else runs on scales
// calibrated from float inference; all requantize multipliers are built at
// conversion time.

struct IntegerGate {
    QuantizedMatrix W;
    QuantizedMatrix R;  // rows() == 0 when absent (sru)
    float pre_scale = 0.0f;
    RequantMultiplier to_pre_w;  // acc(W.scale * in_scale)   -> pre_scale, 16-bit
    RequantMultiplier to_pre_r;  // acc(R.scale * out_scale)  -> pre_scale, 16-bit
    bool has_ln = false;
    std::vector<int8_t> ln_gain;
    float gain_scale = 0.0f;
    std::vector<int32_t> ln_bias;    // fused LN + cell bias at 2^-10 * gain_scale
    std::vector<int32_t> bias_pre;   // no-LN path: cell bias at pre_scale
    RequantMultiplier to_act;        // gain_scale (or pre_scale) -> Q3.12
};

// SRU input branch feeding the cell/output mixes directly.
struct IntegerLinear {
    QuantizedMatrix W;
    std::vector<int32_t> bias_acc;  // at W.scale * in_scale
    RequantMultiplier to_cell;      // acc -> Q3.12
};

struct IntegerCell {
    cells::CellKind kind = cells::CellKind::lstm;
    float in_scale = 0.0f;
    std::vector<IntegerGate> gates;    // lstm {i,f,z,o}; cifg {f,z,o}; sru {f,r}
    std::vector<IntegerLinear> linear; // sru {x1, x2}
    bool has_ln_c = false;             // sru cell-value norm
    std::vector<int8_t> lnc_gain;
    float lnc_gain_scale = 0.0f;
    std::vector<int32_t> lnc_bias;
    RequantMultiplier lnc_to_act;      // lnc gain scale -> Q3.12
    float m_scale = 0.0f;
    RequantMultiplier to_m;            // Q0.15 (lstm/cifg) or Q3.12 (sru) -> m_scale, 8-bit
    QuantizedMatrix proj;
    float out_scale = 0.0f;
    RequantMultiplier to_out;          // acc(proj.scale * m_scale) -> out_scale, 8-bit
    int input = 0, hidden = 0, output = 0;
};

struct IntegerState {
    std::vector<int16_t> c;  // Q3.12
    std::vector<int8_t> h;   // at out_scale
};

IntegerState zero_integer_state(int hidden, int output);

struct IntegerStepResult {
    std::vector<int8_t> h;
    IntegerState state;
};

IntegerStepResult integer_cell_step(const IntegerCell& w, std::span<const int8_t> x,
                                    const IntegerState& s);

// Calibration requirements and results are keyed by tensor id strings like
// "enc0.pre.f" or "dec1.out".
struct CalibRequirement {
    std::string id;
    int bit_width;  // 8 or 16
};

// The dynamic tensors one layer contributes: input (first layer only), one
// pre-activation per gate/branch, the cell state, the projection input m,
// and the layer output.
std::vector<CalibRequirement> layer_calibration_ids(cells::CellKind kind,
                                                    const std::string& prefix,
                                                    bool include_input);

using ScaleMap = std::map<std::string, float>;

// Builds the fully-wired integer cell. in_scale/out come from the scale map
// under the given prefix; throws naming the tensor when a scale is missing
// or a multiplier is not representable.
IntegerCell to_integer(const cells::CellWeights& w, const ScaleMap& scales,
                       const std::string& prefix, float in_scale);

float need_scale(const ScaleMap& scales, const std::string& id);

}  // namespace ernn::quant
