#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "common.hpp"

namespace ernn::fixedpoint {

// Symmetric quantization parameters: real value = integer * scale, zero
// point is always 0. bit_width is one of 8, 16, 32; the most negative code
// (-2^(b-1)) is never produced, so the representable range is symmetric.
struct QuantParams {
    float scale = 1.0f;
    int bit_width = 8;

    int32_t qmax() const { return (int32_t(1) << (bit_width - 1)) - 1; }
    int32_t qmin() const { return -qmax(); }
};

bool operator==(const QuantParams& a, const QuantParams& b);

struct QuantizedTensor {
    std::vector<int32_t> data;  // every element fits params.bit_width
    std::vector<int64_t> shape;
    QuantParams params;

    size_t size() const { return data.size(); }
};

// Round half away from zero, the rounding used everywhere in the engine.
int32_t round_away(double v);

// Saturate to the symmetric range of the given bit width.
int32_t saturate(int64_t v, int bit_width);

// scale = max|v| / (2^(b-1)-1); all-zero input gets scale 1. Rejects
// non-finite input, naming the offending index.
QuantizedTensor quantize_symmetric(std::span<const float> v, int bit_width);

std::vector<float> dequantize(const QuantizedTensor& t);

// Normalized fixed-point multiplier: value = mantissa * 2^(shift-31) with
// mantissa in [2^30, 2^31). Applying it is integer-only and bit-exact
// across platforms.
struct RequantMultiplier {
    int32_t mantissa = 0;
    int shift = 0;
};

// Decomposes in_scale/out_scale. Throws at build time if the multiplier is
// not representable (non-positive, non-finite, or shift out of range).
RequantMultiplier make_requant_multiplier(double in_scale, double out_scale);

// round(acc * multiplier) using the normalized fixed-point form.
int32_t apply_multiplier(int32_t acc, const RequantMultiplier& m);

// round(acc * in_scale / out.scale), saturated to out.bit_width.
int32_t requantize(int32_t acc, double in_scale, const QuantParams& out);

// Rounding divide by 2^exponent, half away from zero. exponent >= 0.
int32_t rounding_shift_right(int64_t v, int exponent);

// floor(sqrt(v)) for v >= 0, exact.
int64_t isqrt64(int64_t v);

// round(num/den), half away from zero. den > 0.
int64_t rounded_div(int64_t num, int64_t den);

// Element-wise sigmoid/tanh on Q3.12 inputs (value = q * 2^-12, clamped
// meaning range [-8, 8)), producing Q0.15 outputs. Table-driven, integer
// only, total on all 16-bit inputs, max error 2^-9 against the real
// function, monotone non-decreasing.
int16_t fixed_sigmoid(int16_t q);
int16_t fixed_tanh(int16_t q);

}  // namespace ernn::fixedpoint
