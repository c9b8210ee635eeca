#include "fixedpoint.hpp"

#include <algorithm>
#include <cmath>

namespace ernn::fixedpoint {

bool operator==(const QuantParams& a, const QuantParams& b) {
    return a.scale == b.scale && a.bit_width == b.bit_width;
}

int32_t round_away(double v) {
    return static_cast<int32_t>(std::llround(v));
}

int32_t saturate(int64_t v, int bit_width) {
    int64_t hi = (int64_t(1) << (bit_width - 1)) - 1;
    return static_cast<int32_t>(std::clamp(v, -hi, hi));
}

QuantizedTensor quantize_symmetric(std::span<const float> v, int bit_width) {
    if (bit_width != 8 && bit_width != 16) {
        fail(ErrorKind::invalid_argument,
             strformat("quantize_symmetric: bit width %d not in {8, 16}", bit_width));
    }
    float max_abs = 0.0f;
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            fail(ErrorKind::numeric,
                 strformat("quantize_symmetric: non-finite value %g at index %zu", v[i], i));
        }
        max_abs = std::max(max_abs, std::fabs(v[i]));
    }
    QuantizedTensor t;
    t.params.bit_width = bit_width;
    t.params.scale = max_abs == 0.0f
                         ? 1.0f
                         : max_abs / static_cast<float>((int32_t(1) << (bit_width - 1)) - 1);
    t.shape = {static_cast<int64_t>(v.size())};
    t.data.resize(v.size());
    double inv = 1.0 / t.params.scale;
    for (size_t i = 0; i < v.size(); ++i) {
        t.data[i] = saturate(round_away(static_cast<double>(v[i]) * inv), bit_width);
    }
    return t;
}

std::vector<float> dequantize(const QuantizedTensor& t) {
    std::vector<float> out(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) {
        out[i] = static_cast<float>(t.data[i]) * t.params.scale;
    }
    return out;
}

RequantMultiplier make_requant_multiplier(double in_scale, double out_scale) {
    if (!(in_scale > 0.0) || !(out_scale > 0.0) || !std::isfinite(in_scale) ||
        !std::isfinite(out_scale)) {
        fail(ErrorKind::invalid_argument,
             strformat("requantize multiplier: scales must be positive finite, got %g / %g",
                       in_scale, out_scale));
    }
    double real = in_scale / out_scale;
    int exp = 0;
    double normalized = std::frexp(real, &exp);  // in [0.5, 1)
    auto mantissa = static_cast<int64_t>(std::llround(normalized * (int64_t(1) << 31)));
    if (mantissa == (int64_t(1) << 31)) {
        mantissa /= 2;
        ++exp;
    }
    if (exp < -31 || exp > 30) {
        fail(ErrorKind::invalid_argument,
             strformat("requantize multiplier %g outside representable normalized range "
                       "(shift %d not in [-31, 30])",
                       real, exp));
    }
    return {static_cast<int32_t>(mantissa), exp};
}

// Saturating rounding doubling high multiply, the usual Q31 primitive.
static int32_t srdhm(int32_t a, int32_t b) {
    if (a == INT32_MIN && b == INT32_MIN) {
        return INT32_MAX;
    }
    int64_t prod = static_cast<int64_t>(a) * b;
    int32_t nudge = prod >= 0 ? (1 << 30) : (1 - (1 << 30));
    return static_cast<int32_t>((prod + nudge) / (int64_t(1) << 31));
}

int32_t rounding_shift_right(int64_t v, int exponent) {
    if (exponent == 0) {
        return static_cast<int32_t>(v);
    }
    int64_t mask = (int64_t(1) << exponent) - 1;
    int64_t remainder = v & mask;
    int64_t threshold = (mask >> 1) + (v < 0 ? 1 : 0);
    return static_cast<int32_t>((v >> exponent) + (remainder > threshold ? 1 : 0));
}

int32_t apply_multiplier(int32_t acc, const RequantMultiplier& m) {
    int left = std::max(m.shift, 0);
    int right = std::max(-m.shift, 0);
    int64_t scaled = static_cast<int64_t>(acc) * (int64_t(1) << left);
    int32_t x = srdhm(saturate(scaled, 32), m.mantissa);
    return rounding_shift_right(x, right);
}

int32_t requantize(int32_t acc, double in_scale, const QuantParams& out) {
    RequantMultiplier m = make_requant_multiplier(in_scale, out.scale);
    return saturate(apply_multiplier(acc, m), out.bit_width);
}

int64_t isqrt64(int64_t v) {
    if (v <= 0) {
        return 0;
    }
    auto r = static_cast<int64_t>(std::sqrt(static_cast<double>(v)));
    while (r > 0 && r * r > v) {
        --r;
    }
    while ((r + 1) * (r + 1) <= v) {
        ++r;
    }
    return r;
}

int64_t rounded_div(int64_t num, int64_t den) {
    int64_t q = num / den;
    int64_t rem = num % den;
    if (2 * std::abs(rem) >= den) {
        q += (num < 0) ? -1 : 1;
    }
    return q;
}

// Piecewise-linear tables over [-8, 8] in 512 segments of 128 Q3.12 steps.
// Entry i is the Q0.15 value at x = (i - 256)/32; the negative half mirrors
// the positive half exactly so the symmetry identities hold at integer
// precision. Regenerate with a 513-point sweep of the real function if the
// format ever changes.
#include "activation_tables.inc"

static int16_t lut_interpolate(const int16_t* table, int16_t q) {
    uint32_t u = static_cast<uint32_t>(static_cast<int32_t>(q) + 32768);
    uint32_t k = u >> 7;
    int32_t frac = static_cast<int32_t>(u & 127);
    int32_t base = table[k];
    int32_t delta = static_cast<int32_t>(table[k + 1]) - base;
    return static_cast<int16_t>(base + ((delta * frac + 64) >> 7));
}

int16_t fixed_sigmoid(int16_t q) {
    return lut_interpolate(kSigmoidTable, q);
}

int16_t fixed_tanh(int16_t q) {
    return lut_interpolate(kTanhTable, q);
}

}  // namespace ernn::fixedpoint
