#include "quant.hpp"

#include <algorithm>
#include <cmath>

namespace ernn::quant {

namespace fx = ernn::fixedpoint;

int QuantizedMatrix::rows() const {
    return std::visit([](const auto& m) { return m.rows; }, payload);
}

int QuantizedMatrix::cols() const {
    return std::visit([](const auto& m) { return m.cols; }, payload);
}

// cols beyond this could overflow the int32 accumulator (127*127*2^16 < 2^31).
static constexpr int kMaxAccumulatorCols = 1 << 16;

static void check_accumulator_guard(int cols) {
    if (cols > kMaxAccumulatorCols) {
        fail(ErrorKind::invalid_argument,
             strformat("quantized matrix with %d columns breaks the 32-bit accumulator "
                       "guarantee (max %d)",
                       cols, kMaxAccumulatorCols));
    }
}

static std::vector<int8_t> quantize_to_i8(std::span<const float> v, float& scale) {
    float max_abs = 0.0f;
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            fail(ErrorKind::numeric,
                 strformat("quantize: non-finite weight %g at index %zu", v[i], i));
        }
        max_abs = std::max(max_abs, std::fabs(v[i]));
    }
    scale = max_abs == 0.0f ? 1.0f : max_abs / 127.0f;
    double inv = 1.0 / scale;
    std::vector<int8_t> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = static_cast<int8_t>(
            std::clamp<int32_t>(fx::round_away(double(v[i]) * inv), -127, 127));
    }
    return out;
}

QuantizedMatrix quantize_weights(const Matrix& w) {
    check_accumulator_guard(w.cols);
    QuantizedMatrix q;
    DenseI8 d;
    d.rows = w.rows;
    d.cols = w.cols;
    d.data = quantize_to_i8(w.data, q.scale);
    q.payload = std::move(d);
    return q;
}

QuantizedMatrix quantize_weights(const cells::WeightMatrix& w) {
    if (const auto* dense = std::get_if<Matrix>(&w)) {
        return quantize_weights(*dense);
    }
    const auto& s = std::get<blocksparse::BlockSparseF>(w);
    check_accumulator_guard(s.cols);
    QuantizedMatrix q;
    blocksparse::BlockSparseI8 out;
    out.rows = s.rows;
    out.cols = s.cols;
    out.block_rows = s.block_rows;
    out.block_cols = s.block_cols;
    out.ledger = s.ledger;
    out.data = quantize_to_i8(s.data, q.scale);
    q.payload = std::move(out);
    return q;
}

std::vector<int32_t> matvec_i8(const QuantizedMatrix& w, std::span<const int8_t> x) {
    if (const auto* dense = std::get_if<DenseI8>(&w.payload)) {
        if (x.size() != static_cast<size_t>(dense->cols)) {
            fail(ErrorKind::invalid_argument,
                 strformat("matvec_i8: vector length %zu does not match %d columns", x.size(),
                           dense->cols));
        }
        std::vector<int32_t> y(dense->rows, 0);
        for (int r = 0; r < dense->rows; ++r) {
            const int8_t* row = dense->data.data() + static_cast<size_t>(r) * dense->cols;
            int32_t acc = 0;
            for (int c = 0; c < dense->cols; ++c) {
                acc += static_cast<int32_t>(row[c]) * static_cast<int32_t>(x[c]);
            }
            y[r] = acc;
        }
        return y;
    }
    return blocksparse::matvec_quantized(std::get<blocksparse::BlockSparseI8>(w.payload), x);
}

struct QuantizedActivation {
    std::vector<int8_t> q;
    float scale = 1.0f;
};

static QuantizedActivation quantize_activation(std::span<const float> x) {
    QuantizedActivation out;
    float max_abs = 0.0f;
    for (float v : x) {
        max_abs = std::max(max_abs, std::fabs(v));
    }
    out.scale = max_abs == 0.0f ? 1.0f : max_abs / 127.0f;
    out.q.resize(x.size());
    double inv = 1.0 / out.scale;
    for (size_t k = 0; k < x.size(); ++k) {
        out.q[k] = static_cast<int8_t>(
            std::clamp<int32_t>(fx::round_away(double(x[k]) * inv), -127, 127));
    }
    return out;
}

std::vector<float> hybrid_matvec(const QuantizedMatrix& w, std::span<const float> x) {
    check_finite(x, "hybrid_matvec");
    auto qx = quantize_activation(x);
    auto acc = matvec_i8(w, qx.q);
    std::vector<float> y(acc.size());
    float combined = w.scale * qx.scale;
    for (size_t k = 0; k < acc.size(); ++k) {
        y[k] = static_cast<float>(acc[k]) * combined;
    }
    return y;
}

// --- hybrid conversion and step -----------------------------------------

HybridCell to_hybrid(const cells::CellWeights& w) {
    HybridCell out;
    out.kind = cells::kind_of(w);
    out.input = cells::cell_input_width(w);
    out.hidden = cells::cell_hidden_width(w);
    out.output = cells::cell_output_width(w);
    std::visit(
        [&](const auto& cell) {
            using T = std::decay_t<decltype(cell)>;
            if constexpr (std::is_same_v<T, cells::LstmWeights>) {
                out.W = {quantize_weights(cell.W_i), quantize_weights(cell.W_f),
                         quantize_weights(cell.W_z), quantize_weights(cell.W_o)};
                out.R = {quantize_weights(cell.R_i), quantize_weights(cell.R_f),
                         quantize_weights(cell.R_z), quantize_weights(cell.R_o)};
                out.bias = {cell.b_i, cell.b_f, cell.b_z, cell.b_o};
                out.ln = {cell.ln_i, cell.ln_f, cell.ln_z, cell.ln_o};
            } else if constexpr (std::is_same_v<T, cells::CifgWeights>) {
                out.W = {quantize_weights(cell.W_f), quantize_weights(cell.W_z),
                         quantize_weights(cell.W_o)};
                out.R = {quantize_weights(cell.R_f), quantize_weights(cell.R_z),
                         quantize_weights(cell.R_o)};
                out.bias = {cell.b_f, cell.b_z, cell.b_o};
                out.ln = {cell.ln_f, cell.ln_z, cell.ln_o};
            } else {
                out.W = {quantize_weights(cell.W_f), quantize_weights(cell.W_r),
                         quantize_weights(cell.W_x1), quantize_weights(cell.W_x2)};
                out.bias = {cell.b_f, cell.b_r, cell.b_x1, cell.b_x2};
                out.ln = {cell.ln_f, cell.ln_r, cell.ln_c};
            }
            out.proj = quantize_weights(cell.W_proj);
        },
        w);
    return out;
}

static float sigmoidf(float v) {
    return 1.0f / (1.0f + std::exp(-v));
}

// LN(acc) + b on the float pre-activation.
static std::vector<float> hybrid_preact(std::vector<float> sum, const cells::LayerNormParams& ln,
                                        std::span<const float> b) {
    std::vector<float> pre = cells::layer_norm(sum, ln);
    for (size_t k = 0; k < pre.size(); ++k) {
        pre[k] += b[k];
    }
    return pre;
}

cells::StepResult hybrid_cell_step(const HybridCell& w, std::span<const float> x,
                                   const cells::CellState& s) {
    check_finite(x, "hybrid_cell_step input");
    auto qx = quantize_activation(x);
    size_t n_gates = w.W.size();
    std::vector<std::vector<float>> sums(n_gates);

    QuantizedActivation qh;
    if (!w.R.empty()) {
        qh = quantize_activation(s.h);
    }
    for (size_t g = 0; g < n_gates; ++g) {
        auto acc = matvec_i8(w.W[g], qx.q);
        sums[g].resize(acc.size());
        float sw = w.W[g].scale * qx.scale;
        for (size_t k = 0; k < acc.size(); ++k) {
            sums[g][k] = static_cast<float>(acc[k]) * sw;
        }
        if (!w.R.empty()) {
            auto acc_r = matvec_i8(w.R[g], qh.q);
            float sr = w.R[g].scale * qh.scale;
            for (size_t k = 0; k < acc_r.size(); ++k) {
                sums[g][k] += static_cast<float>(acc_r[k]) * sr;
            }
        }
    }

    int hidden = w.hidden;
    std::vector<float> m(hidden);
    cells::CellState next;
    next.c.resize(hidden);

    if (w.kind == cells::CellKind::lstm || w.kind == cells::CellKind::cifg) {
        bool cifg = w.kind == cells::CellKind::cifg;
        // lstm order {i,f,z,o}; cifg order {f,z,o}
        std::vector<float> i_gate, f_gate, z_in, o_gate;
        if (cifg) {
            f_gate = hybrid_preact(std::move(sums[0]), w.ln[0], w.bias[0]);
            z_in = hybrid_preact(std::move(sums[1]), w.ln[1], w.bias[1]);
            o_gate = hybrid_preact(std::move(sums[2]), w.ln[2], w.bias[2]);
        } else {
            i_gate = hybrid_preact(std::move(sums[0]), w.ln[0], w.bias[0]);
            f_gate = hybrid_preact(std::move(sums[1]), w.ln[1], w.bias[1]);
            z_in = hybrid_preact(std::move(sums[2]), w.ln[2], w.bias[2]);
            o_gate = hybrid_preact(std::move(sums[3]), w.ln[3], w.bias[3]);
        }
        for (int k = 0; k < hidden; ++k) {
            float f = sigmoidf(f_gate[k]);
            float i = cifg ? 1.0f - f : sigmoidf(i_gate[k]);
            float z = std::tanh(z_in[k]);
            float o = sigmoidf(o_gate[k]);
            next.c[k] = i * z + f * s.c[k];
            m[k] = o * std::tanh(next.c[k]);
        }
    } else {
        // sru: W order {f, r, x1, x2}, ln order {f, r, c}
        std::vector<float> f_gate = hybrid_preact(std::move(sums[0]), w.ln[0], w.bias[0]);
        std::vector<float> r_gate = hybrid_preact(std::move(sums[1]), w.ln[1], w.bias[1]);
        std::vector<float> lin1 = std::move(sums[2]);
        std::vector<float> lin2 = std::move(sums[3]);
        for (int k = 0; k < hidden; ++k) {
            lin1[k] += w.bias[2][k];
            lin2[k] += w.bias[3][k];
            float f = sigmoidf(f_gate[k]);
            next.c[k] = f * s.c[k] + (1.0f - f) * lin1[k];
        }
        std::vector<float> gc = cells::layer_norm(next.c, w.ln[2]);
        for (int k = 0; k < hidden; ++k) {
            float r = sigmoidf(r_gate[k]);
            m[k] = r * std::tanh(gc[k]) + (1.0f - r) * lin2[k];
        }
    }

    auto qm = quantize_activation(m);
    auto acc = matvec_i8(w.proj, qm.q);
    cells::StepResult out;
    out.h.resize(w.output);
    float sp = w.proj.scale * qm.scale;
    for (int k = 0; k < w.output; ++k) {
        out.h[k] = static_cast<float>(acc[k]) * sp;
    }
    next.h = out.h;
    out.state = std::move(next);
    return out;
}

// --- integer layer norm ---------------------------------------------------

std::vector<int16_t> integer_layer_norm(std::span<const int16_t> q, std::span<const int8_t> gain,
                                        std::span<const int32_t> bias) {
    size_t n = q.size();
    if (n == 0 || n > kMaxIntegerNormWidth) {
        fail(ErrorKind::invalid_argument,
             strformat("integer_layer_norm width %zu outside [1, %d]", n, kMaxIntegerNormWidth));
    }
    if (gain.size() != n || bias.size() != n) {
        fail(ErrorKind::invalid_argument,
             strformat("integer_layer_norm: %zu gain/%zu bias params for width %zu", gain.size(),
                       bias.size(), n));
    }
    int64_t sum = 0;
    int64_t sumsq = 0;
    for (int16_t v : q) {
        sum += v;
        sumsq += static_cast<int64_t>(v) * v;
    }
    int64_t q_bar = fx::rounded_div(sum << 10, static_cast<int64_t>(n));
    int64_t var = fx::rounded_div(sumsq << 20, static_cast<int64_t>(n)) - q_bar * q_bar;
    int64_t sigma = fx::isqrt64(std::max<int64_t>(var, 0));

    std::vector<int16_t> out(n);
    for (size_t k = 0; k < n; ++k) {
        int64_t q_prime = 0;
        if (sigma != 0) {
            int64_t centered = (static_cast<int64_t>(q[k]) << 10) - q_bar;
            q_prime = fx::rounded_div(centered << 10, sigma);
        }
        int64_t combined = fx::rounded_div(q_prime * gain[k] + bias[k], 1 << 10);
        out[k] = static_cast<int16_t>(fx::saturate(combined, 16));
    }
    return out;
}

QuantizedTensor integer_layer_norm(const QuantizedTensor& q, const QuantizedTensor& gain,
                                   const QuantizedTensor& bias) {
    if (q.params.bit_width != 16 || gain.params.bit_width != 8 || bias.params.bit_width != 32) {
        fail(ErrorKind::invalid_argument,
             "integer_layer_norm expects 16-bit input, 8-bit gain, 32-bit bias");
    }
    if (bias.params.scale != gain.params.scale * 0x1p-10f) {
        fail(ErrorKind::invalid_argument,
             strformat("integer_layer_norm: bias scale %g is not 2^-10 times gain scale %g",
                       bias.params.scale, gain.params.scale));
    }
    std::vector<int16_t> qv(q.data.begin(), q.data.end());
    std::vector<int8_t> gv(gain.data.begin(), gain.data.end());
    auto out = integer_layer_norm(qv, gv, bias.data);
    QuantizedTensor result;
    result.data.assign(out.begin(), out.end());
    result.shape = q.shape;
    result.params = {gain.params.scale, 16};
    return result;
}

// --- integer cells ---------------------------------------------------------

IntegerState zero_integer_state(int hidden, int output) {
    IntegerState s;
    s.c.assign(hidden, 0);
    s.h.assign(output, 0);
    return s;
}

float need_scale(const ScaleMap& scales, const std::string& id) {
    auto it = scales.find(id);
    if (it == scales.end()) {
        fail(ErrorKind::invalid_argument,
             strformat("missing calibration scale for tensor '%s'", id.c_str()));
    }
    if (!(it->second > 0.0f) || !std::isfinite(it->second)) {
        fail(ErrorKind::invalid_argument,
             strformat("calibration scale for tensor '%s' is %g, must be positive finite",
                       id.c_str(), it->second));
    }
    return it->second;
}

static const std::vector<std::string>& gate_names(cells::CellKind kind) {
    static const std::vector<std::string> lstm{"i", "f", "z", "o"};
    static const std::vector<std::string> cifg{"f", "z", "o"};
    static const std::vector<std::string> sru{"f", "r"};
    switch (kind) {
        case cells::CellKind::lstm:
            return lstm;
        case cells::CellKind::cifg:
            return cifg;
        default:
            return sru;
    }
}

std::vector<CalibRequirement> layer_calibration_ids(cells::CellKind kind,
                                                    const std::string& prefix,
                                                    bool include_input) {
    std::vector<CalibRequirement> out;
    if (include_input) {
        out.push_back({prefix + ".in", 8});
    }
    for (const auto& g : gate_names(kind)) {
        out.push_back({prefix + ".pre." + g, 16});
    }
    if (kind == cells::CellKind::sru) {
        out.push_back({prefix + ".pre.x1", 16});
        out.push_back({prefix + ".pre.x2", 16});
    }
    out.push_back({prefix + ".cell", 16});
    out.push_back({prefix + ".m", 8});
    out.push_back({prefix + ".out", 8});
    return out;
}

static RequantMultiplier named_multiplier(double in_scale, double out_scale,
                                          const std::string& what) {
    try {
        return fx::make_requant_multiplier(in_scale, out_scale);
    } catch (const Error& e) {
        fail(ErrorKind::invalid_argument,
             strformat("%s: %s", what.c_str(), e.what()));
    }
}

static std::vector<int32_t> quantize_bias(std::span<const float> b, double scale,
                                          const std::string& what) {
    std::vector<int32_t> out(b.size());
    double inv = 1.0 / scale;
    for (size_t k = 0; k < b.size(); ++k) {
        if (!std::isfinite(b[k])) {
            fail(ErrorKind::numeric,
                 strformat("%s: non-finite bias %g at index %zu", what.c_str(), b[k], k));
        }
        double v = double(b[k]) * inv;
        if (std::fabs(v) >= 0x1p31) {
            fail(ErrorKind::invalid_argument,
                 strformat("%s: bias %g overflows 32 bits at scale %g", what.c_str(), b[k],
                           scale));
        }
        out[k] = fx::round_away(v);
    }
    return out;
}

static constexpr double kCellScale = 0x1p-12;  // Q3.12
static constexpr double kActScale = 0x1p-15;   // Q0.15

static IntegerGate make_gate(const cells::WeightMatrix& W, const cells::WeightMatrix* R,
                             std::span<const float> b, const cells::LayerNormParams& ln,
                             float in_scale, float h_scale, float pre_scale,
                             const std::string& what) {
    IntegerGate g;
    g.W = quantize_weights(W);
    g.pre_scale = pre_scale;
    g.to_pre_w = named_multiplier(double(g.W.scale) * in_scale, pre_scale, what + " input matmul");
    if (R != nullptr) {
        g.R = quantize_weights(*R);
        g.to_pre_r =
            named_multiplier(double(g.R.scale) * h_scale, pre_scale, what + " recurrent matmul");
    }
    g.has_ln = ln.enabled;
    if (ln.enabled) {
        auto gain_q = fx::quantize_symmetric(ln.gain, 8);
        g.gain_scale = gain_q.params.scale;
        g.ln_gain.resize(gain_q.data.size());
        for (size_t k = 0; k < gain_q.data.size(); ++k) {
            g.ln_gain[k] = static_cast<int8_t>(gain_q.data[k]);
        }
        // LN shift and cell bias fuse into one vector at 2^-10 * gain scale
        std::vector<float> fused(b.size());
        for (size_t k = 0; k < b.size(); ++k) {
            fused[k] = ln.bias[k] + b[k];
        }
        g.ln_bias = quantize_bias(fused, double(g.gain_scale) * 0x1p-10, what + " bias");
        g.to_act = named_multiplier(g.gain_scale, kCellScale, what + " activation rescale");
    } else {
        g.bias_pre = quantize_bias(b, pre_scale, what + " bias");
        g.to_act = named_multiplier(pre_scale, kCellScale, what + " activation rescale");
    }
    return g;
}

IntegerCell to_integer(const cells::CellWeights& w, const ScaleMap& scales,
                       const std::string& prefix, float in_scale) {
    IntegerCell cell;
    cell.kind = cells::kind_of(w);
    cell.input = cells::cell_input_width(w);
    cell.hidden = cells::cell_hidden_width(w);
    cell.output = cells::cell_output_width(w);
    cell.in_scale = in_scale;
    cell.out_scale = need_scale(scales, prefix + ".out");
    cell.m_scale = need_scale(scales, prefix + ".m");
    // validate stats coverage for fixed-format tensors too
    need_scale(scales, prefix + ".cell");

    auto pre = [&](const char* gate) { return need_scale(scales, prefix + ".pre." + gate); };

    std::visit(
        [&](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, cells::LstmWeights>) {
                cell.gates.push_back(make_gate(c.W_i, &c.R_i, c.b_i, c.ln_i, in_scale,
                                               cell.out_scale, pre("i"), prefix + " gate i"));
                cell.gates.push_back(make_gate(c.W_f, &c.R_f, c.b_f, c.ln_f, in_scale,
                                               cell.out_scale, pre("f"), prefix + " gate f"));
                cell.gates.push_back(make_gate(c.W_z, &c.R_z, c.b_z, c.ln_z, in_scale,
                                               cell.out_scale, pre("z"), prefix + " gate z"));
                cell.gates.push_back(make_gate(c.W_o, &c.R_o, c.b_o, c.ln_o, in_scale,
                                               cell.out_scale, pre("o"), prefix + " gate o"));
                cell.to_m = named_multiplier(kActScale, cell.m_scale, prefix + " cell output");
            } else if constexpr (std::is_same_v<T, cells::CifgWeights>) {
                cell.gates.push_back(make_gate(c.W_f, &c.R_f, c.b_f, c.ln_f, in_scale,
                                               cell.out_scale, pre("f"), prefix + " gate f"));
                cell.gates.push_back(make_gate(c.W_z, &c.R_z, c.b_z, c.ln_z, in_scale,
                                               cell.out_scale, pre("z"), prefix + " gate z"));
                cell.gates.push_back(make_gate(c.W_o, &c.R_o, c.b_o, c.ln_o, in_scale,
                                               cell.out_scale, pre("o"), prefix + " gate o"));
                cell.to_m = named_multiplier(kActScale, cell.m_scale, prefix + " cell output");
            } else {
                cell.gates.push_back(make_gate(c.W_f, nullptr, c.b_f, c.ln_f, in_scale, 1.0f,
                                               pre("f"), prefix + " gate f"));
                cell.gates.push_back(make_gate(c.W_r, nullptr, c.b_r, c.ln_r, in_scale, 1.0f,
                                               pre("r"), prefix + " gate r"));
                // linear branches: bias lives at the accumulator scale
                for (auto [W, b, name] :
                     {std::tuple{&c.W_x1, &c.b_x1, "x1"}, std::tuple{&c.W_x2, &c.b_x2, "x2"}}) {
                    need_scale(scales, prefix + ".pre." + name);
                    IntegerLinear lin;
                    lin.W = quantize_weights(*W);
                    double acc_scale = double(lin.W.scale) * in_scale;
                    lin.bias_acc =
                        quantize_bias(*b, acc_scale, prefix + " branch " + name + " bias");
                    lin.to_cell = named_multiplier(acc_scale, kCellScale,
                                                   prefix + " branch " + name + " rescale");
                    cell.linear.push_back(std::move(lin));
                }
                cell.has_ln_c = c.ln_c.enabled;
                if (c.ln_c.enabled) {
                    auto gain_q = fx::quantize_symmetric(c.ln_c.gain, 8);
                    cell.lnc_gain_scale = gain_q.params.scale;
                    cell.lnc_gain.resize(gain_q.data.size());
                    for (size_t k = 0; k < gain_q.data.size(); ++k) {
                        cell.lnc_gain[k] = static_cast<int8_t>(gain_q.data[k]);
                    }
                    cell.lnc_bias = quantize_bias(c.ln_c.bias,
                                                  double(cell.lnc_gain_scale) * 0x1p-10,
                                                  prefix + " cell norm bias");
                    cell.lnc_to_act = named_multiplier(cell.lnc_gain_scale, kCellScale,
                                                       prefix + " cell norm rescale");
                }
                cell.to_m = named_multiplier(kCellScale, cell.m_scale, prefix + " cell output");
            }
            cell.proj = quantize_weights(c.W_proj);
            cell.to_out = named_multiplier(double(cell.proj.scale) * cell.m_scale, cell.out_scale,
                                           prefix + " projection");
        },
        w);

    bool any_ln = false;
    for (const auto& g : cell.gates) {
        any_ln = any_ln || g.has_ln;
    }
    if ((any_ln || cell.has_ln_c) && cell.hidden > kMaxIntegerNormWidth) {
        fail(ErrorKind::invalid_argument,
             strformat("%s: width %d exceeds the integer layer norm limit %d", prefix.c_str(),
                       cell.hidden, kMaxIntegerNormWidth));
    }
    return cell;
}

// pre-activation at pre_scale, int16
static std::vector<int16_t> gate_pre(const IntegerGate& g, std::span<const int8_t> x,
                                     std::span<const int8_t> h) {
    auto acc_w = matvec_i8(g.W, x);
    std::vector<int16_t> pre(acc_w.size());
    if (g.R.rows() > 0) {
        auto acc_r = matvec_i8(g.R, h);
        for (size_t k = 0; k < pre.size(); ++k) {
            int64_t sum = int64_t(fx::apply_multiplier(acc_w[k], g.to_pre_w)) +
                          int64_t(fx::apply_multiplier(acc_r[k], g.to_pre_r));
            pre[k] = static_cast<int16_t>(fx::saturate(sum, 16));
        }
    } else {
        for (size_t k = 0; k < pre.size(); ++k) {
            pre[k] = static_cast<int16_t>(fx::saturate(fx::apply_multiplier(acc_w[k], g.to_pre_w), 16));
        }
    }
    return pre;
}

// Q3.12 activation input after LN (or bias add) and rescale.
static std::vector<int16_t> gate_act_input(const IntegerGate& g, std::vector<int16_t> pre) {
    std::vector<int16_t> out(pre.size());
    if (g.has_ln) {
        auto normed = integer_layer_norm(pre, g.ln_gain, g.ln_bias);
        for (size_t k = 0; k < out.size(); ++k) {
            out[k] = static_cast<int16_t>(
                fx::saturate(fx::apply_multiplier(normed[k], g.to_act), 16));
        }
    } else {
        for (size_t k = 0; k < out.size(); ++k) {
            int32_t with_bias = static_cast<int32_t>(
                fx::saturate(int64_t(pre[k]) + g.bias_pre[k], 32));
            out[k] = static_cast<int16_t>(
                fx::saturate(fx::apply_multiplier(with_bias, g.to_act), 16));
        }
    }
    return out;
}

static std::vector<int16_t> gate_sigmoid(const IntegerGate& g, std::span<const int8_t> x,
                                         std::span<const int8_t> h) {
    auto act = gate_act_input(g, gate_pre(g, x, h));
    std::vector<int16_t> out(act.size());
    for (size_t k = 0; k < act.size(); ++k) {
        out[k] = fx::fixed_sigmoid(act[k]);
    }
    return out;
}

IntegerStepResult integer_cell_step(const IntegerCell& w, std::span<const int8_t> x,
                                    const IntegerState& s) {
    if (x.size() != static_cast<size_t>(w.input) || s.c.size() != static_cast<size_t>(w.hidden) ||
        s.h.size() != static_cast<size_t>(w.output)) {
        fail(ErrorKind::invalid_argument, "integer_cell_step: dimension mismatch");
    }
    int hidden = w.hidden;
    std::vector<int16_t> c_new(hidden);
    std::vector<int16_t> m;  // Q0.15 for lstm/cifg, Q3.12 for sru

    if (w.kind == cells::CellKind::lstm || w.kind == cells::CellKind::cifg) {
        bool cifg = w.kind == cells::CellKind::cifg;
        std::vector<int16_t> i_gate, f_gate, z_in, o_gate;
        if (cifg) {
            f_gate = gate_sigmoid(w.gates[0], x, s.h);
            z_in = gate_act_input(w.gates[1], gate_pre(w.gates[1], x, s.h));
            o_gate = gate_sigmoid(w.gates[2], x, s.h);
        } else {
            i_gate = gate_sigmoid(w.gates[0], x, s.h);
            f_gate = gate_sigmoid(w.gates[1], x, s.h);
            z_in = gate_act_input(w.gates[2], gate_pre(w.gates[2], x, s.h));
            o_gate = gate_sigmoid(w.gates[3], x, s.h);
        }
        m.resize(hidden);
        for (int k = 0; k < hidden; ++k) {
            int32_t i = cifg ? 32768 - int32_t(f_gate[k]) : int32_t(i_gate[k]);
            int32_t z = fx::fixed_tanh(z_in[k]);
            // i (Q0.15) * z (Q0.15) -> Q3.12; f (Q0.15) * c (Q3.12) -> Q3.12
            int64_t iz = fx::rounding_shift_right(int64_t(i) * z, 18);
            int64_t fc = fx::rounding_shift_right(int64_t(f_gate[k]) * s.c[k], 15);
            c_new[k] = static_cast<int16_t>(fx::saturate(iz + fc, 16));
            int32_t gc = fx::fixed_tanh(c_new[k]);
            m[k] = static_cast<int16_t>(
                fx::saturate(fx::rounding_shift_right(int64_t(o_gate[k]) * gc, 15), 16));
        }
    } else {
        auto f_gate = gate_sigmoid(w.gates[0], x, s.h);
        auto r_gate = gate_sigmoid(w.gates[1], x, s.h);
        auto branch = [&](const IntegerLinear& lin) {
            auto acc = matvec_i8(lin.W, x);
            std::vector<int16_t> out(acc.size());
            for (size_t k = 0; k < acc.size(); ++k) {
                int32_t with_bias = static_cast<int32_t>(
                    fx::saturate(int64_t(acc[k]) + lin.bias_acc[k], 32));
                out[k] = static_cast<int16_t>(
                    fx::saturate(fx::apply_multiplier(with_bias, lin.to_cell), 16));
            }
            return out;
        };
        auto lin1 = branch(w.linear[0]);
        auto lin2 = branch(w.linear[1]);
        for (int k = 0; k < hidden; ++k) {
            int32_t f = f_gate[k];
            int64_t fc = fx::rounding_shift_right(int64_t(f) * s.c[k], 15);
            int64_t ic = fx::rounding_shift_right(int64_t(32768 - f) * lin1[k], 15);
            c_new[k] = static_cast<int16_t>(fx::saturate(fc + ic, 16));
        }
        std::vector<int16_t> gc_in = c_new;
        if (w.has_ln_c) {
            auto normed = integer_layer_norm(c_new, w.lnc_gain, w.lnc_bias);
            for (int k = 0; k < hidden; ++k) {
                gc_in[k] = static_cast<int16_t>(
                    fx::saturate(fx::apply_multiplier(normed[k], w.lnc_to_act), 16));
            }
        }
        m.resize(hidden);
        for (int k = 0; k < hidden; ++k) {
            int32_t gc = fx::fixed_tanh(gc_in[k]);
            int32_t r = r_gate[k];
            // r (Q0.15) * gc (Q0.15) -> Q3.12; (1-r) (Q0.15) * lin2 (Q3.12) -> Q3.12
            int64_t rg = fx::rounding_shift_right(int64_t(r) * gc, 18);
            int64_t rl = fx::rounding_shift_right(int64_t(32768 - r) * lin2[k], 15);
            m[k] = static_cast<int16_t>(fx::saturate(rg + rl, 16));
        }
    }

    std::vector<int8_t> m8(hidden);
    for (int k = 0; k < hidden; ++k) {
        m8[k] = static_cast<int8_t>(fx::saturate(fx::apply_multiplier(m[k], w.to_m), 8));
    }
    auto acc = matvec_i8(w.proj, m8);
    IntegerStepResult out;
    out.h.resize(w.output);
    for (int k = 0; k < w.output; ++k) {
        out.h[k] = static_cast<int8_t>(fx::saturate(fx::apply_multiplier(acc[k], w.to_out), 8));
    }
    out.state.c = std::move(c_new);
    out.state.h = out.h;
    return out;
}

}  // namespace ernn::quant
