#include "cells.hpp"

#include <algorithm>
#include <cmath>

namespace ernn::cells {

std::vector<float> layer_norm(std::span<const float> x, const LayerNormParams& p) {
    if (!p.enabled) {
        return {x.begin(), x.end()};
    }
    if (p.gain.size() != x.size() || p.bias.size() != x.size()) {
        fail(ErrorKind::invalid_argument,
             strformat("layer_norm: %zu gain/%zu bias params for width %zu", p.gain.size(),
                       p.bias.size(), x.size()));
    }
    size_t n = x.size();
    double mean = 0.0;
    for (float v : x) {
        mean += v;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : x) {
        double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    double inv_std = 1.0 / std::sqrt(var + p.epsilon);
    std::vector<float> y(n);
    for (size_t k = 0; k < n; ++k) {
        y[k] = static_cast<float>(p.gain[k] * (x[k] - mean) * inv_std + p.bias[k]);
    }
    return y;
}

int weight_rows(const WeightMatrix& w) {
    return std::visit([](const auto& m) { return m.rows; }, w);
}

int weight_cols(const WeightMatrix& w) {
    return std::visit([](const auto& m) { return m.cols; }, w);
}

std::vector<float> weight_matvec(const WeightMatrix& w, std::span<const float> x) {
    if (const auto* dense = std::get_if<Matrix>(&w)) {
        return matvec(*dense, x);
    }
    return blocksparse::matvec(std::get<blocksparse::BlockSparseF>(w), x);
}

CellState zero_state(int hidden, int output) {
    CellState s;
    s.c.assign(hidden, 0.0f);
    s.h.assign(output, 0.0f);
    return s;
}

static float sigmoidf(float v) {
    return 1.0f / (1.0f + std::exp(-v));
}

// pre-activation: LN(W x + R h) + b, or W x + R h + b with LN off.
static std::vector<float> gate_preact(const WeightMatrix& W, const WeightMatrix& R,
                                      std::span<const float> b, const LayerNormParams& ln,
                                      std::span<const float> x, std::span<const float> h,
                                      std::vector<float>* raw_sum) {
    std::vector<float> s = weight_matvec(W, x);
    std::vector<float> r = weight_matvec(R, h);
    for (size_t k = 0; k < s.size(); ++k) {
        s[k] += r[k];
    }
    if (raw_sum != nullptr) {
        *raw_sum = s;
    }
    std::vector<float> pre = layer_norm(s, ln);
    for (size_t k = 0; k < pre.size(); ++k) {
        pre[k] += b[k];
    }
    return pre;
}

static void check_step_dims(int input_width, int hidden, int output, std::span<const float> x,
                            const CellState& s) {
    if (x.size() != static_cast<size_t>(input_width)) {
        fail(ErrorKind::invalid_argument,
             strformat("cell step: input width %zu, expected %d", x.size(), input_width));
    }
    if (s.c.size() != static_cast<size_t>(hidden) || s.h.size() != static_cast<size_t>(output)) {
        fail(ErrorKind::invalid_argument,
             strformat("cell step: state widths %zu/%zu, expected %d/%d", s.c.size(), s.h.size(),
                       hidden, output));
    }
}

StepResult lstm_step(const LstmWeights& w, std::span<const float> x, const CellState& s,
                     LstmStepCache* cache, StepTrace* trace) {
    int hidden = w.hidden_width();
    check_step_dims(w.input_width(), hidden, w.output_width(), x, s);

    bool want_sums = cache != nullptr || trace != nullptr;
    std::vector<float> s_i, s_f, s_z, s_o;
    std::vector<float> i =
        gate_preact(w.W_i, w.R_i, w.b_i, w.ln_i, x, s.h, want_sums ? &s_i : nullptr);
    std::vector<float> f =
        gate_preact(w.W_f, w.R_f, w.b_f, w.ln_f, x, s.h, want_sums ? &s_f : nullptr);
    std::vector<float> z =
        gate_preact(w.W_z, w.R_z, w.b_z, w.ln_z, x, s.h, want_sums ? &s_z : nullptr);
    std::vector<float> o =
        gate_preact(w.W_o, w.R_o, w.b_o, w.ln_o, x, s.h, want_sums ? &s_o : nullptr);
    if (trace != nullptr) {
        trace->pre = {s_i, s_f, s_z, s_o};
    }

    std::vector<float> c(hidden), gc(hidden), m(hidden);
    for (int k = 0; k < hidden; ++k) {
        i[k] = sigmoidf(i[k]);
        f[k] = sigmoidf(f[k]);
        z[k] = std::tanh(z[k]);
        o[k] = sigmoidf(o[k]);
        c[k] = i[k] * z[k] + f[k] * s.c[k];
        gc[k] = std::tanh(c[k]);
        m[k] = o[k] * gc[k];
    }

    StepResult out;
    out.h = matvec(w.W_proj, m);
    out.state.c = c;
    out.state.h = out.h;
    if (trace != nullptr) {
        trace->m = m;
    }
    if (cache != nullptr) {
        cache->x.assign(x.begin(), x.end());
        cache->h_prev = s.h;
        cache->c_prev = s.c;
        cache->s_i = std::move(s_i);
        cache->s_f = std::move(s_f);
        cache->s_z = std::move(s_z);
        cache->s_o = std::move(s_o);
        cache->i = std::move(i);
        cache->f = std::move(f);
        cache->z = std::move(z);
        cache->o = std::move(o);
        cache->c = std::move(c);
        cache->gc = std::move(gc);
        cache->m = std::move(m);
    }
    return out;
}

StepResult cifg_step(const CifgWeights& w, std::span<const float> x, const CellState& s,
                     StepTrace* trace) {
    int hidden = w.hidden_width();
    check_step_dims(w.input_width(), hidden, w.output_width(), x, s);

    bool want = trace != nullptr;
    std::vector<float> s_f, s_z, s_o;
    std::vector<float> f = gate_preact(w.W_f, w.R_f, w.b_f, w.ln_f, x, s.h, want ? &s_f : nullptr);
    std::vector<float> z = gate_preact(w.W_z, w.R_z, w.b_z, w.ln_z, x, s.h, want ? &s_z : nullptr);
    std::vector<float> o = gate_preact(w.W_o, w.R_o, w.b_o, w.ln_o, x, s.h, want ? &s_o : nullptr);
    if (want) {
        trace->pre = {std::move(s_f), std::move(s_z), std::move(s_o)};
    }

    std::vector<float> c(hidden), m(hidden);
    for (int k = 0; k < hidden; ++k) {
        f[k] = sigmoidf(f[k]);
        float i = 1.0f - f[k];
        z[k] = std::tanh(z[k]);
        o[k] = sigmoidf(o[k]);
        c[k] = i * z[k] + f[k] * s.c[k];
        m[k] = o[k] * std::tanh(c[k]);
    }

    StepResult out;
    out.h = matvec(w.W_proj, m);
    out.state.c = std::move(c);
    out.state.h = out.h;
    if (want) {
        trace->m = std::move(m);
    }
    return out;
}

StepResult sru_step(const SruWeights& w, std::span<const float> x, const CellState& s,
                    StepTrace* trace) {
    int hidden = w.hidden_width();
    check_step_dims(w.input_width(), hidden, w.output_width(), x, s);

    bool want = trace != nullptr;
    if (want) {
        trace->pre.clear();
    }
    auto input_branch = [&](const WeightMatrix& W, std::span<const float> b,
                            const LayerNormParams* ln) {
        std::vector<float> v = weight_matvec(W, x);
        if (want) {
            trace->pre.push_back(v);
        }
        if (ln != nullptr) {
            v = layer_norm(v, *ln);
        }
        for (size_t k = 0; k < v.size(); ++k) {
            v[k] += b[k];
        }
        return v;
    };

    std::vector<float> f = input_branch(w.W_f, w.b_f, &w.ln_f);
    std::vector<float> r = input_branch(w.W_r, w.b_r, &w.ln_r);
    std::vector<float> lin1 = input_branch(w.W_x1, w.b_x1, nullptr);
    std::vector<float> lin2 = input_branch(w.W_x2, w.b_x2, nullptr);

    std::vector<float> c(hidden);
    for (int k = 0; k < hidden; ++k) {
        f[k] = sigmoidf(f[k]);
        c[k] = f[k] * s.c[k] + (1.0f - f[k]) * lin1[k];
    }
    std::vector<float> gc = layer_norm(c, w.ln_c);
    std::vector<float> m(hidden);
    for (int k = 0; k < hidden; ++k) {
        r[k] = sigmoidf(r[k]);
        m[k] = r[k] * std::tanh(gc[k]) + (1.0f - r[k]) * lin2[k];
    }

    StepResult out;
    out.h = matvec(w.W_proj, m);
    out.state.c = std::move(c);
    out.state.h = out.h;
    if (want) {
        trace->m = std::move(m);
    }
    return out;
}

// --- backward ---------------------------------------------------------
// Gradients flow in double to keep finite-difference checks meaningful;
// results are narrowed to float at the end.

static void outer_product(Matrix& dW, std::span<const double> dy, std::span<const float> x) {
    if (dW.rows == 0) {
        dW = Matrix(static_cast<int>(dy.size()), static_cast<int>(x.size()));
    }
    for (size_t r = 0; r < dy.size(); ++r) {
        double g = dy[r];
        float* row = dW.data.data() + r * x.size();
        for (size_t c = 0; c < x.size(); ++c) {
            row[c] += static_cast<float>(g * x[c]);
        }
    }
}

static void transpose_matvec_accumulate(const Matrix& w, std::span<const double> dy,
                                        std::vector<double>& dx) {
    for (int r = 0; r < w.rows; ++r) {
        double g = dy[r];
        const float* row = w.data.data() + static_cast<size_t>(r) * w.cols;
        for (int c = 0; c < w.cols; ++c) {
            dx[c] += g * row[c];
        }
    }
}

// Backward of y = gain * (x - mu)/sqrt(var + eps) + bias.
static std::vector<double> layer_norm_backward(std::span<const float> x, const LayerNormParams& p,
                                               std::span<const double> dy,
                                               std::vector<float>* dgain) {
    if (!p.enabled) {
        return {dy.begin(), dy.end()};
    }
    size_t n = x.size();
    double mean = 0.0;
    for (float v : x) {
        mean += v;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : x) {
        double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    double inv_std = 1.0 / std::sqrt(var + p.epsilon);

    std::vector<double> xhat(n);
    for (size_t k = 0; k < n; ++k) {
        xhat[k] = (x[k] - mean) * inv_std;
    }
    if (dgain != nullptr) {
        dgain->resize(n);
        for (size_t k = 0; k < n; ++k) {
            (*dgain)[k] = static_cast<float>(dy[k] * xhat[k]);
        }
    }
    double g_mean = 0.0, gx_mean = 0.0;
    for (size_t k = 0; k < n; ++k) {
        double g = dy[k] * p.gain[k];
        g_mean += g;
        gx_mean += g * xhat[k];
    }
    g_mean /= static_cast<double>(n);
    gx_mean /= static_cast<double>(n);
    std::vector<double> dx(n);
    for (size_t k = 0; k < n; ++k) {
        double g = dy[k] * p.gain[k];
        dx[k] = (g - g_mean - xhat[k] * gx_mean) * inv_std;
    }
    return dx;
}

LstmGrads lstm_step_backward(const LstmWeights& w, const LstmStepCache& cache,
                             std::span<const float> dh, std::span<const float> dc_next) {
    size_t hidden = cache.c.size();
    LstmGrads g;

    // h = W_proj m
    std::vector<double> dhd(dh.begin(), dh.end());
    std::vector<double> dm(hidden, 0.0);
    outer_product(g.dW_proj, dhd, cache.m);
    transpose_matvec_accumulate(w.W_proj, dhd, dm);

    std::vector<double> dc(hidden), da_i(hidden), da_f(hidden), da_z(hidden), da_o(hidden),
        dc_prev(hidden);
    for (size_t k = 0; k < hidden; ++k) {
        double do_ = dm[k] * cache.gc[k];
        dc[k] = dm[k] * cache.o[k] * (1.0 - double(cache.gc[k]) * cache.gc[k]) + dc_next[k];
        double di = dc[k] * cache.z[k];
        double df = dc[k] * cache.c_prev[k];
        double dz = dc[k] * cache.i[k];
        dc_prev[k] = dc[k] * cache.f[k];
        da_i[k] = di * cache.i[k] * (1.0 - cache.i[k]);
        da_f[k] = df * cache.f[k] * (1.0 - cache.f[k]);
        da_z[k] = dz * (1.0 - double(cache.z[k]) * cache.z[k]);
        da_o[k] = do_ * cache.o[k] * (1.0 - cache.o[k]);
    }

    std::vector<double> dx(cache.x.size(), 0.0), dh_prev(cache.h_prev.size(), 0.0);

    auto backprop_gate = [&](const WeightMatrix& W, const WeightMatrix& R,
                             const LayerNormParams& ln, std::span<const float> raw_sum,
                             std::span<const double> da, Matrix& dW, Matrix& dR,
                             std::vector<float>& db, std::vector<float>& dgain) {
        db.resize(da.size());
        for (size_t k = 0; k < da.size(); ++k) {
            db[k] = static_cast<float>(da[k]);
        }
        std::vector<double> ds =
            layer_norm_backward(raw_sum, ln, da, ln.enabled ? &dgain : nullptr);
        const auto& Wd = std::get<Matrix>(W);
        const auto& Rd = std::get<Matrix>(R);
        outer_product(dW, ds, cache.x);
        outer_product(dR, ds, cache.h_prev);
        transpose_matvec_accumulate(Wd, ds, dx);
        transpose_matvec_accumulate(Rd, ds, dh_prev);
    };

    backprop_gate(w.W_i, w.R_i, w.ln_i, cache.s_i, da_i, g.dW_i, g.dR_i, g.db_i, g.dgain_i);
    backprop_gate(w.W_f, w.R_f, w.ln_f, cache.s_f, da_f, g.dW_f, g.dR_f, g.db_f, g.dgain_f);
    backprop_gate(w.W_z, w.R_z, w.ln_z, cache.s_z, da_z, g.dW_z, g.dR_z, g.db_z, g.dgain_z);
    backprop_gate(w.W_o, w.R_o, w.ln_o, cache.s_o, da_o, g.dW_o, g.dR_o, g.db_o, g.dgain_o);

    g.dx.assign(dx.begin(), dx.end());
    g.dh_prev.assign(dh_prev.begin(), dh_prev.end());
    g.dc_prev.assign(dc_prev.begin(), dc_prev.end());
    return g;
}

CellKind kind_of(const CellWeights& w) {
    if (std::holds_alternative<LstmWeights>(w)) {
        return CellKind::lstm;
    }
    if (std::holds_alternative<CifgWeights>(w)) {
        return CellKind::cifg;
    }
    return CellKind::sru;
}

int cell_input_width(const CellWeights& w) {
    return std::visit([](const auto& c) { return c.input_width(); }, w);
}

int cell_hidden_width(const CellWeights& w) {
    return std::visit([](const auto& c) { return c.hidden_width(); }, w);
}

int cell_output_width(const CellWeights& w) {
    return std::visit([](const auto& c) { return c.output_width(); }, w);
}

StepResult cell_step(const CellWeights& w, std::span<const float> x, const CellState& s,
                     StepTrace* trace) {
    if (const auto* lstm = std::get_if<LstmWeights>(&w)) {
        return lstm_step(*lstm, x, s, nullptr, trace);
    }
    if (const auto* cifg = std::get_if<CifgWeights>(&w)) {
        return cifg_step(*cifg, x, s, trace);
    }
    return sru_step(std::get<SruWeights>(w), x, s, trace);
}

std::vector<std::vector<float>> run_sequence(const CellWeights& w,
                                             std::span<const std::vector<float>> inputs,
                                             const CellState& init) {
    std::vector<std::vector<float>> outputs;
    outputs.reserve(inputs.size());
    CellState state = init;
    for (const auto& x : inputs) {
        StepResult r = cell_step(w, x, state);
        state = std::move(r.state);
        outputs.push_back(std::move(r.h));
    }
    return outputs;
}

}  // namespace ernn::cells
