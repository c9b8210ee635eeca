#include <doctest.h>

#include <cmath>

#include "cells.hpp"
#include "oracles.hpp"

using namespace ernn;
using namespace ernn::cells;

namespace {

Matrix scalar_matrix(float v) {
    Matrix m(1, 1);
    m.at(0, 0) = v;
    return m;
}

LstmWeights scalar_lstm(const oracle::ScalarLstmParams& p) {
    LstmWeights w;
    w.W_i = scalar_matrix(float(p.W_i));
    w.W_f = scalar_matrix(float(p.W_f));
    w.W_z = scalar_matrix(float(p.W_z));
    w.W_o = scalar_matrix(float(p.W_o));
    w.R_i = scalar_matrix(float(p.R_i));
    w.R_f = scalar_matrix(float(p.R_f));
    w.R_z = scalar_matrix(float(p.R_z));
    w.R_o = scalar_matrix(float(p.R_o));
    w.b_i = {float(p.b_i)};
    w.b_f = {float(p.b_f)};
    w.b_z = {float(p.b_z)};
    w.b_o = {float(p.b_o)};
    w.W_proj = scalar_matrix(1.0f);
    return w;
}

// Random dense LSTM with optional layer norm, for gradient checks.
LstmWeights random_lstm(SplitMix64& rng, int input, int hidden, int output, bool ln) {
    LstmWeights w;
    auto mat = [&](int r, int c) { return oracle::random_matrix(rng, r, c, -0.5, 0.5); };
    w.W_i = mat(hidden, input);
    w.W_f = mat(hidden, input);
    w.W_z = mat(hidden, input);
    w.W_o = mat(hidden, input);
    w.R_i = mat(hidden, output);
    w.R_f = mat(hidden, output);
    w.R_z = mat(hidden, output);
    w.R_o = mat(hidden, output);
    w.b_i = oracle::random_vector(rng, hidden, -0.3, 0.3);
    w.b_f = oracle::random_vector(rng, hidden, -0.3, 0.3);
    w.b_z = oracle::random_vector(rng, hidden, -0.3, 0.3);
    w.b_o = oracle::random_vector(rng, hidden, -0.3, 0.3);
    for (LayerNormParams* p : {&w.ln_i, &w.ln_f, &w.ln_z, &w.ln_o}) {
        p->enabled = ln;
        if (ln) {
            p->gain = oracle::random_vector(rng, hidden, 0.5, 1.5);
            p->bias.assign(hidden, 0.0f);
        }
    }
    w.W_proj = mat(output, hidden);
    return w;
}

}  // namespace

TEST_CASE("layer_norm worked examples") {
    LayerNormParams p;
    p.enabled = true;
    p.gain = {1.0f, 1.0f};
    p.bias = {0.0f, 0.0f};

    std::vector<float> x{1.0f, -1.0f};
    auto y = layer_norm(x, p);
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-5));

    p.gain = {3.0f, 3.0f};
    p.bias = {1.0f, 1.0f};
    std::vector<float> x2{2.0f, 0.0f};
    y = layer_norm(x2, p);
    CHECK(y[0] == doctest::Approx(4.0).epsilon(1e-5));
    CHECK(y[1] == doctest::Approx(-2.0).epsilon(1e-5));

    // constant input: epsilon guards the zero variance
    p.gain = {1.0f, 1.0f};
    p.bias = {0.0f, 0.0f};
    std::vector<float> x3{5.0f, 5.0f};
    y = layer_norm(x3, p);
    CHECK(std::fabs(y[0]) < 1e-3);
    CHECK(std::fabs(y[1]) < 1e-3);

    // disabled: identity
    p.enabled = false;
    y = layer_norm(x2, p);
    CHECK(y == x2);
}

TEST_CASE("layer_norm output statistics") {
    SplitMix64 rng(5);
    LayerNormParams p;
    p.enabled = true;
    for (int trial = 0; trial < 50; ++trial) {
        int n = 4 + int(rng.below(60));
        p.gain.assign(n, 1.0f);
        p.bias.assign(n, 0.0f);
        auto x = oracle::random_vector(rng, n, -2.0, 2.0);
        auto y = layer_norm(x, p);
        double mean = 0.0;
        for (float v : y) {
            mean += v;
        }
        mean /= n;
        double var = 0.0;
        for (float v : y) {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        CHECK(std::fabs(mean) <= 1e-6);
        double sd = std::sqrt(var);
        CHECK(sd <= 1.0 + 1e-6);
        CHECK(sd >= 1.0 - 1e-3);
    }
}

TEST_CASE("lstm_step zero cell and scalar trace") {
    oracle::ScalarLstmParams zero;
    auto w = scalar_lstm(zero);
    auto r = lstm_step(w, std::vector<float>{1.0f}, zero_state(1, 1));
    CHECK(r.h[0] == 0.0f);

    oracle::ScalarLstmParams p;
    p.W_z = 1.0;
    w = scalar_lstm(p);
    r = lstm_step(w, std::vector<float>{1.0f}, zero_state(1, 1));
    auto [h_ref, c_ref] = oracle::scalar_lstm_step(p, 1.0, 0.0, 0.0);
    CHECK(r.h[0] == doctest::Approx(h_ref).epsilon(1e-6));
    CHECK(r.state.c[0] == doctest::Approx(c_ref).epsilon(1e-6));
    // the numbers themselves: i=f=o=0.5, z=tanh(1), c=0.38080, h=0.18161
    CHECK(r.state.c[0] == doctest::Approx(0.38080).epsilon(1e-4));
    CHECK(r.h[0] == doctest::Approx(0.18161).epsilon(1e-4));
}

TEST_CASE("saturated gates carry the cell state unchanged") {
    oracle::ScalarLstmParams p;
    p.b_f = 40.0;   // f ~= 1
    p.b_i = -40.0;  // i ~= 0
    auto w = scalar_lstm(p);
    CellState s;
    s.c = {0.731f};
    s.h = {0.0f};
    auto r = lstm_step(w, std::vector<float>{0.3f}, s);
    CHECK(r.state.c[0] == doctest::Approx(0.731).epsilon(1e-6));
}

TEST_CASE("cifg zero parameters and coupled gate") {
    CifgWeights w;
    w.W_f = scalar_matrix(0.0f);
    w.W_z = scalar_matrix(0.0f);
    w.W_o = scalar_matrix(0.0f);
    w.R_f = scalar_matrix(0.0f);
    w.R_z = scalar_matrix(0.0f);
    w.R_o = scalar_matrix(0.0f);
    w.b_f = {0.0f};
    w.b_z = {0.0f};
    w.b_o = {0.0f};
    w.W_proj = scalar_matrix(1.0f);
    auto r = cifg_step(w, std::vector<float>{1.0f}, zero_state(1, 1));
    CHECK(r.h[0] == 0.0f);  // z = 0 forces c = m = 0 despite f = i = 0.5
}

TEST_CASE("cifg equals lstm with mirrored input-gate parameters") {
    SplitMix64 rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        oracle::ScalarLstmParams p;
        p.W_f = rng.uniform(-1, 1);
        p.W_z = rng.uniform(-1, 1);
        p.W_o = rng.uniform(-1, 1);
        p.R_f = rng.uniform(-1, 1);
        p.R_z = rng.uniform(-1, 1);
        p.R_o = rng.uniform(-1, 1);
        p.b_f = rng.uniform(-1, 1);
        p.b_z = rng.uniform(-1, 1);
        p.b_o = rng.uniform(-1, 1);
        // sigma(-a) = 1 - sigma(a): mirroring reproduces i = 1 - f exactly
        p.W_i = -p.W_f;
        p.R_i = -p.R_f;
        p.b_i = -p.b_f;

        auto lstm = scalar_lstm(p);
        CifgWeights cifg;
        cifg.W_f = lstm.W_f;
        cifg.W_z = lstm.W_z;
        cifg.W_o = lstm.W_o;
        cifg.R_f = lstm.R_f;
        cifg.R_z = lstm.R_z;
        cifg.R_o = lstm.R_o;
        cifg.b_f = lstm.b_f;
        cifg.b_z = lstm.b_z;
        cifg.b_o = lstm.b_o;
        cifg.W_proj = lstm.W_proj;

        CellState sa = zero_state(1, 1);
        CellState sb = zero_state(1, 1);
        for (int t = 0; t < 20; ++t) {
            std::vector<float> x{float(rng.uniform(-1, 1))};
            auto ra = lstm_step(lstm, x, sa);
            auto rb = cifg_step(cifg, x, sb);
            CHECK(ra.h[0] == doctest::Approx(rb.h[0]).epsilon(1e-6));
            sa = ra.state;
            sb = rb.state;
        }
    }
}

TEST_CASE("sru zero parameters and scalar trace") {
    oracle::ScalarSruParams zero;
    SruWeights w;
    w.W_f = scalar_matrix(0.0f);
    w.W_r = scalar_matrix(0.0f);
    w.W_x1 = scalar_matrix(0.0f);
    w.W_x2 = scalar_matrix(0.0f);
    w.b_f = {0.0f};
    w.b_r = {0.0f};
    w.b_x1 = {0.0f};
    w.b_x2 = {0.0f};
    w.W_proj = scalar_matrix(1.0f);
    auto r = sru_step(w, std::vector<float>{1.0f}, zero_state(1, 1));
    CHECK(r.h[0] == 0.0f);
    CHECK(r.state.c[0] == 0.0f);

    w.W_x1 = scalar_matrix(1.0f);
    r = sru_step(w, std::vector<float>{1.0f}, zero_state(1, 1));
    oracle::ScalarSruParams p;
    p.W_x1 = 1.0;
    auto [m_ref, c_ref] = oracle::scalar_sru_step(p, 1.0, 0.0);
    CHECK(r.state.c[0] == doctest::Approx(c_ref).epsilon(1e-6));
    CHECK(r.h[0] == doctest::Approx(m_ref).epsilon(1e-6));
    CHECK(r.h[0] == doctest::Approx(0.23106).epsilon(1e-4));
}

TEST_CASE("sru forget gate at one freezes the cell") {
    SruWeights w;
    w.W_f = scalar_matrix(0.0f);
    w.W_r = scalar_matrix(0.0f);
    w.W_x1 = scalar_matrix(3.0f);
    w.W_x2 = scalar_matrix(0.0f);
    w.b_f = {40.0f};
    w.b_r = {0.0f};
    w.b_x1 = {0.0f};
    w.b_x2 = {0.0f};
    w.W_proj = scalar_matrix(1.0f);
    CellState s;
    s.c = {0.42f};
    s.h = {0.0f};
    for (int t = 0; t < 5; ++t) {
        auto r = sru_step(w, std::vector<float>{float(t)}, s);
        s = r.state;
        CHECK(s.c[0] == doctest::Approx(0.42).epsilon(1e-6));
    }
}

TEST_CASE("run_sequence folds the step function") {
    CellWeights cell = scalar_lstm([] {
        oracle::ScalarLstmParams p;
        p.W_z = 1.0;
        p.R_z = 0.5;
        return p;
    }());

    std::vector<std::vector<float>> empty;
    CHECK(run_sequence(cell, empty, zero_state(1, 1)).empty());

    std::vector<std::vector<float>> inputs{{0.5f}, {-0.3f}, {1.0f}};
    auto outs = run_sequence(cell, inputs, zero_state(1, 1));
    REQUIRE(outs.size() == 3);

    // hand-unrolled oracle
    oracle::ScalarLstmParams p;
    p.W_z = 1.0;
    p.R_z = 0.5;
    double h = 0.0, c = 0.0;
    for (size_t t = 0; t < inputs.size(); ++t) {
        std::tie(h, c) = oracle::scalar_lstm_step(p, inputs[t][0], h, c);
        CHECK(outs[t][0] == doctest::Approx(h).epsilon(1e-5));
    }
}

TEST_CASE("gate ranges stay inside their bounds") {
    SplitMix64 rng(67);
    auto w = random_lstm(rng, 3, 6, 4, false);
    CellState s = zero_state(6, 4);
    for (int t = 0; t < 50; ++t) {
        auto x = oracle::random_vector(rng, 3);
        LstmStepCache cache;
        auto r = lstm_step(w, x, s, &cache);
        for (int k = 0; k < 6; ++k) {
            CHECK(cache.i[k] > 0.0f);
            CHECK(cache.i[k] < 1.0f);
            CHECK(cache.f[k] > 0.0f);
            CHECK(cache.f[k] < 1.0f);
            CHECK(cache.z[k] > -1.0f);
            CHECK(cache.z[k] < 1.0f);
            CHECK(std::fabs(r.state.c[k]) <= std::max(0.0, double(t + 1)) + 1e-5);
        }
        s = r.state;
    }
}

TEST_CASE("cifg removes a quarter of the gate matrix parameters") {
    auto count = [](const WeightMatrix& m) {
        return size_t(weight_rows(m)) * size_t(weight_cols(m));
    };
    SplitMix64 rng(71);
    auto lstm = random_lstm(rng, 5, 8, 4, false);
    size_t lstm_wr = count(lstm.W_i) + count(lstm.W_f) + count(lstm.W_z) + count(lstm.W_o) +
                     count(lstm.R_i) + count(lstm.R_f) + count(lstm.R_z) + count(lstm.R_o);
    size_t cifg_wr = count(lstm.W_f) + count(lstm.W_z) + count(lstm.W_o) + count(lstm.R_f) +
                     count(lstm.R_z) + count(lstm.R_o);
    CHECK(cifg_wr * 4 == lstm_wr * 3);
}

namespace {

oracle::DoubleLstm to_oracle(const LstmWeights& w) {
    oracle::DoubleLstm o;
    o.input = w.input_width();
    o.hidden = w.hidden_width();
    o.output = w.output_width();
    o.ln = w.ln_i.enabled;
    o.eps = w.ln_i.epsilon;
    const WeightMatrix* Ws[4] = {&w.W_i, &w.W_f, &w.W_z, &w.W_o};
    const WeightMatrix* Rs[4] = {&w.R_i, &w.R_f, &w.R_z, &w.R_o};
    const std::vector<float>* bs[4] = {&w.b_i, &w.b_f, &w.b_z, &w.b_o};
    const LayerNormParams* lns[4] = {&w.ln_i, &w.ln_f, &w.ln_z, &w.ln_o};
    for (int g = 0; g < 4; ++g) {
        const auto& Wd = std::get<Matrix>(*Ws[g]);
        const auto& Rd = std::get<Matrix>(*Rs[g]);
        o.W[g].assign(Wd.data.begin(), Wd.data.end());
        o.R[g].assign(Rd.data.begin(), Rd.data.end());
        o.b[g].assign(bs[g]->begin(), bs[g]->end());
        if (o.ln) {
            o.gain[g].assign(lns[g]->gain.begin(), lns[g]->gain.end());
            o.ln_bias[g].assign(lns[g]->bias.begin(), lns[g]->bias.end());
        }
    }
    o.proj.assign(w.W_proj.data.begin(), w.W_proj.data.end());
    return o;
}

struct GradCheckContext {
    oracle::DoubleLstm oracle_cell;
    std::vector<double> x, h_prev, c_prev;
    std::vector<float> dh, dc;

    // central difference on a parameter slot of the double oracle
    double fd(double* param) {
        const double eps = 1e-5;
        double saved = *param;
        *param = saved + eps;
        double up = oracle_cell.loss(x, h_prev, c_prev, dh, dc);
        *param = saved - eps;
        double down = oracle_cell.loss(x, h_prev, c_prev, dh, dc);
        *param = saved;
        return (up - down) / (2.0 * eps);
    }

    void compare(double* param, double analytic) {
        double ref = fd(param);
        double denom = std::max({std::fabs(ref), std::fabs(analytic), 1e-2});
        CHECK(std::fabs(ref - analytic) / denom <= 1e-4);
    }
};

}  // namespace

TEST_CASE("analytic backprop matches finite differences") {
    for (bool ln : {false, true}) {
        CAPTURE(ln);
        SplitMix64 rng(ln ? 73 : 79);
        int input = 4, hidden = 6, output = 3;
        auto w = random_lstm(rng, input, hidden, output, ln);
        auto x = oracle::random_vector(rng, input);
        CellState s;
        s.c = oracle::random_vector(rng, hidden, -0.5, 0.5);
        s.h = oracle::random_vector(rng, output, -0.5, 0.5);

        GradCheckContext ctx;
        ctx.oracle_cell = to_oracle(w);
        ctx.x.assign(x.begin(), x.end());
        ctx.h_prev.assign(s.h.begin(), s.h.end());
        ctx.c_prev.assign(s.c.begin(), s.c.end());
        ctx.dh = oracle::random_vector(rng, output);
        ctx.dc = oracle::random_vector(rng, hidden);

        LstmStepCache cache;
        lstm_step(w, x, s, &cache);
        auto g = lstm_step_backward(w, cache, ctx.dh, ctx.dc);

        auto& oc = ctx.oracle_cell;
        const Matrix* analytic_W[4] = {&g.dW_i, &g.dW_f, &g.dW_z, &g.dW_o};
        const Matrix* analytic_R[4] = {&g.dR_i, &g.dR_f, &g.dR_z, &g.dR_o};
        const std::vector<float>* analytic_b[4] = {&g.db_i, &g.db_f, &g.db_z, &g.db_o};
        const std::vector<float>* analytic_gain[4] = {&g.dgain_i, &g.dgain_f, &g.dgain_z,
                                                      &g.dgain_o};
        for (int gate = 0; gate < 4; ++gate) {
            for (int probe = 0; probe < 6; ++probe) {
                int r = int(rng.below(hidden));
                int c = int(rng.below(input));
                ctx.compare(&oc.W_at(gate, r, c), analytic_W[gate]->at(r, c));
                int c2 = int(rng.below(output));
                ctx.compare(&oc.R_at(gate, r, c2), analytic_R[gate]->at(r, c2));
            }
            for (int k = 0; k < hidden; ++k) {
                ctx.compare(&oc.b[gate][k], (*analytic_b[gate])[k]);
                if (ln) {
                    ctx.compare(&oc.gain[gate][k], (*analytic_gain[gate])[k]);
                }
            }
        }
        for (int r = 0; r < output; ++r) {
            for (int c = 0; c < hidden; ++c) {
                ctx.compare(&oc.proj_at(r, c), g.dW_proj.at(r, c));
            }
        }
        // input and state gradients
        for (int k = 0; k < input; ++k) {
            ctx.compare(&ctx.x[k], g.dx[k]);
        }
        for (int k = 0; k < output; ++k) {
            ctx.compare(&ctx.h_prev[k], g.dh_prev[k]);
        }
        for (int k = 0; k < hidden; ++k) {
            ctx.compare(&ctx.c_prev[k], g.dc_prev[k]);
        }
    }
}

TEST_CASE("cell step rejects mismatched dimensions") {
    SplitMix64 rng(83);
    auto w = random_lstm(rng, 3, 6, 4, false);
    std::vector<float> wrong(5, 0.0f);
    CHECK_THROWS_AS(lstm_step(w, wrong, zero_state(6, 4)), Error);
    std::vector<float> ok(3, 0.0f);
    CHECK_THROWS_AS(lstm_step(w, ok, zero_state(2, 4)), Error);
}
