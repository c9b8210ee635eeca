#include "convert.hpp"

#include <cmath>

namespace ernn {

namespace {

using modelio::LayerSpec;
using modelio::Model;
using modelio::QuantMode;
using modelio::Tensor;

const std::vector<std::string>& weight_gate_list(cells::CellKind kind) {
    static const std::vector<std::string> lstm{"i", "f", "z", "o"};
    static const std::vector<std::string> cifg{"f", "z", "o"};
    static const std::vector<std::string> sru{"f", "r", "x1", "x2"};
    switch (kind) {
        case cells::CellKind::lstm:
            return lstm;
        case cells::CellKind::cifg:
            return cifg;
        default:
            return sru;
    }
}

}  // namespace
}  // namespace ernn

namespace ernn::pruning {

modelio::Model prune_model(const modelio::Model& m, const PruneTargets& targets) {
    if (m.mode != modelio::QuantMode::float32) {
        fail(ErrorKind::invalid_argument, "pruning expects a float model");
    }
    for (double s : {targets.encoder, targets.prediction}) {
        if (s < 0.0 || s >= 1.0) {
            fail(ErrorKind::invalid_argument, strformat("sparsity target %g outside [0, 1)", s));
        }
    }
    modelio::Model out = m;
    auto prune_stack = [&](std::vector<modelio::LayerSpec>& stack, bool encoder, double target) {
        if (target <= 0.0) {
            return;
        }
        for (size_t i = 0; i < stack.size(); ++i) {
            auto& spec = stack[i];
            spec.sparsity = target;
            spec.block_rows = targets.block_rows;
            spec.block_cols = targets.block_cols;
            std::string p = modelio::layer_prefix(encoder, i);
            for (const auto& g : weight_gate_list(spec.kind)) {
                for (const char* which : {"W_", "R_"}) {
                    std::string id = p + "." + which + g;
                    auto it = out.tensors.find(id);
                    if (it == out.tensors.end()) {
                        continue;  // sru has no R tensors
                    }
                    Matrix w = modelio::matrix_from_tensor(it->second);
                    auto mask = compute_block_mask(w, target, targets.block_rows,
                                                   targets.block_cols);
                    Matrix effective =
                        apply_mask(w, mask, targets.block_rows, targets.block_cols);
                    auto sparse = blocksparse::from_dense(effective, targets.block_rows,
                                                          targets.block_cols);
                    it->second = Tensor::from_sparse(sparse);
                }
            }
        }
    };
    prune_stack(out.topology.encoder, true, targets.encoder);
    prune_stack(out.topology.prediction, false, targets.prediction);
    out.topology.validate();
    return out;
}

}  // namespace ernn::pruning

namespace ernn::quant {

using modelio::LayerSpec;
using modelio::Model;
using modelio::QuantMode;
using modelio::Tensor;

QuantizedMatrix qmatrix_from_tensor(const Tensor& t) {
    if (t.dtype != modelio::DType::i8 || !t.qparams) {
        fail(ErrorKind::format, "expected a quantized i8 tensor");
    }
    QuantizedMatrix q;
    q.scale = t.qparams->scale;
    if (t.sparse) {
        q.payload = modelio::sparse_i8_from_tensor(t);
    } else {
        DenseI8 d;
        d.rows = static_cast<int>(t.shape[0]);
        d.cols = static_cast<int>(t.shape[1]);
        auto vals = t.i8();
        d.data.assign(vals.begin(), vals.end());
        q.payload = std::move(d);
    }
    return q;
}

static Tensor tensor_from_qmatrix(const QuantizedMatrix& q) {
    if (q.sparse()) {
        return Tensor::from_sparse_i8(std::get<blocksparse::BlockSparseI8>(q.payload), q.scale);
    }
    const auto& d = std::get<DenseI8>(q.payload);
    return Tensor::dense_i8({d.rows, d.cols}, d.data, q.scale);
}

modelio::Model convert_to_hybrid(const Model& m) {
    if (m.mode != QuantMode::float32) {
        fail(ErrorKind::invalid_argument, "hybrid conversion expects a float model");
    }
    Model out;
    out.topology = m.topology;
    out.mode = QuantMode::hybrid8;
    for (const auto& spec : modelio::model_tensor_specs(m.topology, QuantMode::hybrid8)) {
        const Tensor& src = m.tensor(spec.id);
        if (spec.dtype == modelio::DType::i8) {
            out.tensors[spec.id] = tensor_from_qmatrix(quantize_weights(
                modelio::weight_from_tensor(src)));
        } else {
            out.tensors[spec.id] = src;
        }
    }
    return out;
}

std::vector<CalibRequirement> required_calibration_ids(const modelio::TopologyConfig& t) {
    std::vector<CalibRequirement> out;
    for (size_t i = 0; i < t.encoder.size(); ++i) {
        auto ids = layer_calibration_ids(t.encoder[i].kind, modelio::layer_prefix(true, i), i == 0);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    for (size_t i = 0; i < t.prediction.size(); ++i) {
        auto ids =
            layer_calibration_ids(t.prediction[i].kind, modelio::layer_prefix(false, i), i == 0);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

// --- float cell assembly ---------------------------------------------------

cells::CellWeights cell_weights_from_model(const Model& m, const LayerSpec& spec,
                                           const std::string& p) {
    auto weight = [&](const std::string& name) {
        return modelio::weight_from_tensor(m.tensor(p + "." + name));
    };
    auto vec = [&](const std::string& name) {
        auto v = m.tensor(p + "." + name).f32();
        return std::vector<float>(v.begin(), v.end());
    };
    auto ln = [&](const std::string& name) {
        cells::LayerNormParams out;
        out.enabled = spec.layer_norm;
        if (spec.layer_norm) {
            out.gain = vec(name + ".gain");
            out.bias = vec(name + ".bias");
        }
        return out;
    };
    Matrix proj = modelio::matrix_from_tensor(m.tensor(p + ".proj"));
    switch (spec.kind) {
        case cells::CellKind::lstm: {
            cells::LstmWeights w;
            w.W_i = weight("W_i");
            w.W_f = weight("W_f");
            w.W_z = weight("W_z");
            w.W_o = weight("W_o");
            w.R_i = weight("R_i");
            w.R_f = weight("R_f");
            w.R_z = weight("R_z");
            w.R_o = weight("R_o");
            w.b_i = vec("b_i");
            w.b_f = vec("b_f");
            w.b_z = vec("b_z");
            w.b_o = vec("b_o");
            w.ln_i = ln("ln_i");
            w.ln_f = ln("ln_f");
            w.ln_z = ln("ln_z");
            w.ln_o = ln("ln_o");
            w.W_proj = std::move(proj);
            return w;
        }
        case cells::CellKind::cifg: {
            cells::CifgWeights w;
            w.W_f = weight("W_f");
            w.W_z = weight("W_z");
            w.W_o = weight("W_o");
            w.R_f = weight("R_f");
            w.R_z = weight("R_z");
            w.R_o = weight("R_o");
            w.b_f = vec("b_f");
            w.b_z = vec("b_z");
            w.b_o = vec("b_o");
            w.ln_f = ln("ln_f");
            w.ln_z = ln("ln_z");
            w.ln_o = ln("ln_o");
            w.W_proj = std::move(proj);
            return w;
        }
        default: {
            cells::SruWeights w;
            w.W_f = weight("W_f");
            w.W_r = weight("W_r");
            w.W_x1 = weight("W_x1");
            w.W_x2 = weight("W_x2");
            w.b_f = vec("b_f");
            w.b_r = vec("b_r");
            w.b_x1 = vec("b_x1");
            w.b_x2 = vec("b_x2");
            w.ln_f = ln("ln_f");
            w.ln_r = ln("ln_r");
            w.ln_c = ln("ln_c");
            w.W_proj = std::move(proj);
            return w;
        }
    }
}

HybridCell hybrid_cell_from_model(const Model& m, const LayerSpec& spec, const std::string& p) {
    HybridCell out;
    out.kind = spec.kind;
    out.input = spec.input;
    out.hidden = spec.hidden;
    out.output = spec.proj;
    auto vec = [&](const std::string& name) {
        auto v = m.tensor(p + "." + name).f32();
        return std::vector<float>(v.begin(), v.end());
    };
    auto ln = [&](const std::string& name) {
        cells::LayerNormParams params;
        params.enabled = spec.layer_norm;
        if (spec.layer_norm) {
            params.gain = vec(name + ".gain");
            params.bias = vec(name + ".bias");
        }
        return params;
    };
    bool sru = spec.kind == cells::CellKind::sru;
    for (const auto& g : weight_gate_list(spec.kind)) {
        out.W.push_back(qmatrix_from_tensor(m.tensor(p + ".W_" + g)));
        if (!sru) {
            out.R.push_back(qmatrix_from_tensor(m.tensor(p + ".R_" + g)));
        }
        out.bias.push_back(vec("b_" + g));
    }
    if (sru) {
        out.ln = {ln("ln_f"), ln("ln_r"), ln("ln_c")};
    } else {
        for (const auto& g : weight_gate_list(spec.kind)) {
            out.ln.push_back(ln("ln_" + g));
        }
    }
    out.proj = qmatrix_from_tensor(m.tensor(p + ".proj"));
    return out;
}

// --- integer conversion -------------------------------------------------------

static Tensor i8_vector_tensor(std::span<const int8_t> v, float scale) {
    return Tensor::dense_i8({static_cast<int64_t>(v.size())}, v, scale);
}

static Tensor i32_vector_tensor(std::span<const int32_t> v, float scale) {
    return Tensor::dense_i32({static_cast<int64_t>(v.size())}, v, scale);
}

// Serializes the wired integer cell into model tensors. integer_cell_from_model
// below is the exact inverse; keep the two in sync.
static void dump_integer_cell(const IntegerCell& cell, const LayerSpec& spec,
                              const std::string& p, bool first, const ScaleMap& scales,
                              Model& out) {
    const auto& gates = weight_gate_list(spec.kind);
    size_t n_sigmoid_gates = cell.gates.size();
    for (size_t g = 0; g < n_sigmoid_gates; ++g) {
        const auto& gate = cell.gates[g];
        const std::string& name = gates[g];
        out.tensors[p + ".W_" + name] = tensor_from_qmatrix(gate.W);
        if (gate.R.rows() > 0) {
            out.tensors[p + ".R_" + name] = tensor_from_qmatrix(gate.R);
        }
        if (gate.has_ln) {
            out.tensors[p + ".ln_" + name + ".gain"] =
                i8_vector_tensor(gate.ln_gain, gate.gain_scale);
            out.tensors[p + ".b_" + name] =
                i32_vector_tensor(gate.ln_bias, gate.gain_scale * 0x1p-10f);
        } else {
            out.tensors[p + ".b_" + name] = i32_vector_tensor(gate.bias_pre, gate.pre_scale);
        }
    }
    for (size_t b = 0; b < cell.linear.size(); ++b) {
        const auto& lin = cell.linear[b];
        const std::string& name = gates[n_sigmoid_gates + b];
        out.tensors[p + ".W_" + name] = tensor_from_qmatrix(lin.W);
        out.tensors[p + ".b_" + name] = i32_vector_tensor(
            lin.bias_acc, static_cast<float>(double(lin.W.scale) * cell.in_scale));
    }
    if (cell.has_ln_c) {
        out.tensors[p + ".ln_c.gain"] = i8_vector_tensor(cell.lnc_gain, cell.lnc_gain_scale);
        out.tensors[p + ".ln_c.bias"] =
            i32_vector_tensor(cell.lnc_bias, cell.lnc_gain_scale * 0x1p-10f);
    }
    out.tensors[p + ".proj"] = tensor_from_qmatrix(cell.proj);

    if (first) {
        out.tensors[p + ".scale.in"] = Tensor::scalar_f32(cell.in_scale);
    }
    for (size_t g = 0; g < n_sigmoid_gates; ++g) {
        out.tensors[p + ".scale.pre." + gates[g]] = Tensor::scalar_f32(cell.gates[g].pre_scale);
    }
    if (spec.kind == cells::CellKind::sru) {
        out.tensors[p + ".scale.pre.x1"] = Tensor::scalar_f32(need_scale(scales, p + ".pre.x1"));
        out.tensors[p + ".scale.pre.x2"] = Tensor::scalar_f32(need_scale(scales, p + ".pre.x2"));
    }
    out.tensors[p + ".scale.cell"] = Tensor::scalar_f32(need_scale(scales, p + ".cell"));
    out.tensors[p + ".scale.m"] = Tensor::scalar_f32(cell.m_scale);
    out.tensors[p + ".scale.out"] = Tensor::scalar_f32(cell.out_scale);
}

IntegerCell integer_cell_from_model(const Model& m, const LayerSpec& spec, const std::string& p,
                                    float in_scale) {
    namespace fx = ernn::fixedpoint;
    IntegerCell cell;
    cell.kind = spec.kind;
    cell.input = spec.input;
    cell.hidden = spec.hidden;
    cell.output = spec.proj;
    cell.in_scale = in_scale;
    cell.m_scale = m.scalar(p + ".scale.m");
    cell.out_scale = m.scalar(p + ".scale.out");

    static constexpr double kCellScale = 0x1p-12;
    static constexpr double kActScale = 0x1p-15;
    const auto& gates = weight_gate_list(spec.kind);
    bool sru = spec.kind == cells::CellKind::sru;
    size_t n_sigmoid_gates = sru ? 2 : gates.size();

    for (size_t g = 0; g < n_sigmoid_gates; ++g) {
        const std::string& name = gates[g];
        IntegerGate gate;
        gate.W = qmatrix_from_tensor(m.tensor(p + ".W_" + name));
        gate.pre_scale = m.scalar(p + ".scale.pre." + name);
        gate.to_pre_w =
            fx::make_requant_multiplier(double(gate.W.scale) * in_scale, gate.pre_scale);
        if (!sru) {
            gate.R = qmatrix_from_tensor(m.tensor(p + ".R_" + name));
            gate.to_pre_r =
                fx::make_requant_multiplier(double(gate.R.scale) * cell.out_scale, gate.pre_scale);
        }
        const Tensor& bias = m.tensor(p + ".b_" + name);
        auto bias_vals = bias.i32();
        gate.has_ln = spec.layer_norm;
        if (spec.layer_norm) {
            const Tensor& gain = m.tensor(p + ".ln_" + name + ".gain");
            gate.gain_scale = gain.qparams->scale;
            auto gv = gain.i8();
            gate.ln_gain.assign(gv.begin(), gv.end());
            if (bias.qparams->scale != gate.gain_scale * 0x1p-10f) {
                fail(ErrorKind::format,
                     strformat("%s.b_%s: bias scale %g is not 2^-10 times the gain scale %g",
                               p.c_str(), name.c_str(), bias.qparams->scale, gate.gain_scale));
            }
            gate.ln_bias.assign(bias_vals.begin(), bias_vals.end());
            gate.to_act = fx::make_requant_multiplier(gate.gain_scale, kCellScale);
        } else {
            gate.bias_pre.assign(bias_vals.begin(), bias_vals.end());
            gate.to_act = fx::make_requant_multiplier(gate.pre_scale, kCellScale);
        }
        cell.gates.push_back(std::move(gate));
    }
    if (sru) {
        for (size_t b = 2; b < 4; ++b) {
            IntegerLinear lin;
            lin.W = qmatrix_from_tensor(m.tensor(p + ".W_" + gates[b]));
            auto bias_vals = m.tensor(p + ".b_" + gates[b]).i32();
            lin.bias_acc.assign(bias_vals.begin(), bias_vals.end());
            double acc_scale = double(lin.W.scale) * in_scale;
            lin.to_cell = fx::make_requant_multiplier(acc_scale, kCellScale);
            cell.linear.push_back(std::move(lin));
        }
        cell.has_ln_c = spec.layer_norm;
        if (spec.layer_norm) {
            const Tensor& gain = m.tensor(p + ".ln_c.gain");
            cell.lnc_gain_scale = gain.qparams->scale;
            auto gv = gain.i8();
            cell.lnc_gain.assign(gv.begin(), gv.end());
            auto bv = m.tensor(p + ".ln_c.bias").i32();
            cell.lnc_bias.assign(bv.begin(), bv.end());
            cell.lnc_to_act = fx::make_requant_multiplier(cell.lnc_gain_scale, kCellScale);
        }
        cell.to_m = fx::make_requant_multiplier(kCellScale, cell.m_scale);
    } else {
        cell.to_m = fx::make_requant_multiplier(kActScale, cell.m_scale);
    }
    cell.proj = qmatrix_from_tensor(m.tensor(p + ".proj"));
    cell.to_out =
        fx::make_requant_multiplier(double(cell.proj.scale) * cell.m_scale, cell.out_scale);
    return cell;
}

modelio::Model convert_to_integer(const Model& m, const calibrate::RangeObserver& stats) {
    if (m.mode != QuantMode::float32) {
        fail(ErrorKind::invalid_argument, "integer conversion expects a float model");
    }
    auto required = required_calibration_ids(m.topology);
    ScaleMap scales = calibrate::finalize_scales(stats, required);

    Model out;
    out.topology = m.topology;
    out.mode = QuantMode::integer8_16;

    auto convert_stack = [&](const std::vector<LayerSpec>& stack, bool encoder) {
        float in_scale = 0.0f;
        for (size_t i = 0; i < stack.size(); ++i) {
            std::string p = modelio::layer_prefix(encoder, i);
            in_scale = i == 0 ? need_scale(scales, p + ".in")
                              : need_scale(scales,
                                           modelio::layer_prefix(encoder, i - 1) + ".out");
            auto weights = cell_weights_from_model(m, stack[i], p);
            IntegerCell cell = to_integer(weights, scales, p, in_scale);
            dump_integer_cell(cell, stack[i], p, i == 0, scales, out);
        }
    };
    convert_stack(m.topology.encoder, true);
    convert_stack(m.topology.prediction, false);

    for (const char* id : {"embedding", "joint.W_enc", "joint.W_pred", "softmax.W"}) {
        out.tensors[id] = tensor_from_qmatrix(
            quantize_weights(modelio::matrix_from_tensor(m.tensor(id))));
    }
    out.tensors["joint.b"] = m.tensor("joint.b");
    out.tensors["softmax.b"] = m.tensor("softmax.b");

    // exercise the load path once so wiring problems surface at conversion
    for (size_t i = 0; i < out.topology.encoder.size(); ++i) {
        std::string p = modelio::layer_prefix(true, i);
        float in_scale = i == 0 ? out.scalar(p + ".scale.in")
                                : out.scalar(modelio::layer_prefix(true, i - 1) + ".scale.out");
        integer_cell_from_model(out, out.topology.encoder[i], p, in_scale);
    }
    for (size_t i = 0; i < out.topology.prediction.size(); ++i) {
        std::string p = modelio::layer_prefix(false, i);
        float in_scale = i == 0 ? out.scalar(p + ".scale.in")
                                : out.scalar(modelio::layer_prefix(false, i - 1) + ".scale.out");
        integer_cell_from_model(out, out.topology.prediction[i], p, in_scale);
    }
    return out;
}

}  // namespace ernn::quant
