#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cells.hpp"
#include "common.hpp"

namespace ernn::modelio {

enum class QuantMode : uint8_t { float32 = 0, hybrid8 = 1, integer8_16 = 2 };

const char* quant_mode_name(QuantMode mode);
QuantMode quant_mode_from_name(const std::string& name);

struct LayerSpec {
    cells::CellKind kind = cells::CellKind::lstm;
    int input = 0;
    int hidden = 0;
    int proj = 0;
    bool layer_norm = true;
    double sparsity = 0.0;  // 0 = dense
    int block_rows = 16;
    int block_cols = 1;
};

// The layer-stack description of the transducer: encoder and prediction
// stacks of recurrent layers, an embedding for the prediction input, and a
// joint network feeding the softmax.
struct TopologyConfig {
    int feature_width = 1152;
    int embedding_width = 128;
    int vocab_size = 4096;
    int joint_hidden = 640;
    std::string joint_activation = "tanh";
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> prediction;

    void validate() const;
    int encoder_output_width() const { return encoder.back().proj; }
    int prediction_output_width() const { return prediction.back().proj; }
};

// "enc0", "dec1", ...
std::string layer_prefix(bool encoder, size_t index);

struct ParamCounts {
    int64_t encoder = 0;
    int64_t prediction = 0;
    int64_t embedding = 0;
    int64_t joint = 0;
    int64_t softmax = 0;
    int64_t total() const { return encoder + prediction + embedding + joint + softmax; }
};

// Exact parameter count; sparse layers count only retained W/R parameters
// (the prunable set is the cells' input and recurrent matrices).
ParamCounts count_params(const TopologyConfig& t);

// Parameters of one layer and, separately, its prunable W/R mass after
// applying the sparsity target.
struct LayerParams {
    int64_t total = 0;
    int64_t retained_wr = 0;  // included in total
};
LayerParams layer_params(const LayerSpec& spec);

// Plain-text key-value format consumed by the CLI; serialize_topology emits
// the canonical form embedded in model files.
TopologyConfig parse_topology(const std::string& text);
std::string serialize_topology(const TopologyConfig& t);

TopologyConfig load_topology_file(const std::string& path);

// The paper-scale baseline: 8 encoder + 2 prediction LSTM layers, 2048
// hidden units, 640 projection, 4096 word pieces.
TopologyConfig baseline_topology(cells::CellKind cell = cells::CellKind::lstm,
                                 double sparsity = 0.0);

}  // namespace ernn::modelio
