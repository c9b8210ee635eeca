#pragma once

#include <map>
#include <string>

#include "calibrate.hpp"
#include "model.hpp"
#include "pruning.hpp"
#include "quant.hpp"

namespace ernn::pruning {

// One-shot magnitude pruning of the prunable set (cell W/R matrices) at the
// given per-section sparsity targets; projections, biases, layer norm,
// embedding, joint and softmax are left dense. The pruned W/R tensors are
// rewritten in block-sparse form and the topology records the targets.
struct PruneTargets {
    double encoder = 0.0;
    double prediction = 0.0;
    int block_rows = 16;
    int block_cols = 1;
};

modelio::Model prune_model(const modelio::Model& m, const PruneTargets& targets);

}  // namespace ernn::pruning

namespace ernn::quant {

// Weight-only 8-bit quantization; biases and layer norm stay float. Single
// pass, no statistics required.
modelio::Model convert_to_hybrid(const modelio::Model& m);

// Full integer conversion from calibration statistics. Fails if any dynamic
// tensor lacks stats or any requantize multiplier is unrepresentable.
modelio::Model convert_to_integer(const modelio::Model& m,
                                  const calibrate::RangeObserver& stats);

// Every dynamic tensor id (with bit width) integer conversion needs for
// this topology; calibrate_model produces exactly this set.
std::vector<CalibRequirement> required_calibration_ids(const modelio::TopologyConfig& t);

// Rebuild a quantized matrix from a stored i8 tensor, bit-exact.
QuantizedMatrix qmatrix_from_tensor(const modelio::Tensor& t);

// Assemble executable layer weights from stored tensors.
cells::CellWeights cell_weights_from_model(const modelio::Model& m,
                                           const modelio::LayerSpec& spec,
                                           const std::string& prefix);
HybridCell hybrid_cell_from_model(const modelio::Model& m, const modelio::LayerSpec& spec,
                                  const std::string& prefix);
IntegerCell integer_cell_from_model(const modelio::Model& m, const modelio::LayerSpec& spec,
                                    const std::string& prefix, float in_scale);

}  // namespace ernn::quant
