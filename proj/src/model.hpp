#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "blocksparse.hpp"
#include "cells.hpp"
#include "common.hpp"
#include "fixedpoint.hpp"
#include "topology.hpp"

namespace ernn::modelio {

enum class DType : uint8_t { f32 = 0, i8 = 1, i16 = 2, i32 = 3 };

size_t dtype_size(DType t);
const char* dtype_name(DType t);

// One named tensor: raw little-endian payload plus optional quantization
// parameters and optional BCSR structure (ledger + block shape; the payload
// then holds only the stored blocks).
struct Tensor {
    DType dtype = DType::f32;
    std::vector<int64_t> shape;
    std::optional<fixedpoint::QuantParams> qparams;
    bool sparse = false;
    int32_t block_rows = 0;
    int32_t block_cols = 0;
    std::vector<int32_t> ledger;
    std::vector<uint8_t> bytes;

    int64_t elements() const;  // product of shape
    size_t payload_values() const { return bytes.size() / dtype_size(dtype); }

    std::span<const float> f32() const;
    std::span<const int8_t> i8() const;
    std::span<const int32_t> i32() const;

    static Tensor dense_f32(std::vector<int64_t> shape, std::span<const float> values);
    static Tensor dense_i8(std::vector<int64_t> shape, std::span<const int8_t> values,
                           float scale);
    static Tensor dense_i32(std::vector<int64_t> shape, std::span<const int32_t> values,
                            float scale);
    static Tensor scalar_f32(float value);

    static Tensor from_matrix(const Matrix& m);
    static Tensor from_sparse(const blocksparse::BlockSparseF& m);
    static Tensor from_sparse_i8(const blocksparse::BlockSparseI8& m, float scale);
    static Tensor from_weight(const cells::WeightMatrix& w);
};

// Rebuild typed views of a tensor.
Matrix matrix_from_tensor(const Tensor& t);
cells::WeightMatrix weight_from_tensor(const Tensor& t);
blocksparse::BlockSparseF sparse_from_tensor(const Tensor& t);
blocksparse::BlockSparseI8 sparse_i8_from_tensor(const Tensor& t);

struct Model {
    TopologyConfig topology;
    QuantMode mode = QuantMode::float32;
    std::map<std::string, Tensor> tensors;

    const Tensor& tensor(const std::string& id) const;
    float scalar(const std::string& id) const;
};

// The exact tensor ids (and dtypes/shapes) a topology requires in a given
// mode; load() validates files against this schema.
struct TensorSpec {
    std::string id;
    DType dtype = DType::f32;
    std::vector<int64_t> shape;
    bool quantized = false;  // carries QuantParams
    bool prunable = false;   // cell W/R: may be stored sparse
    double sparsity = 0.0;
    int block_rows = 16;
    int block_cols = 1;
};

std::vector<TensorSpec> model_tensor_specs(const TopologyConfig& t, QuantMode mode);

// Deterministic synthetic float model: weights uniform in
// [-weight_scale, weight_scale], small biases, unit-ish layer norm gains.
Model make_random_model(const TopologyConfig& t, uint64_t seed, float weight_scale = 0.25f);

// Bit-exact binary format ("ERNN", versioned, CRC-32 trailer).
void save(const Model& m, const std::string& path);
Model load(const std::string& path);

// Exact size the serializer would produce for a generated model of this
// topology/mode (sparse layers at their target sparsity).
uint64_t file_size_estimate(const TopologyConfig& t, QuantMode mode);

}  // namespace ernn::modelio
