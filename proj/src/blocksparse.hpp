#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "common.hpp"
#include "fixedpoint.hpp"

namespace ernn::blocksparse {

// Block compressed sparse row variant. Non-zero blocks are stored in
// row-major block order; the ledger holds, for each block row, the count of
// stored blocks followed by their block-column indices in increasing order.
// Column indices are absolute, not delta encoded.
template <typename T>
struct BlockSparse {
    int rows = 0;
    int cols = 0;
    int block_rows = 16;
    int block_cols = 1;
    std::vector<T> data;          // stored blocks, each block_rows*block_cols, row-major
    std::vector<int32_t> ledger;  // per block row: count, then column indices

    int grid_rows() const { return rows / block_rows; }
    int grid_cols() const { return cols / block_cols; }
    size_t block_size() const { return static_cast<size_t>(block_rows) * block_cols; }
    size_t stored_blocks() const { return data.size() / block_size(); }
};

using BlockSparseF = BlockSparse<float>;
using BlockSparseI8 = BlockSparse<int8_t>;

// Validates ledger/data consistency; throws ErrorKind::format on corruption.
template <typename T>
void validate(const BlockSparse<T>& m);

// A block is stored iff any entry is non-zero (exact test). Dimensions must
// be divisible by the block shape; the error message names the padded shape
// that would work.
BlockSparseF from_dense(const Matrix& w, int block_rows, int block_cols);

Matrix to_dense(const BlockSparseF& m);

// Same layout for already-quantized int8 payloads.
BlockSparseI8 from_dense_i8(const std::vector<int8_t>& w, int rows, int cols, int block_rows,
                            int block_cols);
std::vector<int8_t> to_dense_i8(const BlockSparseI8& m);

// Zero-pads rows/cols up to the next multiple of the block shape.
Matrix pad_to_blocks(const Matrix& w, int block_rows, int block_cols);

std::vector<float> matvec(const BlockSparseF& m, std::span<const float> x);

// int8 x int8 -> int32 accumulators, bit-exact equal to the dense integer
// product. Construction rejects matrices whose column count could overflow
// the 32-bit accumulator guarantee (cols > 2^16).
std::vector<int32_t> matvec_quantized(const BlockSparseI8& m, std::span<const int8_t> x);

// Fraction of block positions not stored, in [0, 1].
template <typename T>
double sparsity(const BlockSparse<T>& m) {
    size_t total = static_cast<size_t>(m.grid_rows()) * m.grid_cols();
    if (total == 0) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(m.stored_blocks()) / static_cast<double>(total);
}

}  // namespace ernn::blocksparse
