#include "blocksparse.hpp"

#include <algorithm>

namespace ernn::blocksparse {

template <typename T>
void validate(const BlockSparse<T>& m) {
    if (m.rows <= 0 || m.cols <= 0 || m.block_rows <= 0 || m.block_cols <= 0 ||
        m.rows % m.block_rows != 0 || m.cols % m.block_cols != 0) {
        fail(ErrorKind::format,
             strformat("block sparse matrix %dx%d has invalid block shape %dx%d", m.rows, m.cols,
                       m.block_rows, m.block_cols));
    }
    size_t pos = 0;
    size_t blocks = 0;
    for (int br = 0; br < m.grid_rows(); ++br) {
        if (pos >= m.ledger.size()) {
            fail(ErrorKind::format, strformat("ledger truncated at block row %d", br));
        }
        int32_t count = m.ledger[pos++];
        if (count < 0 || count > m.grid_cols() || pos + count > m.ledger.size()) {
            fail(ErrorKind::format,
                 strformat("ledger count %d out of range at block row %d", count, br));
        }
        int32_t prev = -1;
        for (int32_t k = 0; k < count; ++k) {
            int32_t col = m.ledger[pos++];
            if (col <= prev || col >= m.grid_cols()) {
                fail(ErrorKind::format,
                     strformat("ledger column index %d invalid at block row %d "
                               "(must be strictly increasing and < %d)",
                               col, br, m.grid_cols()));
            }
            prev = col;
        }
        blocks += count;
    }
    if (pos != m.ledger.size()) {
        fail(ErrorKind::format, strformat("ledger has %zu trailing entries", m.ledger.size() - pos));
    }
    if (blocks * m.block_size() != m.data.size()) {
        fail(ErrorKind::format,
             strformat("ledger describes %zu blocks but payload holds %zu", blocks,
                       m.data.size() / m.block_size()));
    }
}

template void validate<float>(const BlockSparse<float>&);
template void validate<int8_t>(const BlockSparse<int8_t>&);

static void check_divisible(int rows, int cols, int block_rows, int block_cols) {
    if (block_rows <= 0 || block_cols <= 0) {
        fail(ErrorKind::invalid_argument,
             strformat("block shape %dx%d must be positive", block_rows, block_cols));
    }
    if (rows % block_rows != 0 || cols % block_cols != 0) {
        int pr = (rows + block_rows - 1) / block_rows * block_rows;
        int pc = (cols + block_cols - 1) / block_cols * block_cols;
        fail(ErrorKind::invalid_argument,
             strformat("matrix %dx%d not divisible by block shape %dx%d; pad to %dx%d first",
                       rows, cols, block_rows, block_cols, pr, pc));
    }
}

template <typename T>
static BlockSparse<T> build(const T* w, int rows, int cols, int block_rows, int block_cols) {
    check_divisible(rows, cols, block_rows, block_cols);
    BlockSparse<T> m;
    m.rows = rows;
    m.cols = cols;
    m.block_rows = block_rows;
    m.block_cols = block_cols;
    int grid_rows = rows / block_rows;
    int grid_cols = cols / block_cols;
    m.ledger.reserve(grid_rows);
    for (int br = 0; br < grid_rows; ++br) {
        size_t count_pos = m.ledger.size();
        m.ledger.push_back(0);
        for (int bc = 0; bc < grid_cols; ++bc) {
            bool nonzero = false;
            for (int i = 0; i < block_rows && !nonzero; ++i) {
                const T* row = w + static_cast<size_t>(br * block_rows + i) * cols +
                               static_cast<size_t>(bc) * block_cols;
                for (int j = 0; j < block_cols; ++j) {
                    if (row[j] != T(0)) {
                        nonzero = true;
                        break;
                    }
                }
            }
            if (!nonzero) {
                continue;
            }
            ++m.ledger[count_pos];
            m.ledger.push_back(bc);
            for (int i = 0; i < block_rows; ++i) {
                const T* row = w + static_cast<size_t>(br * block_rows + i) * cols +
                               static_cast<size_t>(bc) * block_cols;
                m.data.insert(m.data.end(), row, row + block_cols);
            }
        }
    }
    return m;
}

BlockSparseF from_dense(const Matrix& w, int block_rows, int block_cols) {
    return build(w.data.data(), w.rows, w.cols, block_rows, block_cols);
}

BlockSparseI8 from_dense_i8(const std::vector<int8_t>& w, int rows, int cols, int block_rows,
                            int block_cols) {
    if (w.size() != static_cast<size_t>(rows) * cols) {
        fail(ErrorKind::invalid_argument, "from_dense_i8: payload size does not match shape");
    }
    return build(w.data(), rows, cols, block_rows, block_cols);
}

template <typename T>
static void scatter(const BlockSparse<T>& m, T* out) {
    size_t pos = 0;
    size_t blk = 0;
    for (int br = 0; br < m.grid_rows(); ++br) {
        int32_t count = m.ledger[pos++];
        for (int32_t k = 0; k < count; ++k) {
            int32_t bc = m.ledger[pos++];
            const T* src = m.data.data() + blk * m.block_size();
            for (int i = 0; i < m.block_rows; ++i) {
                T* dst = out + static_cast<size_t>(br * m.block_rows + i) * m.cols +
                         static_cast<size_t>(bc) * m.block_cols;
                std::copy(src, src + m.block_cols, dst);
                src += m.block_cols;
            }
            ++blk;
        }
    }
}

Matrix to_dense(const BlockSparseF& m) {
    validate(m);
    Matrix out(m.rows, m.cols);
    scatter(m, out.data.data());
    return out;
}

std::vector<int8_t> to_dense_i8(const BlockSparseI8& m) {
    validate(m);
    std::vector<int8_t> out(static_cast<size_t>(m.rows) * m.cols, 0);
    scatter(m, out.data());
    return out;
}

Matrix pad_to_blocks(const Matrix& w, int block_rows, int block_cols) {
    int pr = (w.rows + block_rows - 1) / block_rows * block_rows;
    int pc = (w.cols + block_cols - 1) / block_cols * block_cols;
    if (pr == w.rows && pc == w.cols) {
        return w;
    }
    Matrix out(pr, pc);
    for (int r = 0; r < w.rows; ++r) {
        std::copy(w.row(r).begin(), w.row(r).end(), out.data.begin() + static_cast<size_t>(r) * pc);
    }
    return out;
}

std::vector<float> matvec(const BlockSparseF& m, std::span<const float> x) {
    if (x.size() != static_cast<size_t>(m.cols)) {
        fail(ErrorKind::invalid_argument,
             strformat("matvec: vector length %zu does not match %d columns", x.size(), m.cols));
    }
    std::vector<float> y(m.rows, 0.0f);
    size_t pos = 0;
    const float* blk = m.data.data();
    for (int br = 0; br < m.grid_rows(); ++br) {
        float* yb = y.data() + static_cast<size_t>(br) * m.block_rows;
        int32_t count = m.ledger[pos++];
        for (int32_t k = 0; k < count; ++k) {
            const float* xb = x.data() + static_cast<size_t>(m.ledger[pos++]) * m.block_cols;
            for (int i = 0; i < m.block_rows; ++i) {
                float acc = 0.0f;
                for (int j = 0; j < m.block_cols; ++j) {
                    acc += blk[j] * xb[j];
                }
                yb[i] += acc;
                blk += m.block_cols;
            }
        }
    }
    return y;
}

std::vector<int32_t> matvec_quantized(const BlockSparseI8& m, std::span<const int8_t> x) {
    if (x.size() != static_cast<size_t>(m.cols)) {
        fail(ErrorKind::invalid_argument,
             strformat("matvec_quantized: vector length %zu does not match %d columns", x.size(),
                       m.cols));
    }
    std::vector<int32_t> y(m.rows, 0);
    size_t pos = 0;
    const int8_t* blk = m.data.data();
    for (int br = 0; br < m.grid_rows(); ++br) {
        int32_t* yb = y.data() + static_cast<size_t>(br) * m.block_rows;
        int32_t count = m.ledger[pos++];
        for (int32_t k = 0; k < count; ++k) {
            const int8_t* xb = x.data() + static_cast<size_t>(m.ledger[pos++]) * m.block_cols;
            for (int i = 0; i < m.block_rows; ++i) {
                int32_t acc = 0;
                for (int j = 0; j < m.block_cols; ++j) {
                    acc += static_cast<int32_t>(blk[j]) * static_cast<int32_t>(xb[j]);
                }
                yb[i] += acc;
                blk += m.block_cols;
            }
        }
    }
    return y;
}

}  // namespace ernn::blocksparse
