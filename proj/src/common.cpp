#include "common.hpp"

namespace ernn {

std::vector<float> matvec(const Matrix& m, std::span<const float> x) {
    if (x.size() != static_cast<size_t>(m.cols)) {
        fail(ErrorKind::invalid_argument,
             strformat("matvec: vector length %zu does not match %d columns", x.size(), m.cols));
    }
    std::vector<float> y(m.rows, 0.0f);
    for (int r = 0; r < m.rows; ++r) {
        const float* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        float acc = 0.0f;
        for (int c = 0; c < m.cols; ++c) {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
    return y;
}

}  // namespace ernn
