#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ernn {

// Error taxonomy shared by the whole engine. The kinds map onto the C API
// status codes; the CLI folds them into its exit codes.
enum class ErrorKind {
    invalid_argument,  // bad shapes, bad config, bad parameter values
    format,            // malformed files
    checksum,          // stored checksum does not match the payload
    version,           // unsupported format version
    missing_tensor,    // model file lacks a tensor the topology requires
    numeric,           // non-finite values, overflow guarantees violated
    io,                // filesystem failures
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline std::string strformat(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    int n = std::vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
    std::vsnprintf(out.data(), out.size() + 1, fmt, args2);
    va_end(args2);
    return out;
}

[[noreturn]] inline void fail(ErrorKind kind, std::string message) {
    throw Error(kind, std::move(message));
}

// Dense row-major float matrix. Weight matrices all over the engine are
// stored this way when not block-sparse.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }
    size_t size() const { return data.size(); }
};

std::vector<float> matvec(const Matrix& m, std::span<const float> x);

// Deterministic PRNG used for synthetic weights and test data. mt19937 plus
// the standard distributions is not bit-stable across library versions, so
// frozen goldens use this instead.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next() % n; }

private:
    uint64_t state_;
};

inline void check_finite(std::span<const float> v, const char* what) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            fail(ErrorKind::numeric,
                 strformat("%s: non-finite value %g at index %zu", what, v[i], i));
        }
    }
}

}  // namespace ernn
