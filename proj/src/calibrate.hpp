#pragma once

#include <map>
#include <span>
#include <string>

#include "common.hpp"
#include "fixedpoint.hpp"
#include "quant.hpp"

namespace ernn::calibrate {

// Running dynamic-range log for one tensor id.
struct TensorStats {
    float max_abs = 0.0f;
    float min = 0.0f;
    float max = 0.0f;
    uint64_t count = 0;  // number of observe() calls
};

// Accumulates per-tensor ranges from float inference. Observers merge
// deterministically, so calibration shards can run in parallel.
class RangeObserver {
public:
    void observe(const std::string& id, std::span<const float> values);
    void merge(const RangeObserver& other);
    // used by the stats file loader
    void restore(const std::string& id, const TensorStats& s) { stats_[id] = s; }

    const std::map<std::string, TensorStats>& stats() const { return stats_; }
    bool empty() const { return stats_.empty(); }

private:
    std::map<std::string, TensorStats> stats_;
};

// scale = max_abs / (2^(b-1) - 1) per required tensor; max_abs 0 maps to
// scale 1. Unobserved required tensors raise one error listing every
// missing id.
std::map<std::string, fixedpoint::QuantParams> finalize(
    const RangeObserver& obs, std::span<const quant::CalibRequirement> required);

quant::ScaleMap finalize_scales(const RangeObserver& obs,
                                std::span<const quant::CalibRequirement> required);

// Standalone stats file ("ERNS", versioned, checksummed).
void save_stats(const RangeObserver& obs, const std::string& path);
RangeObserver load_stats(const std::string& path);

}  // namespace ernn::calibrate
