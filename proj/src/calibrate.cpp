#include "calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "serial.hpp"

namespace ernn::calibrate {

static constexpr char kMagic[4] = {'E', 'R', 'N', 'S'};
static constexpr uint32_t kVersion = 1;

void RangeObserver::observe(const std::string& id, std::span<const float> values) {
    for (size_t k = 0; k < values.size(); ++k) {
        if (!std::isfinite(values[k])) {
            fail(ErrorKind::numeric,
                 strformat("calibration: non-finite value %g in tensor '%s' at index %zu",
                           values[k], id.c_str(), k));
        }
    }
    auto& s = stats_[id];
    if (s.count == 0 && !values.empty()) {
        s.min = values[0];
        s.max = values[0];
    }
    for (float v : values) {
        s.max_abs = std::max(s.max_abs, std::fabs(v));
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
    }
    ++s.count;
}

void RangeObserver::merge(const RangeObserver& other) {
    for (const auto& [id, theirs] : other.stats_) {
        auto it = stats_.find(id);
        if (it == stats_.end()) {
            stats_[id] = theirs;
            continue;
        }
        auto& mine = it->second;
        if (mine.count == 0) {
            mine = theirs;
            continue;
        }
        if (theirs.count > 0) {
            mine.max_abs = std::max(mine.max_abs, theirs.max_abs);
            mine.min = std::min(mine.min, theirs.min);
            mine.max = std::max(mine.max, theirs.max);
            mine.count += theirs.count;
        }
    }
}

std::map<std::string, fixedpoint::QuantParams> finalize(
    const RangeObserver& obs, std::span<const quant::CalibRequirement> required) {
    std::string missing;
    std::map<std::string, fixedpoint::QuantParams> out;
    for (const auto& req : required) {
        auto it = obs.stats().find(req.id);
        if (it == obs.stats().end() || it->second.count == 0) {
            missing += missing.empty() ? req.id : ", " + req.id;
            continue;
        }
        float max_abs = it->second.max_abs;
        float denom = static_cast<float>((1 << (req.bit_width - 1)) - 1);
        fixedpoint::QuantParams params;
        params.bit_width = req.bit_width;
        params.scale = max_abs == 0.0f ? 1.0f : max_abs / denom;
        out[req.id] = params;
    }
    if (!missing.empty()) {
        fail(ErrorKind::invalid_argument,
             strformat("calibration stats missing for: %s", missing.c_str()));
    }
    return out;
}

quant::ScaleMap finalize_scales(const RangeObserver& obs,
                                std::span<const quant::CalibRequirement> required) {
    quant::ScaleMap scales;
    for (const auto& [id, params] : finalize(obs, required)) {
        scales[id] = params.scale;
    }
    return scales;
}

void save_stats(const RangeObserver& obs, const std::string& path) {
    serial::Writer w(path);
    w.write(kMagic, sizeof(kMagic));
    w.write_pod<uint32_t>(kVersion);
    w.write_pod<uint32_t>(static_cast<uint32_t>(obs.stats().size()));
    for (const auto& [id, s] : obs.stats()) {
        w.write_string(id);
        w.write_pod(s.max_abs);
        w.write_pod(s.min);
        w.write_pod(s.max);
        w.write_pod(s.count);
    }
    w.finish();
}

RangeObserver load_stats(const std::string& path) {
    serial::Reader r(path);
    char magic[4];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        fail(ErrorKind::format, strformat("'%s' is not a stats file", path.c_str()));
    }
    auto version = r.read_pod<uint32_t>();
    if (version != kVersion) {
        fail(ErrorKind::format,
             strformat("'%s': unsupported stats version %u", path.c_str(), version));
    }
    r.verify_checksum();
    RangeObserver obs;
    auto count = r.read_pod<uint32_t>();
    for (uint32_t k = 0; k < count; ++k) {
        std::string id = r.read_string();
        TensorStats s;
        s.max_abs = r.read_pod<float>();
        s.min = r.read_pod<float>();
        s.max = r.read_pod<float>();
        s.count = r.read_pod<uint64_t>();
        obs.restore(id, s);
    }
    return obs;
}

}  // namespace ernn::calibrate
