#include "model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "serial.hpp"

namespace ernn::modelio {

static_assert(std::endian::native == std::endian::little,
              "model serialization assumes a little-endian host");

static constexpr char kMagic[4] = {'E', 'R', 'N', 'N'};
static constexpr uint32_t kVersion = 1;

size_t dtype_size(DType t) {
    switch (t) {
        case DType::f32:
            return 4;
        case DType::i8:
            return 1;
        case DType::i16:
            return 2;
        case DType::i32:
            return 4;
    }
    return 0;
}

const char* dtype_name(DType t) {
    switch (t) {
        case DType::f32:
            return "f32";
        case DType::i8:
            return "i8";
        case DType::i16:
            return "i16";
        case DType::i32:
            return "i32";
    }
    return "?";
}

int64_t Tensor::elements() const {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return n;
}

template <typename T>
static std::span<const T> typed_span(const Tensor& t, DType expect) {
    if (t.dtype != expect) {
        fail(ErrorKind::format, strformat("tensor holds %s, expected %s", dtype_name(t.dtype),
                                          dtype_name(expect)));
    }
    return {reinterpret_cast<const T*>(t.bytes.data()), t.bytes.size() / sizeof(T)};
}

std::span<const float> Tensor::f32() const {
    return typed_span<float>(*this, DType::f32);
}
std::span<const int8_t> Tensor::i8() const {
    return typed_span<int8_t>(*this, DType::i8);
}
std::span<const int32_t> Tensor::i32() const {
    return typed_span<int32_t>(*this, DType::i32);
}

template <typename T>
static std::vector<uint8_t> to_bytes(std::span<const T> values) {
    std::vector<uint8_t> out(values.size() * sizeof(T));
    std::memcpy(out.data(), values.data(), out.size());
    return out;
}

Tensor Tensor::dense_f32(std::vector<int64_t> shape, std::span<const float> values) {
    Tensor t;
    t.dtype = DType::f32;
    t.shape = std::move(shape);
    t.bytes = to_bytes(values);
    return t;
}

Tensor Tensor::dense_i8(std::vector<int64_t> shape, std::span<const int8_t> values, float scale) {
    Tensor t;
    t.dtype = DType::i8;
    t.shape = std::move(shape);
    t.qparams = fixedpoint::QuantParams{scale, 8};
    t.bytes = to_bytes(values);
    return t;
}

Tensor Tensor::dense_i32(std::vector<int64_t> shape, std::span<const int32_t> values,
                         float scale) {
    Tensor t;
    t.dtype = DType::i32;
    t.shape = std::move(shape);
    t.qparams = fixedpoint::QuantParams{scale, 32};
    t.bytes = to_bytes(values);
    return t;
}

Tensor Tensor::scalar_f32(float value) {
    return dense_f32({1}, std::span<const float>(&value, 1));
}

Tensor Tensor::from_matrix(const Matrix& m) {
    return dense_f32({m.rows, m.cols}, m.data);
}

Tensor Tensor::from_sparse(const blocksparse::BlockSparseF& m) {
    Tensor t;
    t.dtype = DType::f32;
    t.shape = {m.rows, m.cols};
    t.sparse = true;
    t.block_rows = m.block_rows;
    t.block_cols = m.block_cols;
    t.ledger = m.ledger;
    t.bytes = to_bytes(std::span<const float>(m.data));
    return t;
}

Tensor Tensor::from_sparse_i8(const blocksparse::BlockSparseI8& m, float scale) {
    Tensor t;
    t.dtype = DType::i8;
    t.shape = {m.rows, m.cols};
    t.qparams = fixedpoint::QuantParams{scale, 8};
    t.sparse = true;
    t.block_rows = m.block_rows;
    t.block_cols = m.block_cols;
    t.ledger = m.ledger;
    t.bytes = to_bytes(std::span<const int8_t>(m.data));
    return t;
}

Tensor Tensor::from_weight(const cells::WeightMatrix& w) {
    if (const auto* dense = std::get_if<Matrix>(&w)) {
        return from_matrix(*dense);
    }
    return from_sparse(std::get<blocksparse::BlockSparseF>(w));
}

Matrix matrix_from_tensor(const Tensor& t) {
    if (t.shape.size() != 2) {
        fail(ErrorKind::format, "expected a rank-2 tensor");
    }
    if (t.sparse) {
        return blocksparse::to_dense(sparse_from_tensor(t));
    }
    Matrix m(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
    auto vals = t.f32();
    std::copy(vals.begin(), vals.end(), m.data.begin());
    return m;
}

blocksparse::BlockSparseF sparse_from_tensor(const Tensor& t) {
    if (!t.sparse || t.shape.size() != 2) {
        fail(ErrorKind::format, "expected a sparse rank-2 tensor");
    }
    blocksparse::BlockSparseF m;
    m.rows = static_cast<int>(t.shape[0]);
    m.cols = static_cast<int>(t.shape[1]);
    m.block_rows = t.block_rows;
    m.block_cols = t.block_cols;
    m.ledger = t.ledger;
    auto vals = t.f32();
    m.data.assign(vals.begin(), vals.end());
    blocksparse::validate(m);
    return m;
}

blocksparse::BlockSparseI8 sparse_i8_from_tensor(const Tensor& t) {
    if (!t.sparse || t.shape.size() != 2) {
        fail(ErrorKind::format, "expected a sparse rank-2 tensor");
    }
    blocksparse::BlockSparseI8 m;
    m.rows = static_cast<int>(t.shape[0]);
    m.cols = static_cast<int>(t.shape[1]);
    m.block_rows = t.block_rows;
    m.block_cols = t.block_cols;
    m.ledger = t.ledger;
    auto vals = t.i8();
    m.data.assign(vals.begin(), vals.end());
    blocksparse::validate(m);
    return m;
}

cells::WeightMatrix weight_from_tensor(const Tensor& t) {
    if (t.sparse) {
        return sparse_from_tensor(t);
    }
    return matrix_from_tensor(t);
}

const Tensor& Model::tensor(const std::string& id) const {
    auto it = tensors.find(id);
    if (it == tensors.end()) {
        fail(ErrorKind::missing_tensor, strformat("model has no tensor '%s'", id.c_str()));
    }
    return it->second;
}

float Model::scalar(const std::string& id) const {
    const Tensor& t = tensor(id);
    auto v = t.f32();
    if (v.size() != 1) {
        fail(ErrorKind::format, strformat("tensor '%s' is not a scalar", id.c_str()));
    }
    return v[0];
}

// --- schema -----------------------------------------------------------------

static const std::vector<std::string>& gate_list(cells::CellKind kind) {
    static const std::vector<std::string> lstm{"i", "f", "z", "o"};
    static const std::vector<std::string> cifg{"f", "z", "o"};
    static const std::vector<std::string> sru{"f", "r"};
    switch (kind) {
        case cells::CellKind::lstm:
            return lstm;
        case cells::CellKind::cifg:
            return cifg;
        default:
            return sru;
    }
}

std::vector<TensorSpec> model_tensor_specs(const TopologyConfig& t, QuantMode mode) {
    t.validate();
    std::vector<TensorSpec> specs;
    bool quantized = mode != QuantMode::float32;
    bool integer = mode == QuantMode::integer8_16;
    DType weight_dtype = quantized ? DType::i8 : DType::f32;

    auto add = [&specs](TensorSpec s) { specs.push_back(std::move(s)); };
    auto weight = [&](const std::string& id, int64_t rows, int64_t cols, const LayerSpec* layer) {
        TensorSpec s;
        s.id = id;
        s.dtype = weight_dtype;
        s.shape = {rows, cols};
        s.quantized = quantized;
        if (layer != nullptr) {
            s.prunable = true;
            s.sparsity = layer->sparsity;
            s.block_rows = layer->block_rows;
            s.block_cols = layer->block_cols;
        }
        add(std::move(s));
    };

    auto layer_specs = [&](const LayerSpec& l, const std::string& p, bool first) {
        int64_t h = l.hidden;
        bool sru = l.kind == cells::CellKind::sru;
        for (const auto& g : gate_list(l.kind)) {
            weight(p + ".W_" + g, h, l.input, &l);
            if (!sru) {
                weight(p + ".R_" + g, h, l.proj, &l);
            }
            if (integer) {
                // fused LN+cell bias (or plain bias without LN), 32-bit
                add({p + ".b_" + g, DType::i32, {h}, true});
                if (l.layer_norm) {
                    add({p + ".ln_" + g + ".gain", DType::i8, {h}, true});
                }
            } else {
                add({p + ".b_" + g, DType::f32, {h}});
                if (l.layer_norm) {
                    add({p + ".ln_" + g + ".gain", DType::f32, {h}});
                    add({p + ".ln_" + g + ".bias", DType::f32, {h}});
                }
            }
        }
        if (sru) {
            for (const char* g : {"x1", "x2"}) {
                weight(p + ".W_" + std::string(g), h, l.input, &l);
                if (integer) {
                    add({p + ".b_" + std::string(g), DType::i32, {h}, true});
                } else {
                    add({p + ".b_" + std::string(g), DType::f32, {h}});
                }
            }
            if (l.layer_norm) {
                if (integer) {
                    add({p + ".ln_c.gain", DType::i8, {h}, true});
                    add({p + ".ln_c.bias", DType::i32, {h}, true});
                } else {
                    add({p + ".ln_c.gain", DType::f32, {h}});
                    add({p + ".ln_c.bias", DType::f32, {h}});
                }
            }
        }
        weight(p + ".proj", l.proj, h, nullptr);
        if (integer) {
            if (first) {
                add({p + ".scale.in", DType::f32, {1}});
            }
            for (const auto& g : gate_list(l.kind)) {
                add({p + ".scale.pre." + g, DType::f32, {1}});
            }
            if (sru) {
                add({p + ".scale.pre.x1", DType::f32, {1}});
                add({p + ".scale.pre.x2", DType::f32, {1}});
            }
            add({p + ".scale.cell", DType::f32, {1}});
            add({p + ".scale.m", DType::f32, {1}});
            add({p + ".scale.out", DType::f32, {1}});
        }
    };

    for (size_t i = 0; i < t.encoder.size(); ++i) {
        layer_specs(t.encoder[i], layer_prefix(true, i), i == 0);
    }
    for (size_t i = 0; i < t.prediction.size(); ++i) {
        layer_specs(t.prediction[i], layer_prefix(false, i), i == 0);
    }

    weight("embedding", t.vocab_size, t.embedding_width, nullptr);
    weight("joint.W_enc", t.joint_hidden, t.encoder_output_width(), nullptr);
    weight("joint.W_pred", t.joint_hidden, t.prediction_output_width(), nullptr);
    add({"joint.b", DType::f32, {t.joint_hidden}});
    weight("softmax.W", t.vocab_size, t.joint_hidden, nullptr);
    add({"softmax.b", DType::f32, {t.vocab_size}});
    return specs;
}

// --- generation --------------------------------------------------------------

static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ull;
    }
    return h;
}

Model make_random_model(const TopologyConfig& t, uint64_t seed, float weight_scale) {
    Model m;
    m.topology = t;
    m.mode = QuantMode::float32;
    for (const auto& spec : model_tensor_specs(t, QuantMode::float32)) {
        SplitMix64 rng(seed ^ fnv1a(spec.id));
        int64_t n = 1;
        for (int64_t d : spec.shape) {
            n *= d;
        }
        std::vector<float> values(static_cast<size_t>(n));
        bool is_bias = spec.id.find(".b_") != std::string::npos || spec.id == "joint.b" ||
                       spec.id == "softmax.b";
        bool is_gain = spec.id.find(".gain") != std::string::npos;
        bool is_ln_bias = spec.id.find(".ln_") != std::string::npos &&
                          spec.id.find(".bias") != std::string::npos;
        for (auto& v : values) {
            if (is_gain) {
                v = static_cast<float>(rng.uniform(0.9, 1.1));
            } else if (is_ln_bias) {
                v = 0.0f;
            } else if (is_bias) {
                v = static_cast<float>(rng.uniform(-0.05, 0.05));
            } else {
                v = static_cast<float>(rng.uniform(-weight_scale, weight_scale));
            }
        }
        m.tensors[spec.id] = Tensor::dense_f32(spec.shape, values);
    }
    return m;
}

// --- serialization -----------------------------------------------------------

enum TensorFlags : uint8_t { kHasQuantParams = 1, kSparse = 2 };

void save(const Model& m, const std::string& path) {
    m.topology.validate();
    serial::Writer w(path);
    w.write(kMagic, sizeof(kMagic));
    w.write_pod<uint32_t>(kVersion);
    w.write_pod<uint8_t>(static_cast<uint8_t>(m.mode));
    w.write_string(serialize_topology(m.topology));
    w.write_pod<uint32_t>(static_cast<uint32_t>(m.tensors.size()));
    for (const auto& [id, t] : m.tensors) {
        w.write_string(id);
        w.write_pod<uint8_t>(static_cast<uint8_t>(t.dtype));
        uint8_t flags = 0;
        if (t.qparams) {
            flags |= kHasQuantParams;
        }
        if (t.sparse) {
            flags |= kSparse;
        }
        w.write_pod<uint8_t>(flags);
        w.write_pod<uint32_t>(static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) {
            w.write_pod<int64_t>(d);
        }
        if (t.qparams) {
            w.write_pod<float>(t.qparams->scale);
            w.write_pod<uint8_t>(static_cast<uint8_t>(t.qparams->bit_width));
        }
        if (t.sparse) {
            w.write_pod<int32_t>(t.block_rows);
            w.write_pod<int32_t>(t.block_cols);
            w.write_pod<uint64_t>(t.ledger.size());
            w.write(t.ledger.data(), t.ledger.size() * sizeof(int32_t));
        }
        w.write_pod<uint64_t>(t.bytes.size());
        w.write(t.bytes.data(), t.bytes.size());
    }
    w.finish();
}

static void validate_against_schema(const Model& m) {
    auto specs = model_tensor_specs(m.topology, m.mode);
    std::string missing;
    for (const auto& spec : specs) {
        auto it = m.tensors.find(spec.id);
        if (it == m.tensors.end()) {
            missing += missing.empty() ? spec.id : ", " + spec.id;
            continue;
        }
        const Tensor& t = it->second;
        if (t.dtype != spec.dtype) {
            fail(ErrorKind::format,
                 strformat("tensor '%s' has dtype %s, expected %s", spec.id.c_str(),
                           dtype_name(t.dtype), dtype_name(spec.dtype)));
        }
        if (t.shape != spec.shape) {
            fail(ErrorKind::format, strformat("tensor '%s' has unexpected shape", spec.id.c_str()));
        }
        if (t.sparse && !spec.prunable) {
            fail(ErrorKind::format,
                 strformat("tensor '%s' may not be stored sparse", spec.id.c_str()));
        }
        if (spec.quantized != t.qparams.has_value()) {
            fail(ErrorKind::format,
                 strformat("tensor '%s' quantization parameters mismatch", spec.id.c_str()));
        }
        if (t.sparse) {
            if (static_cast<int64_t>(t.shape[0]) % t.block_rows != 0 ||
                static_cast<int64_t>(t.shape[1]) % t.block_cols != 0) {
                fail(ErrorKind::format,
                     strformat("tensor '%s' block shape does not divide its shape",
                               spec.id.c_str()));
            }
        } else if (t.bytes.size() != static_cast<size_t>(t.elements()) * dtype_size(t.dtype)) {
            fail(ErrorKind::format,
                 strformat("tensor '%s' payload size mismatch", spec.id.c_str()));
        }
    }
    if (!missing.empty()) {
        fail(ErrorKind::missing_tensor, strformat("model is missing tensors: %s", missing.c_str()));
    }
    if (m.tensors.size() != specs.size()) {
        for (const auto& [id, t] : m.tensors) {
            bool known = false;
            for (const auto& spec : specs) {
                if (spec.id == id) {
                    known = true;
                    break;
                }
            }
            if (!known) {
                fail(ErrorKind::format, strformat("model has unexpected tensor '%s'", id.c_str()));
            }
        }
    }
}

Model load(const std::string& path) {
    serial::Reader r(path);
    char magic[4];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        fail(ErrorKind::format, strformat("'%s' is not a model file", path.c_str()));
    }
    auto version = r.read_pod<uint32_t>();
    if (version != kVersion) {
        fail(ErrorKind::version,
             strformat("'%s': unsupported model version %u", path.c_str(), version));
    }
    r.verify_checksum();

    Model m;
    auto mode = r.read_pod<uint8_t>();
    if (mode > static_cast<uint8_t>(QuantMode::integer8_16)) {
        fail(ErrorKind::format, strformat("'%s': unknown quantization mode %u", path.c_str(), mode));
    }
    m.mode = static_cast<QuantMode>(mode);
    m.topology = parse_topology(r.read_string(1 << 24));
    auto count = r.read_pod<uint32_t>();
    for (uint32_t k = 0; k < count; ++k) {
        std::string id = r.read_string();
        Tensor t;
        auto dtype = r.read_pod<uint8_t>();
        if (dtype > static_cast<uint8_t>(DType::i32)) {
            fail(ErrorKind::format, strformat("tensor '%s' has unknown dtype %u", id.c_str(), dtype));
        }
        t.dtype = static_cast<DType>(dtype);
        auto flags = r.read_pod<uint8_t>();
        auto ndims = r.read_pod<uint32_t>();
        if (ndims > 4) {
            fail(ErrorKind::format, strformat("tensor '%s' has %u dims", id.c_str(), ndims));
        }
        t.shape.resize(ndims);
        for (auto& d : t.shape) {
            d = r.read_pod<int64_t>();
        }
        if (flags & kHasQuantParams) {
            fixedpoint::QuantParams q;
            q.scale = r.read_pod<float>();
            q.bit_width = r.read_pod<uint8_t>();
            t.qparams = q;
        }
        if (flags & kSparse) {
            t.sparse = true;
            t.block_rows = r.read_pod<int32_t>();
            t.block_cols = r.read_pod<int32_t>();
            auto ledger_len = r.read_pod<uint64_t>();
            if (ledger_len * sizeof(int32_t) > r.remaining()) {
                fail(ErrorKind::format, strformat("tensor '%s' ledger overruns file", id.c_str()));
            }
            t.ledger.resize(ledger_len);
            r.read(t.ledger.data(), ledger_len * sizeof(int32_t));
        }
        auto nbytes = r.read_pod<uint64_t>();
        if (nbytes > r.remaining()) {
            fail(ErrorKind::format, strformat("tensor '%s' payload overruns file", id.c_str()));
        }
        t.bytes.resize(nbytes);
        r.read(t.bytes.data(), nbytes);
        if (!m.tensors.emplace(std::move(id), std::move(t)).second) {
            fail(ErrorKind::format, "duplicate tensor id in model file");
        }
    }
    validate_against_schema(m);
    return m;
}

// --- size estimate ------------------------------------------------------------

static uint64_t record_bytes(const TensorSpec& spec, QuantMode) {
    uint64_t n = 1;
    for (int64_t d : spec.shape) {
        n *= static_cast<uint64_t>(d);
    }
    uint64_t bytes = 4 + spec.id.size() + 1 + 1 + 4 + 8 * spec.shape.size();
    if (spec.quantized) {
        bytes += 5;
    }
    bool sparse = spec.prunable && spec.sparsity > 0.0;
    uint64_t payload_values = n;
    if (sparse) {
        uint64_t grid_rows = static_cast<uint64_t>(spec.shape[0]) / spec.block_rows;
        uint64_t grid_cols = static_cast<uint64_t>(spec.shape[1]) / spec.block_cols;
        uint64_t blocks = grid_rows * grid_cols;
        auto pruned = static_cast<uint64_t>(std::floor(spec.sparsity * double(blocks) + 0.5));
        uint64_t stored = blocks - pruned;
        payload_values = stored * spec.block_rows * spec.block_cols;
        bytes += 4 + 4 + 8 + 4 * (grid_rows + stored);
    }
    bytes += 8 + payload_values * dtype_size(spec.dtype);
    return bytes;
}

uint64_t file_size_estimate(const TopologyConfig& t, QuantMode mode) {
    uint64_t bytes = 4 + 4 + 1;  // magic, version, mode
    bytes += 4 + serialize_topology(t).size();
    bytes += 4;  // tensor count
    for (const auto& spec : model_tensor_specs(t, mode)) {
        bytes += record_bytes(spec, mode);
    }
    return bytes + 4;  // checksum
}

}  // namespace ernn::modelio
