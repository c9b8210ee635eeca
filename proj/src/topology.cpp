#include "topology.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace ernn::modelio {

const char* quant_mode_name(QuantMode mode) {
    switch (mode) {
        case QuantMode::float32:
            return "float32";
        case QuantMode::hybrid8:
            return "hybrid8";
        case QuantMode::integer8_16:
            return "integer8_16";
    }
    return "?";
}

QuantMode quant_mode_from_name(const std::string& name) {
    if (name == "float32" || name == "float") {
        return QuantMode::float32;
    }
    if (name == "hybrid8" || name == "hybrid") {
        return QuantMode::hybrid8;
    }
    if (name == "integer8_16" || name == "integer") {
        return QuantMode::integer8_16;
    }
    fail(ErrorKind::invalid_argument, strformat("unknown quantization mode '%s'", name.c_str()));
}

static const char* kind_name(cells::CellKind kind) {
    switch (kind) {
        case cells::CellKind::lstm:
            return "lstm";
        case cells::CellKind::cifg:
            return "cifg";
        case cells::CellKind::sru:
            return "sru";
    }
    return "?";
}

static cells::CellKind kind_from_name(const std::string& name) {
    if (name == "lstm") {
        return cells::CellKind::lstm;
    }
    if (name == "cifg") {
        return cells::CellKind::cifg;
    }
    if (name == "sru") {
        return cells::CellKind::sru;
    }
    fail(ErrorKind::invalid_argument, strformat("unknown cell kind '%s'", name.c_str()));
}

std::string layer_prefix(bool encoder, size_t index) {
    return strformat("%s%zu", encoder ? "enc" : "dec", index);
}

void TopologyConfig::validate() const {
    if (vocab_size < 2) {
        fail(ErrorKind::invalid_argument, strformat("vocab size %d must be >= 2", vocab_size));
    }
    if (feature_width <= 0 || embedding_width <= 0 || joint_hidden <= 0) {
        fail(ErrorKind::invalid_argument, "feature/embedding/joint widths must be positive");
    }
    if (encoder.empty() || prediction.empty()) {
        fail(ErrorKind::invalid_argument, "encoder and prediction stacks must be non-empty");
    }
    auto check_stack = [](const std::vector<LayerSpec>& stack, int first_input, const char* name) {
        int expect = first_input;
        for (size_t i = 0; i < stack.size(); ++i) {
            const auto& l = stack[i];
            if (l.hidden <= 0 || l.proj <= 0 || l.input <= 0) {
                fail(ErrorKind::invalid_argument,
                     strformat("%s layer %zu has non-positive widths", name, i));
            }
            if (l.input != expect) {
                fail(ErrorKind::invalid_argument,
                     strformat("%s layer %zu input width %d does not chain from %d", name, i,
                               l.input, expect));
            }
            if (l.sparsity < 0.0 || l.sparsity >= 1.0) {
                fail(ErrorKind::invalid_argument,
                     strformat("%s layer %zu sparsity %g outside [0, 1)", name, i, l.sparsity));
            }
            if (l.block_rows <= 0 || l.block_cols <= 0) {
                fail(ErrorKind::invalid_argument,
                     strformat("%s layer %zu has invalid block shape", name, i));
            }
            expect = l.proj;
        }
    };
    check_stack(encoder, feature_width, "encoder");
    check_stack(prediction, embedding_width, "prediction");
}

static int64_t pruned_params(int64_t rows, int64_t cols, double sparsity, int br, int bc) {
    if (sparsity <= 0.0) {
        return 0;
    }
    if (rows % br == 0 && cols % bc == 0) {
        int64_t blocks = (rows / br) * (cols / bc);
        auto pruned = static_cast<int64_t>(std::floor(sparsity * double(blocks) + 0.5));
        return pruned * br * bc;
    }
    return static_cast<int64_t>(std::floor(sparsity * double(rows * cols) + 0.5));
}

LayerParams layer_params(const LayerSpec& spec) {
    int64_t h = spec.hidden, in = spec.input, p = spec.proj;
    int gates = 0;
    int64_t wr_full = 0;
    int64_t wr_pruned = 0;
    int64_t ln_terms = 0;
    switch (spec.kind) {
        case cells::CellKind::lstm:
            gates = 4;
            wr_full = 4 * h * (in + p);
            wr_pruned = 4 * (pruned_params(h, in, spec.sparsity, spec.block_rows, spec.block_cols) +
                             pruned_params(h, p, spec.sparsity, spec.block_rows, spec.block_cols));
            ln_terms = spec.layer_norm ? 4 * 2 * h : 0;
            break;
        case cells::CellKind::cifg:
            gates = 3;
            wr_full = 3 * h * (in + p);
            wr_pruned = 3 * (pruned_params(h, in, spec.sparsity, spec.block_rows, spec.block_cols) +
                             pruned_params(h, p, spec.sparsity, spec.block_rows, spec.block_cols));
            ln_terms = spec.layer_norm ? 3 * 2 * h : 0;
            break;
        case cells::CellKind::sru:
            gates = 4;  // f, r, x1, x2 biases
            wr_full = 4 * h * in;
            wr_pruned = 4 * pruned_params(h, in, spec.sparsity, spec.block_rows, spec.block_cols);
            ln_terms = spec.layer_norm ? 3 * 2 * h : 0;
            break;
    }
    LayerParams out;
    out.retained_wr = wr_full - wr_pruned;
    out.total = out.retained_wr + gates * h + ln_terms + p * h;
    return out;
}

ParamCounts count_params(const TopologyConfig& t) {
    t.validate();
    ParamCounts c;
    for (const auto& l : t.encoder) {
        c.encoder += layer_params(l).total;
    }
    for (const auto& l : t.prediction) {
        c.prediction += layer_params(l).total;
    }
    c.embedding = int64_t(t.vocab_size) * t.embedding_width;
    c.joint = int64_t(t.joint_hidden) * t.encoder_output_width() +
              int64_t(t.joint_hidden) * t.prediction_output_width() + t.joint_hidden;
    c.softmax = int64_t(t.vocab_size) * t.joint_hidden + t.vocab_size;
    return c;
}

// --- text format ----------------------------------------------------------

static std::string layer_line(const LayerSpec& l) {
    std::string s = strformat("%s input=%d hidden=%d proj=%d ln=%d", kind_name(l.kind), l.input,
                              l.hidden, l.proj, l.layer_norm ? 1 : 0);
    if (l.sparsity > 0.0) {
        s += strformat(" sparsity=%g block=%dx%d", l.sparsity, l.block_rows, l.block_cols);
    }
    return s;
}

std::string serialize_topology(const TopologyConfig& t) {
    std::string s;
    s += strformat("feature_width = %d\n", t.feature_width);
    s += strformat("embedding_width = %d\n", t.embedding_width);
    s += strformat("vocab_size = %d\n", t.vocab_size);
    s += strformat("joint_hidden = %d\n", t.joint_hidden);
    s += strformat("joint_activation = %s\n", t.joint_activation.c_str());
    s += "[encoder]\n";
    for (const auto& l : t.encoder) {
        s += layer_line(l) + "\n";
    }
    s += "[prediction]\n";
    for (const auto& l : t.prediction) {
        s += layer_line(l) + "\n";
    }
    return s;
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& v, const std::string& what) {
    try {
        size_t pos = 0;
        int out = std::stoi(v, &pos);
        if (pos != v.size()) {
            throw std::invalid_argument(v);
        }
        return out;
    } catch (const std::exception&) {
        fail(ErrorKind::invalid_argument,
             strformat("topology: bad integer '%s' for %s", v.c_str(), what.c_str()));
    }
}

double parse_double(const std::string& v, const std::string& what) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) {
            throw std::invalid_argument(v);
        }
        return out;
    } catch (const std::exception&) {
        fail(ErrorKind::invalid_argument,
             strformat("topology: bad number '%s' for %s", v.c_str(), what.c_str()));
    }
}

LayerSpec parse_layer_line(const std::string& line, int default_input, int* count_out) {
    std::istringstream iss(line);
    std::string kind;
    iss >> kind;
    LayerSpec spec;
    spec.kind = kind_from_name(kind);
    spec.input = default_input;
    *count_out = 1;
    std::string token;
    while (iss >> token) {
        size_t eq = token.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::invalid_argument,
                 strformat("topology: expected key=value, got '%s'", token.c_str()));
        }
        std::string key = token.substr(0, eq);
        std::string value = token.substr(eq + 1);
        if (key == "input") {
            spec.input = parse_int(value, key);
        } else if (key == "hidden") {
            spec.hidden = parse_int(value, key);
        } else if (key == "proj") {
            spec.proj = parse_int(value, key);
        } else if (key == "ln") {
            spec.layer_norm = parse_int(value, key) != 0;
        } else if (key == "sparsity") {
            spec.sparsity = parse_double(value, key);
        } else if (key == "block") {
            size_t x = value.find('x');
            if (x == std::string::npos) {
                fail(ErrorKind::invalid_argument,
                     strformat("topology: block shape '%s' is not RxC", value.c_str()));
            }
            spec.block_rows = parse_int(value.substr(0, x), "block rows");
            spec.block_cols = parse_int(value.substr(x + 1), "block cols");
        } else if (key == "count") {
            *count_out = parse_int(value, key);
        } else {
            fail(ErrorKind::invalid_argument,
                 strformat("topology: unknown layer key '%s'", key.c_str()));
        }
    }
    return spec;
}

}  // namespace

TopologyConfig parse_topology(const std::string& text) {
    TopologyConfig t;
    t.encoder.clear();
    t.prediction.clear();
    std::istringstream iss(text);
    std::string line;
    enum class Section { header, encoder, prediction } section = Section::header;
    while (std::getline(iss, line)) {
        size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        if (line == "[encoder]") {
            section = Section::encoder;
            continue;
        }
        if (line == "[prediction]") {
            section = Section::prediction;
            continue;
        }
        if (line.front() == '[') {
            fail(ErrorKind::invalid_argument,
                 strformat("topology: unknown section '%s'", line.c_str()));
        }
        if (section == Section::header) {
            size_t eq = line.find('=');
            if (eq == std::string::npos) {
                fail(ErrorKind::invalid_argument,
                     strformat("topology: expected key = value, got '%s'", line.c_str()));
            }
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key == "feature_width") {
                t.feature_width = parse_int(value, key);
            } else if (key == "embedding_width") {
                t.embedding_width = parse_int(value, key);
            } else if (key == "vocab_size") {
                t.vocab_size = parse_int(value, key);
            } else if (key == "joint_hidden") {
                t.joint_hidden = parse_int(value, key);
            } else if (key == "joint_activation") {
                t.joint_activation = value;
            } else {
                fail(ErrorKind::invalid_argument,
                     strformat("topology: unknown key '%s'", key.c_str()));
            }
            continue;
        }
        auto& stack = section == Section::encoder ? t.encoder : t.prediction;
        int chain = stack.empty()
                        ? (section == Section::encoder ? t.feature_width : t.embedding_width)
                        : stack.back().proj;
        int count = 1;
        LayerSpec spec = parse_layer_line(line, chain, &count);
        for (int k = 0; k < count; ++k) {
            if (k > 0) {
                spec.input = spec.proj;
            }
            stack.push_back(spec);
        }
    }
    t.validate();
    return t;
}

TopologyConfig load_topology_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, strformat("cannot open topology file '%s'", path.c_str()));
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_topology(buf.str());
}

TopologyConfig baseline_topology(cells::CellKind cell, double sparsity) {
    TopologyConfig t;
    LayerSpec l;
    l.kind = cell;
    l.hidden = 2048;
    l.proj = 640;
    l.layer_norm = true;
    l.sparsity = sparsity;
    t.encoder.assign(8, l);
    t.encoder[0].input = t.feature_width;
    for (size_t i = 1; i < t.encoder.size(); ++i) {
        t.encoder[i].input = 640;
    }
    t.prediction.assign(2, l);
    t.prediction[0].input = t.embedding_width;
    t.prediction[1].input = 640;
    t.validate();
    return t;
}

}  // namespace ernn::modelio
