#include "runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "serial.hpp"

namespace ernn::runtime {

namespace fx = ernn::fixedpoint;

// --- feature files ----------------------------------------------------------

static constexpr char kFeatureMagic[4] = {'E', 'R', 'N', 'F'};

void save_features(const Utterance& u, const std::string& path) {
    serial::Writer w(path);
    w.write(kFeatureMagic, sizeof(kFeatureMagic));
    w.write_pod<uint32_t>(static_cast<uint32_t>(u.features.rows));
    w.write_pod<uint32_t>(static_cast<uint32_t>(u.features.cols));
    w.write_pod<float>(u.frame_duration);
    w.write(u.features.data.data(), u.features.data.size() * sizeof(float));
    w.finish();
}

Utterance parse_text_features(const std::string& text, float frame_duration) {
    std::istringstream iss(text);
    std::string line;
    std::vector<std::vector<float>> rows;
    size_t width = 0;
    while (std::getline(iss, line)) {
        std::istringstream ls(line);
        std::vector<float> row;
        float v;
        while (ls >> v) {
            row.push_back(v);
        }
        if (row.empty()) {
            continue;
        }
        if (width == 0) {
            width = row.size();
        } else if (row.size() != width) {
            fail(ErrorKind::format,
                 strformat("text features: row %zu has %zu values, expected %zu", rows.size(),
                           row.size(), width));
        }
        rows.push_back(std::move(row));
    }
    Utterance u;
    u.frame_duration = frame_duration;
    u.features = Matrix(static_cast<int>(rows.size()), static_cast<int>(width));
    for (size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].begin(), rows[r].end(),
                  u.features.data.begin() + static_cast<ptrdiff_t>(r * width));
    }
    check_finite(u.features.data, "text features");
    return u;
}

Utterance load_features(const std::string& path, float default_frame_duration) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) {
        fail(ErrorKind::io, strformat("cannot open feature file '%s'", path.c_str()));
    }
    char magic[4] = {0, 0, 0, 0};
    probe.read(magic, 4);
    probe.close();
    Utterance u;
    if (std::memcmp(magic, kFeatureMagic, 4) == 0) {
        serial::Reader r(path);
        char m[4];
        r.read(m, 4);
        r.verify_checksum();
        auto frames = r.read_pod<uint32_t>();
        auto width = r.read_pod<uint32_t>();
        u.frame_duration = r.read_pod<float>();
        if (width == 0 || u.frame_duration <= 0.0f) {
            fail(ErrorKind::format, strformat("'%s': bad feature header", path.c_str()));
        }
        u.features = Matrix(static_cast<int>(frames), static_cast<int>(width));
        r.read(u.features.data.data(), u.features.data.size() * sizeof(float));
        check_finite(u.features.data, "features");
    } else {
        std::ifstream in(path);
        std::stringstream buf;
        buf << in.rdbuf();
        u = parse_text_features(buf.str(), default_frame_duration);
    }
    u.id = path;
    return u;
}

// --- engine ------------------------------------------------------------------

Engine::Engine(const modelio::Model& m) : topology_(m.topology), mode_(m.mode) {
    topology_.validate();
    vocab_ = topology_.vocab_size;

    auto compile_stack = [&](const std::vector<modelio::LayerSpec>& specs, bool is_encoder,
                             std::vector<Layer>& out) {
        float in_scale = 0.0f;
        if (mode_ == modelio::QuantMode::integer8_16) {
            in_scale = m.scalar(modelio::layer_prefix(is_encoder, 0) + ".scale.in");
        }
        for (size_t i = 0; i < specs.size(); ++i) {
            Layer layer;
            layer.kind = specs[i].kind;
            layer.prefix = modelio::layer_prefix(is_encoder, i);
            layer.input = specs[i].input;
            layer.hidden = specs[i].hidden;
            layer.output = specs[i].proj;
            switch (mode_) {
                case modelio::QuantMode::float32:
                    layer.weights = quant::cell_weights_from_model(m, specs[i], layer.prefix);
                    break;
                case modelio::QuantMode::hybrid8:
                    layer.weights = quant::hybrid_cell_from_model(m, specs[i], layer.prefix);
                    break;
                case modelio::QuantMode::integer8_16: {
                    auto cell =
                        quant::integer_cell_from_model(m, specs[i], layer.prefix, in_scale);
                    layer.out_scale = cell.out_scale;
                    in_scale = cell.out_scale;
                    layer.weights = std::move(cell);
                    break;
                }
            }
            out.push_back(std::move(layer));
        }
    };
    compile_stack(topology_.encoder, true, encoder_);
    compile_stack(topology_.prediction, false, prediction_);

    if (mode_ == modelio::QuantMode::float32) {
        embedding_f_ = modelio::matrix_from_tensor(m.tensor("embedding"));
        joint_enc_f_ = modelio::matrix_from_tensor(m.tensor("joint.W_enc"));
        joint_pred_f_ = modelio::matrix_from_tensor(m.tensor("joint.W_pred"));
        softmax_f_ = modelio::matrix_from_tensor(m.tensor("softmax.W"));
    } else {
        embedding_q_ = quant::qmatrix_from_tensor(m.tensor("embedding"));
        joint_enc_q_ = quant::qmatrix_from_tensor(m.tensor("joint.W_enc"));
        joint_pred_q_ = quant::qmatrix_from_tensor(m.tensor("joint.W_pred"));
        softmax_q_ = quant::qmatrix_from_tensor(m.tensor("softmax.W"));
        if (mode_ == modelio::QuantMode::hybrid8) {
            // hybrid prediction layers take float inputs; keep float rows
            embedding_f_ = Matrix(topology_.vocab_size, topology_.embedding_width);
            const auto& d = std::get<quant::DenseI8>(embedding_q_.payload);
            for (size_t k = 0; k < embedding_f_.data.size(); ++k) {
                embedding_f_.data[k] = static_cast<float>(d.data[k]) * embedding_q_.scale;
            }
        } else {
            enc_in_scale_ = m.scalar("enc0.scale.in");
            embed_to_in_ = fx::make_requant_multiplier(embedding_q_.scale,
                                                       m.scalar("dec0.scale.in"));
        }
    }
    auto jb = m.tensor("joint.b").f32();
    joint_bias_.assign(jb.begin(), jb.end());
    auto sb = m.tensor("softmax.b").f32();
    softmax_bias_.assign(sb.begin(), sb.end());

    if (topology_.joint_activation != "tanh") {
        fail(ErrorKind::invalid_argument,
             strformat("unsupported joint activation '%s'", topology_.joint_activation.c_str()));
    }
}

int Engine::feature_width() const {
    return topology_.feature_width;
}

Stream Engine::new_stream() const {
    return Stream(*this);
}

// --- stream ------------------------------------------------------------------

Stream::Stream(const Engine& e) : engine_(&e) {
    reset();
}

void Stream::reset() {
    auto init = [](const std::vector<Engine::Layer>& layers, std::vector<LayerState>& states) {
        states.clear();
        for (const auto& l : layers) {
            LayerState s;
            s.f = cells::zero_state(l.hidden, l.output);
            s.i = quant::zero_integer_state(l.hidden, l.output);
            states.push_back(std::move(s));
        }
    };
    init(engine_->encoder_, enc_state_);
    init(engine_->prediction_, pred_state_);
    // prime the prediction output with the blank token
    pred_out_ = predict_token(kBlankToken);
}

void Stream::set_tap(TapFn fn) {
    if (fn && engine_->mode_ != modelio::QuantMode::float32) {
        fail(ErrorKind::invalid_argument, "full-trace taps require a float model");
    }
    tap_ = std::move(fn);
}

static const char* const kLstmGates[] = {"i", "f", "z", "o"};
static const char* const kCifgGates[] = {"f", "z", "o"};
static const char* const kSruGates[] = {"f", "r", "x1", "x2"};

static std::span<const char* const> trace_gate_names(cells::CellKind kind) {
    switch (kind) {
        case cells::CellKind::lstm:
            return {kLstmGates, 4};
        case cells::CellKind::cifg:
            return {kCifgGates, 3};
        default:
            return {kSruGates, 4};
    }
}

std::vector<float> Stream::run_stack(const std::vector<Engine::Layer>& layers,
                                     std::vector<LayerState>& states, std::span<const float> x,
                                     std::vector<int8_t> xq, size_t step_index) {
    std::vector<float> current(x.begin(), x.end());
    std::vector<int8_t> current_q = std::move(xq);

    for (size_t li = 0; li < layers.size(); ++li) {
        const auto& layer = layers[li];
        auto& state = states[li];
        if (const auto* fw = std::get_if<cells::CellWeights>(&layer.weights)) {
            cells::StepTrace trace;
            cells::StepTrace* tp = tap_ ? &trace : nullptr;
            if (tap_ && li == 0) {
                tap_(layer.prefix + ".in", current);
            }
            auto r = cells::cell_step(*fw, current, state.f, tp);
            state.f = std::move(r.state);
            current = std::move(r.h);
            if (tap_) {
                auto names = trace_gate_names(layer.kind);
                for (size_t g = 0; g < trace.pre.size(); ++g) {
                    tap_(layer.prefix + ".pre." + names[g], trace.pre[g]);
                }
                tap_(layer.prefix + ".cell", state.f.c);
                tap_(layer.prefix + ".m", trace.m);
                tap_(layer.prefix + ".out", current);
            }
        } else if (const auto* hw = std::get_if<quant::HybridCell>(&layer.weights)) {
            auto r = quant::hybrid_cell_step(*hw, current, state.f);
            state.f = std::move(r.state);
            current = std::move(r.h);
        } else {
            const auto& iw = std::get<quant::IntegerCell>(layer.weights);
            auto r = quant::integer_cell_step(iw, current_q, state.i);
            state.i = std::move(r.state);
            current_q = std::move(r.h);
            current.resize(current_q.size());
            for (size_t k = 0; k < current_q.size(); ++k) {
                current[k] = static_cast<float>(current_q[k]) * layer.out_scale;
            }
        }
        if (engine_->mode_ != modelio::QuantMode::integer8_16) {
            for (float v : current) {
                if (!std::isfinite(v)) {
                    fail(ErrorKind::numeric,
                         strformat("non-finite activation in layer %s at step %zu",
                                   layer.prefix.c_str(), step_index));
                }
            }
        }
        if (layer_tap_) {
            layer_tap_(layer.prefix + ".out", current);
        }
    }
    return current;
}

std::vector<float> Stream::encode_frame(std::span<const float> x, size_t frame_index) {
    if (x.size() != static_cast<size_t>(engine_->feature_width())) {
        fail(ErrorKind::invalid_argument,
             strformat("feature width %zu does not match model width %d", x.size(),
                       engine_->feature_width()));
    }
    std::vector<int8_t> xq;
    if (engine_->mode_ == modelio::QuantMode::integer8_16) {
        // quantize incoming features once at the calibrated input scale
        xq.resize(x.size());
        double inv = 1.0 / engine_->enc_in_scale_;
        for (size_t k = 0; k < x.size(); ++k) {
            xq[k] = static_cast<int8_t>(fx::saturate(fx::round_away(double(x[k]) * inv), 8));
        }
    }
    return run_stack(engine_->encoder_, enc_state_, x, std::move(xq), frame_index);
}

std::vector<float> Stream::predict_token(int token) {
    if (token < 0 || token >= engine_->vocab_) {
        fail(ErrorKind::invalid_argument,
             strformat("token %d outside vocabulary of %d", token, engine_->vocab_));
    }
    std::vector<float> embedded;
    std::vector<int8_t> embedded_q;
    if (engine_->mode_ == modelio::QuantMode::integer8_16) {
        const auto& d = std::get<quant::DenseI8>(engine_->embedding_q_.payload);
        const int8_t* row = d.data.data() + static_cast<size_t>(token) * d.cols;
        embedded_q.resize(d.cols);
        for (int k = 0; k < d.cols; ++k) {
            embedded_q[k] = static_cast<int8_t>(
                fx::saturate(fx::apply_multiplier(row[k], engine_->embed_to_in_), 8));
        }
        float in_scale = std::get<quant::IntegerCell>(engine_->prediction_[0].weights).in_scale;
        embedded.resize(d.cols);
        for (int k = 0; k < d.cols; ++k) {
            embedded[k] = static_cast<float>(embedded_q[k]) * in_scale;
        }
    } else {
        const Matrix& emb = engine_->embedding_f_;
        embedded.assign(emb.row(token).begin(), emb.row(token).end());
        if (tap_) {
            tap_("dec0.in", embedded);
        }
    }
    pred_out_ = run_stack(engine_->prediction_, pred_state_, embedded, std::move(embedded_q), 0);
    return pred_out_;
}

std::vector<float> Stream::joint_logits(std::span<const float> enc,
                                        std::span<const float> pred) const {
    const Engine& e = *engine_;
    std::vector<float> hidden;
    if (e.mode_ == modelio::QuantMode::float32) {
        hidden = matvec(e.joint_enc_f_, enc);
        auto hp = matvec(e.joint_pred_f_, pred);
        for (size_t k = 0; k < hidden.size(); ++k) {
            hidden[k] = std::tanh(hidden[k] + hp[k] + e.joint_bias_[k]);
        }
        auto logits = matvec(e.softmax_f_, hidden);
        for (size_t k = 0; k < logits.size(); ++k) {
            logits[k] += e.softmax_bias_[k];
        }
        return logits;
    }
    hidden = quant::hybrid_matvec(e.joint_enc_q_, enc);
    auto hp = quant::hybrid_matvec(e.joint_pred_q_, pred);
    for (size_t k = 0; k < hidden.size(); ++k) {
        hidden[k] = std::tanh(hidden[k] + hp[k] + e.joint_bias_[k]);
    }
    auto logits = quant::hybrid_matvec(e.softmax_q_, hidden);
    for (size_t k = 0; k < logits.size(); ++k) {
        logits[k] += e.softmax_bias_[k];
    }
    return logits;
}

static int argmax(std::span<const float> v) {
    int best = 0;
    for (size_t k = 1; k < v.size(); ++k) {
        if (v[k] > v[best]) {
            best = static_cast<int>(k);
        }
    }
    return best;
}

std::vector<int> Stream::greedy_decode(const Utterance& u, int max_symbols_per_frame) {
    if (u.features.cols != engine_->feature_width() && u.features.rows > 0) {
        fail(ErrorKind::invalid_argument,
             strformat("utterance width %d does not match model width %d", u.features.cols,
                       engine_->feature_width()));
    }
    reset();
    std::vector<int> tokens;
    for (int frame = 0; frame < u.features.rows; ++frame) {
        auto enc = encode_frame(u.features.row(frame), static_cast<size_t>(frame));
        for (int emitted = 0; emitted < max_symbols_per_frame; ++emitted) {
            auto logits = joint_logits(enc, pred_out_);
            int token = argmax(logits);
            if (token == kBlankToken) {
                break;
            }
            tokens.push_back(token);
            predict_token(token);
        }
    }
    return tokens;
}

// --- calibration driver --------------------------------------------------------

calibrate::RangeObserver calibrate_model(const modelio::Model& float_model,
                                         std::span<const Utterance> data,
                                         int max_symbols_per_frame) {
    if (float_model.mode != modelio::QuantMode::float32) {
        fail(ErrorKind::invalid_argument, "calibration runs on the float model");
    }
    if (data.empty()) {
        fail(ErrorKind::invalid_argument, "calibration dataset is empty");
    }
    Engine engine(float_model);
    calibrate::RangeObserver obs;
    Stream stream = engine.new_stream();
    stream.set_tap([&obs](const std::string& id, std::span<const float> v) {
        obs.observe(id, v);
    });
    for (const auto& u : data) {
        if (u.features.rows > 0 && u.features.cols != engine.feature_width()) {
            fail(ErrorKind::invalid_argument,
                 strformat("calibration utterance width %d does not match model width %d",
                           u.features.cols, engine.feature_width()));
        }
        stream.greedy_decode(u, max_symbols_per_frame);
    }
    return obs;
}

// --- compare --------------------------------------------------------------------

size_t levenshtein(std::span<const int> a, std::span<const int> b) {
    std::vector<size_t> row(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) {
        row[j] = j;
    }
    for (size_t i = 1; i <= a.size(); ++i) {
        size_t diag = row[0];
        row[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1,
                               diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

namespace {

struct TraceCollector {
    std::map<std::string, std::vector<std::vector<float>>> outputs;

    TapFn tap() {
        return [this](const std::string& id, std::span<const float> v) {
            outputs[id].emplace_back(v.begin(), v.end());
        };
    }
};

// drive one model through an utterance with a fixed token sequence
void run_traced(const Engine& e, const Utterance& u, std::span<const int> tokens,
                TraceCollector& collector) {
    Stream s = e.new_stream();
    s.set_layer_tap(collector.tap());
    s.reset();
    for (int frame = 0; frame < u.features.rows; ++frame) {
        s.encode_frame(u.features.row(frame), static_cast<size_t>(frame));
    }
    for (int token : tokens) {
        s.predict_token(token);
    }
}

}  // namespace

CompareReport compare_models(const Engine& a, const Engine& b, std::span<const Utterance> data,
                             int max_symbols_per_frame) {
    if (a.topology().feature_width != b.topology().feature_width ||
        a.topology().vocab_size != b.topology().vocab_size ||
        a.topology().encoder.size() != b.topology().encoder.size() ||
        a.topology().prediction.size() != b.topology().prediction.size()) {
        fail(ErrorKind::invalid_argument, "compare: topologies do not match");
    }
    CompareReport report;
    std::map<std::string, LayerDelta> deltas;
    std::map<std::string, uint64_t> delta_counts;
    double agreement_sum = 0.0;

    for (const auto& u : data) {
        Stream sa = a.new_stream();
        Stream sb = b.new_stream();
        auto tokens_a = sa.greedy_decode(u, max_symbols_per_frame);
        auto tokens_b = sb.greedy_decode(u, max_symbols_per_frame);
        report.tokens_a += tokens_a.size();
        report.tokens_b += tokens_b.size();
        size_t denom = std::max(tokens_a.size(), tokens_b.size());
        double agreement =
            denom == 0 ? 1.0
                       : 1.0 - double(levenshtein(tokens_a, tokens_b)) / double(denom);
        agreement_sum += agreement;

        TraceCollector ta, tb;
        run_traced(a, u, tokens_a, ta);
        run_traced(b, u, tokens_a, tb);
        for (const auto& [id, va] : ta.outputs) {
            auto it = tb.outputs.find(id);
            if (it == tb.outputs.end() || it->second.size() != va.size()) {
                fail(ErrorKind::invalid_argument,
                     strformat("compare: trace mismatch on '%s'", id.c_str()));
            }
            auto& d = deltas[id];
            d.id = id;
            auto& count = delta_counts[id];
            for (size_t s = 0; s < va.size(); ++s) {
                const auto& x = va[s];
                const auto& y = it->second[s];
                for (size_t k = 0; k < x.size(); ++k) {
                    double diff = std::fabs(double(x[k]) - double(y[k]));
                    d.max_abs = std::max(d.max_abs, diff);
                    d.mean_abs += diff;
                    ++count;
                }
            }
        }
        ++report.utterances;
    }
    for (auto& [id, d] : deltas) {
        if (delta_counts[id] > 0) {
            d.mean_abs /= double(delta_counts[id]);
        }
        report.layers.push_back(d);
    }
    report.token_agreement = data.empty() ? 1.0 : agreement_sum / double(data.size());
    return report;
}

// --- bench ----------------------------------------------------------------------

double nearest_rank_percentile(std::vector<double> values, double p) {
    if (values.empty()) {
        fail(ErrorKind::invalid_argument, "percentile of empty set");
    }
    std::sort(values.begin(), values.end());
    double rank = std::ceil(p * double(values.size()));
    size_t idx = rank < 1.0 ? 0 : static_cast<size_t>(rank) - 1;
    return values[std::min(idx, values.size() - 1)];
}

BenchReport bench_model(const Engine& engine, std::span<const Utterance> data,
                        const BenchOptions& options) {
    if (data.empty()) {
        fail(ErrorKind::invalid_argument, "bench needs at least one utterance");
    }
    for (const auto& u : data) {
        if (u.features.rows < 1) {
            fail(ErrorKind::invalid_argument, "bench utterances need at least one frame");
        }
    }
    BenchReport report;
    report.percentile = options.percentile;
    report.mode = modelio::quant_mode_name(engine.mode());
    report.utterances.resize(data.size());

    auto bench_range = [&](size_t begin, size_t end) {
        Stream stream = engine.new_stream();
        for (size_t ui = begin; ui < end; ++ui) {
            const auto& u = data[ui];
            double total = 0.0;
            int kept = 0;
            for (int rep = 0; rep < options.warmup + options.repetitions; ++rep) {
                auto start = std::chrono::steady_clock::now();
                stream.greedy_decode(u, options.max_symbols_per_frame);
                auto stop = std::chrono::steady_clock::now();
                if (rep >= options.warmup) {
                    total += std::chrono::duration<double>(stop - start).count();
                    ++kept;
                }
            }
            UtteranceTiming t;
            t.id = u.id.empty() ? strformat("utterance%zu", ui) : u.id;
            t.frames = static_cast<uint64_t>(u.features.rows);
            t.audio_seconds = u.audio_seconds();
            t.wall_seconds = total / std::max(kept, 1);
            t.rt = t.wall_seconds / t.audio_seconds;
            report.utterances[ui] = std::move(t);
        }
    };

    int streams = std::max(1, options.streams);
    if (streams == 1) {
        bench_range(0, data.size());
    } else {
        std::vector<std::thread> workers;
        size_t chunk = (data.size() + streams - 1) / streams;
        for (int w = 0; w < streams; ++w) {
            size_t begin = std::min(data.size(), w * chunk);
            size_t end = std::min(data.size(), begin + chunk);
            if (begin < end) {
                workers.emplace_back(bench_range, begin, end);
            }
        }
        for (auto& t : workers) {
            t.join();
        }
    }

    std::vector<double> rts;
    for (const auto& t : report.utterances) {
        rts.push_back(t.rt);
        report.rt_mean += t.rt;
        report.rt_max = std::max(report.rt_max, t.rt);
    }
    report.rt_mean /= double(rts.size());
    report.rt_percentile = nearest_rank_percentile(rts, options.percentile);
    return report;
}

}  // namespace ernn::runtime
