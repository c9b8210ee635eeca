#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "calibrate.hpp"
#include "convert.hpp"
#include "model.hpp"

namespace ernn::runtime {

// One input: a frames x feature_width matrix plus the per-frame duration.
struct Utterance {
    Matrix features;
    float frame_duration = 0.01f;
    std::string id;

    double audio_seconds() const { return double(features.rows) * frame_duration; }
};

// Binary feature file ("ERNF" header) or whitespace text matrix, sniffed by
// magic. Text inputs take the frame duration from the caller.
Utterance load_features(const std::string& path, float default_frame_duration = 0.01f);
void save_features(const Utterance& u, const std::string& path);
Utterance parse_text_features(const std::string& text, float frame_duration);

inline constexpr int kBlankToken = 0;

using TapFn = std::function<void(const std::string& id, std::span<const float> values)>;

class Stream;

// Compiled model: immutable after construction, shareable across streams.
class Engine {
public:
    explicit Engine(const modelio::Model& m);

    modelio::QuantMode mode() const { return mode_; }
    int feature_width() const;
    int vocab_size() const { return vocab_; }
    const modelio::TopologyConfig& topology() const { return topology_; }

    Stream new_stream() const;

private:
    friend class Stream;

    struct Layer {
        cells::CellKind kind;
        std::string prefix;
        int input = 0, hidden = 0, output = 0;
        std::variant<cells::CellWeights, quant::HybridCell, quant::IntegerCell> weights;
        float out_scale = 1.0f;  // integer: dequantization factor for taps/joint
    };

    modelio::TopologyConfig topology_;
    modelio::QuantMode mode_;
    int vocab_ = 0;
    std::vector<Layer> encoder_;
    std::vector<Layer> prediction_;

    // embedding: float rows for float/hybrid execution, int8 + requant for integer
    Matrix embedding_f_;
    quant::QuantizedMatrix embedding_q_;
    fixedpoint::RequantMultiplier embed_to_in_;
    float enc_in_scale_ = 1.0f;  // integer: feature quantization scale

    // joint + softmax; float matrices for float mode, quantized otherwise
    Matrix joint_enc_f_, joint_pred_f_, softmax_f_;
    quant::QuantizedMatrix joint_enc_q_, joint_pred_q_, softmax_q_;
    std::vector<float> joint_bias_, softmax_bias_;
};

// Per-utterance mutable state over a shared engine. Single-threaded;
// independent streams may run concurrently.
class Stream {
public:
    void reset();

    // Advances the encoder by one frame; returns the encoder output as float
    // (dequantized in integer mode). frame_index only labels errors.
    std::vector<float> encode_frame(std::span<const float> x, size_t frame_index);

    // Advances the prediction network on a token; returns its output.
    std::vector<float> predict_token(int token);

    const std::vector<float>& prediction_output() const { return pred_out_; }

    std::vector<float> joint_logits(std::span<const float> enc,
                                    std::span<const float> pred) const;

    std::vector<int> greedy_decode(const Utterance& u, int max_symbols_per_frame);

    // Full-trace observation for calibration; float engines only.
    void set_tap(TapFn fn);
    // Per-layer outputs ("<prefix>.out"), any mode; used by compare.
    void set_layer_tap(TapFn fn) { layer_tap_ = std::move(fn); }

    const Engine& engine() const { return *engine_; }

private:
    friend class Engine;
    explicit Stream(const Engine& e);

    struct LayerState {
        cells::CellState f;
        quant::IntegerState i;
    };

    std::vector<float> run_stack(const std::vector<Engine::Layer>& layers,
                                 std::vector<LayerState>& states, std::span<const float> x,
                                 std::vector<int8_t> xq, size_t step_index);

    const Engine* engine_;
    std::vector<LayerState> enc_state_;
    std::vector<LayerState> pred_state_;
    std::vector<float> pred_out_;
    TapFn tap_;
    TapFn layer_tap_;
};

// Runs float inference over the dataset, logging every dynamic tensor the
// integer converter needs. The prediction network is driven by greedy
// decoding so its ranges reflect emitted tokens.
calibrate::RangeObserver calibrate_model(const modelio::Model& float_model,
                                         std::span<const Utterance> data,
                                         int max_symbols_per_frame = 10);

struct LayerDelta {
    std::string id;
    double max_abs = 0.0;
    double mean_abs = 0.0;
};

struct CompareReport {
    std::vector<LayerDelta> layers;
    double token_agreement = 1.0;  // 1 - normalized edit distance, averaged
    uint64_t utterances = 0;
    uint64_t tokens_a = 0;
    uint64_t tokens_b = 0;
};

// Layer-by-layer divergence on identical inputs (the prediction side is
// driven by model a's token sequence for both) plus greedy-decode agreement.
CompareReport compare_models(const Engine& a, const Engine& b, std::span<const Utterance> data,
                             int max_symbols_per_frame = 10);

size_t levenshtein(std::span<const int> a, std::span<const int> b);

struct BenchOptions {
    int repetitions = 1;
    int warmup = 1;
    double percentile = 0.9;
    int max_symbols_per_frame = 10;
    int streams = 1;
};

struct UtteranceTiming {
    std::string id;
    uint64_t frames = 0;
    double audio_seconds = 0.0;
    double wall_seconds = 0.0;  // mean over kept repetitions
    double rt = 0.0;            // wall / audio
};

struct BenchReport {
    std::vector<UtteranceTiming> utterances;
    double percentile = 0.9;
    double rt_percentile = 0.0;  // nearest-rank
    double rt_mean = 0.0;
    double rt_max = 0.0;
    std::string mode;
};

// Wall time covers the inference loop only (no file I/O, no model load);
// the first `warmup` repetitions per utterance are discarded.
BenchReport bench_model(const Engine& engine, std::span<const Utterance> data,
                        const BenchOptions& options);

double nearest_rank_percentile(std::vector<double> values, double p);

}  // namespace ernn::runtime
