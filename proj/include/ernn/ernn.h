/* ernn: block-sparse quantized recurrent transducer inference engine.
 *
 * C API over the C++ core. All objects are opaque handles created and
 * destroyed by the library; every fallible call returns an ernn_status and
 * the last error message is kept per thread (ernn_last_error). Strings and
 * token buffers returned through out-parameters are owned by the caller and
 * released with ernn_string_free / ernn_tokens_free.
 */
#ifndef ERNN_H
#define ERNN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ERNN_API __declspec(dllexport)
#else
#define ERNN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ernn_status {
    ERNN_OK = 0,
    ERNN_INVALID_ARGUMENT = 1,
    ERNN_FORMAT_ERROR = 2,
    ERNN_CHECKSUM_MISMATCH = 3,
    ERNN_UNSUPPORTED_VERSION = 4,
    ERNN_MISSING_TENSOR = 5,
    ERNN_NUMERIC_ERROR = 6,
    ERNN_IO_ERROR = 7,
} ernn_status;

typedef struct ernn_model ernn_model;       /* loaded/converted model */
typedef struct ernn_engine ernn_engine;     /* compiled, immutable, shareable */
typedef struct ernn_stats ernn_stats;       /* calibration statistics */
typedef struct ernn_features ernn_features; /* one utterance of features */

/* Thread-local message for the most recent failure in this thread. */
ERNN_API const char* ernn_last_error(void);

ERNN_API void ernn_string_free(char* s);
ERNN_API void ernn_tokens_free(int32_t* tokens);

/* --- models ------------------------------------------------------------- */

ERNN_API ernn_status ernn_model_load(const char* path, ernn_model** out);
ERNN_API ernn_status ernn_model_save(const ernn_model* model, const char* path);
ERNN_API void ernn_model_free(ernn_model* model);

/* Deterministic random float model from a topology config file. */
ERNN_API ernn_status ernn_model_init(const char* topology_path, uint64_t seed,
                                     float weight_scale, ernn_model** out);

/* mode: "hybrid" or "integer"; stats required for integer, NULL otherwise. */
ERNN_API ernn_status ernn_model_convert(const ernn_model* model, const char* mode,
                                        const ernn_stats* stats, ernn_model** out);

/* One-shot magnitude pruning of the cell W/R matrices at block granularity. */
ERNN_API ernn_status ernn_model_prune(const ernn_model* model, double encoder_sparsity,
                                      double prediction_sparsity, int block_rows, int block_cols,
                                      ernn_model** out);

/* "float32" / "hybrid8" / "integer8_16" (static string, do not free). */
ERNN_API const char* ernn_model_mode(const ernn_model* model);
ERNN_API int64_t ernn_model_param_count(const ernn_model* model);

/* Parameter counts, per-section breakdown, serialized-size estimates. */
ERNN_API ernn_status ernn_model_info_json(const ernn_model* model, char** json_out);
ERNN_API ernn_status ernn_topology_info_json(const char* topology_path, char** json_out);

/* --- features ------------------------------------------------------------ */

/* Binary "ERNF" files or whitespace text matrices (sniffed by magic). */
ERNN_API ernn_status ernn_features_load(const char* path, float default_frame_duration,
                                        ernn_features** out);
ERNN_API ernn_status ernn_features_save(const ernn_features* features, const char* path);
ERNN_API ernn_status ernn_features_synth(uint64_t seed, int frames, int width,
                                         float frame_duration, ernn_features** out);
ERNN_API void ernn_features_free(ernn_features* features);
ERNN_API int ernn_features_frames(const ernn_features* features);
ERNN_API int ernn_features_width(const ernn_features* features);

/* --- calibration ---------------------------------------------------------- */

ERNN_API ernn_status ernn_calibrate(const ernn_model* float_model,
                                    const ernn_features* const* data, size_t count,
                                    int max_symbols_per_frame, ernn_stats** out);
ERNN_API ernn_status ernn_stats_save(const ernn_stats* stats, const char* path);
ERNN_API ernn_status ernn_stats_load(const char* path, ernn_stats** out);
ERNN_API void ernn_stats_free(ernn_stats* stats);

/* --- inference ------------------------------------------------------------ */

ERNN_API ernn_status ernn_engine_create(const ernn_model* model, ernn_engine** out);
ERNN_API void ernn_engine_free(ernn_engine* engine);

/* Greedy transducer decode; token 0 is the blank symbol and never emitted. */
ERNN_API ernn_status ernn_decode(const ernn_engine* engine, const ernn_features* features,
                                 int max_symbols_per_frame, int32_t** tokens_out,
                                 size_t* count_out);

/* Per-utterance wall time and RT factors plus the nearest-rank percentile. */
ERNN_API ernn_status ernn_bench_json(const ernn_engine* engine,
                                     const ernn_features* const* data, size_t count,
                                     int repetitions, int warmup, double percentile,
                                     int max_symbols_per_frame, int streams, char** json_out);

/* Per-layer output deltas and greedy-decode token agreement. */
ERNN_API ernn_status ernn_compare_json(const ernn_engine* a, const ernn_engine* b,
                                       const ernn_features* const* data, size_t count,
                                       int max_symbols_per_frame, char** json_out);

/* --- pruning demo ---------------------------------------------------------- */

typedef struct ernn_demo_train_params {
    int input_width;   /* feature/target width, default 4 */
    int hidden;        /* <= 64, default 32 */
    int seq_len;       /* default 24 */
    int delay;         /* echo delay, default 2 */
    int steps;         /* default 1200 */
    double learning_rate;
    double initial_sparsity;
    double final_sparsity;
    int64_t start_step;
    int64_t end_step;
    int64_t mask_update_interval;
    int block_rows;
    int block_cols;
    uint64_t seed;
    int log_interval;
} ernn_demo_train_params;

ERNN_API void ernn_demo_train_params_default(ernn_demo_train_params* params);
ERNN_API ernn_status ernn_demo_train_json(const ernn_demo_train_params* params, char** json_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* ERNN_H */
