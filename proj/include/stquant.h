#ifndef STQUANT_H
#define STQUANT_H

/*
 * C interface to the stquant library: block-wise optimizer-state codecs,
 * training runs with adaptive bit-width allocation, offline trace replay,
 * and run-report rendering.
 *
 * Every function that can fail returns stq_status; on failure a
 * thread-local message is available from stq_last_error() until the next
 * call on the same thread. Handles are opaque and must be released with
 * their matching free function.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define STQ_API __declspec(dllexport)
#else
#define STQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum stq_status {
  STQ_OK = 0,
  STQ_ERR_INVALID_ARGUMENT = 1,
  STQ_ERR_DATA = 2, /* unreadable/inconsistent inputs: files, traces, run dirs */
  STQ_ERR_INTERNAL = 3
} stq_status;

STQ_API const char* stq_version(void);

/* Message for the most recent failure on the calling thread ("" if none). */
STQ_API const char* stq_last_error(void);

/* ---------------------------------------------------------------- codec */

typedef struct stq_quantized stq_quantized; /* opaque quantized tensor */

typedef enum stq_mode {
  STQ_MODE_LINEAR = 0, /* symmetric absmax codes, signed */
  STQ_MODE_LOG = 1     /* log2-domain codes, nonnegative input, 0 reserved */
} stq_mode;

/* bits must be 4, 8, 16 or 32 (32 stores the buffer verbatim). */
STQ_API stq_status stq_quantize(const float* values, size_t length, int bits,
                                stq_mode mode, uint32_t block_size,
                                stq_quantized** out);

/* out must hold length floats, where length is the original element count. */
STQ_API stq_status stq_dequantize(const stq_quantized* state, float* out,
                                  size_t length);

STQ_API stq_status stq_quantized_packed_bytes(const stq_quantized* state,
                                              size_t* out_bytes);

STQ_API void stq_quantized_free(stq_quantized* state);

/* ------------------------------------------------------------- training */

typedef struct stq_train_options {
  const char* problem;   /* "quadratic" | "logistic" | "mlp" */
  const char* optimizer; /* "oracle32" | "fixed8" | "stquant" */
  long long steps;
  uint64_t seed;
  int layers;      /* quadratic blocks / mlp depth; <= 0 uses the default */
  long long dim;   /* quadratic dim / logistic dim / mlp input dim; <= 0 default */
  double lr;
  double tau;      /* <= 0 derives tau from model depth and batch size */
  double phi;
  long long update_freq;
  uint32_t block_size;
  int workers;     /* virtual workers for statistics aggregation */
} stq_train_options;

STQ_API void stq_train_options_init(stq_train_options* opts);

/*
 * Trains and writes into out_dir (created if missing): loss.csv,
 * memory.json, config.json, and for quantized arms also schedule.csv and
 * trace.jsonl. Identical options produce byte-identical files.
 */
STQ_API stq_status stq_train_run(const stq_train_options* opts,
                                 const char* out_dir);

/* --------------------------------------------------------------- replay */

typedef struct stq_replay_options {
  double tau;
  double phi;
  double alpha;          /* EMA smoothing */
  long long update_freq; /* cadence filter over trace steps; 1 = every record */
} stq_replay_options;

STQ_API void stq_replay_options_init(stq_replay_options* opts);

/*
 * Replays the JSONL trace through the bit-width decision chain and writes
 * schedule.csv and summary.json (average_bits, saved_vs_32bit_pct,
 * saved_vs_8bit_pct, unknown_field_warnings) into out_dir.
 */
STQ_API stq_status stq_replay_run(const stq_replay_options* opts,
                                  const char* trace_path, const char* out_dir);

/* --------------------------------------------------------------- report */

/*
 * Renders a human-readable memory table for a run directory produced by
 * stq_train_run. On success *out_text is a NUL-terminated string owned by
 * the caller; release it with stq_string_free.
 */
STQ_API stq_status stq_report_render(const char* run_dir, char** out_text);

STQ_API void stq_string_free(char* text);

#ifdef __cplusplus
}
#endif

#endif /* STQUANT_H */
