#ifndef HORUS_H
#define HORUS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HorusStatus {
  HORUS_STATUS_OK = 0,
  HORUS_STATUS_NULL_POINTER = 1,
  HORUS_STATUS_INVALID_INPUT = 2,
  HORUS_STATUS_CONFIG = 3,
  HORUS_STATUS_INVARIANT = 4,
  HORUS_STATUS_ENCODING = 5,
  HORUS_STATUS_IO = 6,
  // Buffer supplied by the caller is too small.
  HORUS_STATUS_BUFFER_TOO_SMALL = 7,
  HORUS_STATUS_PANIC = 8,
} HorusStatus;

typedef enum HorusLayer {
  HORUS_LAYER_FEATURE_FIRST = 0,
  HORUS_LAYER_CLASSIFIER = 1,
} HorusLayer;

typedef enum HorusFactor {
  HORUS_FACTOR_A = 0,
  HORUS_FACTOR_B = 1,
} HorusFactor;

// Opaque server handle.
typedef struct HorusServer HorusServer;

// Global shapes, detection settings and the seed for the initial `A`.
typedef struct HorusServerConfig {
  size_t rank;
  size_t feature_first_d_in;
  size_t feature_first_d_out;
  size_t classifier_d_in;
  size_t classifier_d_out;
  double lambda;
  size_t top_k;
  // When non-zero, flag this many clients; otherwise use `percentile`.
  size_t top_m;
  double percentile;
  // Initial global `A` entries are drawn from `U(±1/√d_in)`; `B` starts at 0.
  uint64_t seed;
} HorusServerConfig;

// One layer of a client submission. `a` is `rank × d_in`, `b` is
// `d_out × rank`, both row-major.
typedef struct HorusLayerFactors {
  enum HorusLayer layer;
  size_t d_in;
  size_t d_out;
  const double *a;
  const double *b;
} HorusLayerFactors;

typedef struct HorusRoundSummary {
  uint32_t round_index;
  size_t submissions;
  size_t flagged;
  // Non-zero when every client was flagged and the global state was kept.
  uint8_t skipped;
  double threshold;
} HorusRoundSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes of the last error message on this thread, excluding the
// terminating NUL.
size_t horus_last_error_length(void);

// Copies the last error message into `buf` as a NUL-terminated string,
// truncating if needed. Returns the number of bytes written, excluding NUL.
//
// # Safety
// `buf` must be valid for `cap` bytes of writes.
size_t horus_last_error_message(char *buf, size_t cap);

// NUL-terminated crate version.
const char *horus_version(void);

// Spectral entropy and top-`k` energy ratio of a row-major matrix.
//
// # Safety
// `data` must hold `rows * cols` doubles; the outputs must be writable.
enum HorusStatus horus_spectral_features(const double *data,
                                         size_t rows,
                                         size_t cols,
                                         size_t k,
                                         double *entropy_out,
                                         double *ratio_out);

// Creates a server. On success `*out` owns a handle that must be released
// with [`horus_server_free`].
//
// # Safety
// `config` must be readable and `out` writable.
enum HorusStatus horus_server_new(const struct HorusServerConfig *config, struct HorusServer **out);

// Releases a server handle. Null is ignored.
//
// # Safety
// `server` must come from [`horus_server_new`] and not be used afterwards.
void horus_server_free(struct HorusServer *server);

// Queues a client's factors for the next aggregation, replacing any
// earlier submission from the same client in this round.
//
// # Safety
// `server` must be a live handle; `layers` must hold `n_layers` entries
// whose matrix pointers are valid for their declared shapes.
enum HorusStatus horus_server_submit(struct HorusServer *server,
                                     uint32_t client_id,
                                     uint32_t arch_id,
                                     size_t rank,
                                     const struct HorusLayerFactors *layers,
                                     size_t n_layers);

// Queues a client update in the binary `HLRA` encoding.
//
// # Safety
// `server` must be a live handle and `bytes` valid for `len` bytes.
enum HorusStatus horus_server_submit_encoded(struct HorusServer *server,
                                             const uint8_t *bytes,
                                             size_t len);

// Number of submissions waiting for the next aggregation.
//
// # Safety
// `server` must be a live handle or null (which yields 0).
size_t horus_server_pending(const struct HorusServer *server);

// Scores, filters and aggregates the queued submissions, then clears the
// queue. `summary` may be null.
//
// # Safety
// `server` must be a live handle; `summary` writable when non-null.
enum HorusStatus horus_server_aggregate(struct HorusServer *server,
                                        struct HorusRoundSummary *summary);

// Copies the ids flagged by the last aggregation into `ids`. `*count`
// receives the number of flagged clients even when `cap` is too small.
//
// # Safety
// `server` must be a live handle, `ids` valid for `cap` writes (may be
// null when `cap` is 0) and `count` writable.
enum HorusStatus horus_server_flagged(const struct HorusServer *server,
                                      uint32_t *ids,
                                      size_t cap,
                                      size_t *count);

// HOPS score of `client_id` from the last aggregation.
//
// # Safety
// `server` must be a live handle and `score` writable.
enum HorusStatus horus_server_score(const struct HorusServer *server,
                                    uint32_t client_id,
                                    double *score);

// Shape of a global factor.
//
// # Safety
// `server` must be a live handle; `rows` and `cols` writable.
enum HorusStatus horus_server_global_shape(const struct HorusServer *server,
                                           enum HorusLayer layer,
                                           enum HorusFactor factor,
                                           size_t *rows,
                                           size_t *cols);

// Copies a global factor, row-major, into `buf`.
//
// # Safety
// `server` must be a live handle and `buf` valid for `cap` writes.
enum HorusStatus horus_server_global_factor(const struct HorusServer *server,
                                            enum HorusLayer layer,
                                            enum HorusFactor factor,
                                            double *buf,
                                            size_t cap);

// Human-readable name of a status code.
const char *horus_status_name(enum HorusStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HORUS_H */
