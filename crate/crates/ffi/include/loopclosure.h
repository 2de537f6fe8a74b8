#ifndef LOOPCLOSURE_H
#define LOOPCLOSURE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_CONFIG = 2,
  LC_STATUS_PERSISTENCE = 3,
  LC_STATUS_INVALID_INPUT = 4,
  LC_STATUS_INTERNAL = 5,
  LC_STATUS_PANIC = 6,
} LcStatus;

// Opaque engine handle.
typedef struct LcEngine LcEngine;

// Summary of one processed frame.
typedef struct LcFrameResult {
  // Non-zero when the frame had too few features and was skipped.
  int32_t bad_frame;
  // Non-zero when a loop closure was accepted.
  int32_t has_loop;
  uint64_t location;
  uint64_t loop_location;
  // Non-zero when `highest` is meaningful.
  int32_t has_highest;
  uint64_t highest;
  double highest_prob;
  double p_new;
  double ptime;
  size_t wm_size;
  size_t ltm_size;
  size_t vocab_size;
} LcFrameResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates an engine.
//
// `config` is optional `key = value` text; null means defaults. On success
// `*out` receives a handle owned by the caller.
//
// # Safety
// `config` must be null or a valid NUL-terminated string. `out` must be a
// valid pointer.
enum LcStatus lc_engine_new(const char *config, struct LcEngine **out);

// Processes one frame of `feature_count` descriptors of `dim` values each.
//
// `descriptors` holds `feature_count * dim` values row by row. `responses`
// holds one detector response per feature, or is null for all zeros.
//
// # Safety
// `engine` must come from [`lc_engine_new`]. The arrays must hold the
// stated number of values. `out` must be a valid pointer.
enum LcStatus lc_engine_process(struct LcEngine *engine,
                                uint64_t image_id,
                                const float *descriptors,
                                const float *responses,
                                size_t feature_count,
                                size_t dim,
                                struct LcFrameResult *out);

// Writes the number of locations in working memory to `*out`.
//
// # Safety
// `engine` must come from [`lc_engine_new`]; `out` must be valid.
enum LcStatus lc_engine_wm_size(const struct LcEngine *engine, size_t *out);

// Flushes pending writes and compacts long-term memory. The handle stays
// allocated and must still be passed to [`lc_engine_free`]; any other use
// afterwards fails.
//
// # Safety
// `engine` must come from [`lc_engine_new`].
enum LcStatus lc_engine_shutdown(struct LcEngine *engine);

// Releases an engine. Null is ignored.
//
// # Safety
// `engine` must be null or come from [`lc_engine_new`], and must not be
// used afterwards.
void lc_engine_free(struct LcEngine *engine);

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *lc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *lc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOOPCLOSURE_H */
