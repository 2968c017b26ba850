/* C interface to the canids quantized CAN intrusion detectors. */

#ifndef CANIDS_H
#define CANIDS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum CanidsStatus {
  CANIDS_STATUS_OK = 0,
  /**
   * Feature not emitted yet: the window FIFO is still warming up.
   */
  CANIDS_STATUS_WARM_UP = 1,
  CANIDS_STATUS_NULL_POINTER = 2,
  CANIDS_STATUS_INVALID_ARGUMENT = 3,
  CANIDS_STATUS_UTF8 = 4,
  CANIDS_STATUS_IO = 5,
  CANIDS_STATUS_INVALID_MODEL = 6,
  CANIDS_STATUS_WIDTH_MISMATCH = 7,
  CANIDS_STATUS_BUFFER_TOO_SMALL = 8,
  CANIDS_STATUS_PANIC = 9,
} CanidsStatus;

/**
 * Quantized detector handle; thread-safe for concurrent `score` calls.
 */
typedef struct CanidsDetector CanidsDetector;

/**
 * Sliding-window feature builder; single-threaded.
 */
typedef struct CanidsWindow CanidsWindow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *canids_version(void);

/**
 * Message for the most recent error on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *canids_last_error_message(void);

/**
 * Loads a quantized model container (`.qmlp`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must point to
 * writable storage for one pointer. On success `*out` owns the detector
 * and must be released with [`canids_detector_free`].
 */
enum CanidsStatus canids_detector_load(const char *path, struct CanidsDetector **out);

/**
 * Releases a detector handle; NULL is a no-op.
 *
 * # Safety
 * `detector` must be NULL or a pointer from [`canids_detector_load`] that
 * has not been freed.
 */
void canids_detector_free(struct CanidsDetector *detector);

/**
 * Input width the detector expects (feature element count), or 0 on NULL.
 *
 * # Safety
 * `detector` must be NULL or a live handle.
 */
size_t canids_detector_input_width(const struct CanidsDetector *detector);

/**
 * Scores one feature vector; writes the attack probability to `out_prob`.
 *
 * # Safety
 * `feature` must point to `feature_len` readable `int8_t`s; `out_prob`
 * must be writable.
 */
enum CanidsStatus canids_detector_score(const struct CanidsDetector *detector,
                                        const int8_t *feature,
                                        size_t feature_len,
                                        double *out_prob);

/**
 * Creates a message window of the given depth (the detectors use 4).
 * Returns NULL when `depth` is 0.
 */
struct CanidsWindow *canids_window_new(size_t depth);

/**
 * Releases a window handle; NULL is a no-op.
 *
 * # Safety
 * `window` must be NULL or a pointer from [`canids_window_new`] that has
 * not been freed.
 */
void canids_window_free(struct CanidsWindow *window);

/**
 * Feature width (`10 * depth`) emitted by this window, or 0 on NULL.
 *
 * # Safety
 * `window` must be NULL or a live handle.
 */
size_t canids_window_feature_width(const struct CanidsWindow *window);

/**
 * Clears the window back to the warm-up state.
 *
 * # Safety
 * `window` must be a live handle.
 */
enum CanidsStatus canids_window_reset(struct CanidsWindow *window);

/**
 * Pushes one received frame. Once the FIFO is warm every push writes a
 * feature of `canids_window_feature_width` signed bytes into
 * `out_feature` and returns `Ok`; during warm-up it returns `WarmUp` and
 * writes nothing.
 *
 * # Safety
 * `payload` must point to `payload_len` readable bytes (NULL allowed when
 * `payload_len` is 0); `out_feature` must hold `out_capacity` writable
 * `int8_t`s.
 */
enum CanidsStatus canids_window_push(struct CanidsWindow *window,
                                     double timestamp,
                                     uint16_t can_id,
                                     const uint8_t *payload,
                                     size_t payload_len,
                                     int8_t *out_feature,
                                     size_t out_capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CANIDS_H */
