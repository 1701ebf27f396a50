#ifndef TIMEKT_H
#define TIMEKT_H

/* Generated by cbindgen from the timekt-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KtfStatus {
  KTF_STATUS_OK = 0,
  KTF_STATUS_NULL_POINTER = 1,
  KTF_STATUS_CONFIG = 2,
  KTF_STATUS_DATA = 3,
  KTF_STATUS_NUMERIC = 4,
  KTF_STATUS_IO = 5,
  KTF_STATUS_STREAM = 6,
  KTF_STATUS_PANIC = 7,
} KtfStatus;

/**
 * A loaded checkpoint.
 */
typedef struct KtfModel KtfModel;

/**
 * Per-user histories bound to one model.
 */
typedef struct KtfSession KtfSession;

/**
 * The true answer of an already predicted question.
 */
typedef struct KtfReveal {
  int64_t row_id;
  int64_t user_id;
  /**
   * 0 or 1.
   */
  int32_t answered_correctly;
  /**
   * Chosen option, 0 to 3.
   */
  int32_t user_answer;
} KtfReveal;

/**
 * One incoming row. Answer fields are not part of an event; they
 * arrive later through `ktf_session_reveal`.
 */
typedef struct KtfEvent {
  int64_t row_id;
  int64_t user_id;
  int64_t timestamp;
  int64_t task_container_id;
  uint32_t content_index;
  /**
   * Nonzero for a lecture.
   */
  uint8_t is_lecture;
  /**
   * Elapsed time of the user's previous question bundle in ms; negative
   * when unknown.
   */
  int64_t prior_elapsed_ms;
  /**
   * 0 false, 1 true, negative when unknown.
   */
  int32_t prior_had_explanation;
} KtfEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ktf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ktf_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum KtfStatus ktf_model_load(const char *path, struct KtfModel **out);

/**
 * Releases a model; null is ignored. Sessions keep their own reference.
 *
 * # Safety
 * `model` must come from `ktf_model_load` and not be freed twice.
 */
void ktf_model_free(struct KtfModel *model);

/**
 * Copies the model's config digest (64 hex chars plus NUL) into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum KtfStatus ktf_model_digest(const struct KtfModel *model, char *buf, size_t len);

/**
 * Creates an empty session keeping at most `window` events per user.
 *
 * # Safety
 * `model` must be a live model and `out` a writable pointer.
 */
enum KtfStatus ktf_session_new(const struct KtfModel *model,
                               size_t window,
                               struct KtfSession **out);

/**
 * # Safety
 * `session` must come from `ktf_session_new` and not be freed twice.
 */
void ktf_session_free(struct KtfSession *session);

/**
 * Fills in the answers of previously predicted questions.
 *
 * # Safety
 * `reveals` must point to `n` values (may be null when `n` is 0).
 */
enum KtfStatus ktf_session_reveal(struct KtfSession *session,
                                  const struct KtfReveal *reveals,
                                  size_t n);

/**
 * Appends a group of events and writes one probability per question
 * event, in input order, to `probs`. `written` receives the count.
 *
 * # Safety
 * `events` must point to `n` values and `probs` to `capacity` writable
 * doubles.
 */
enum KtfStatus ktf_session_predict(struct KtfSession *session,
                                   const struct KtfEvent *events,
                                   size_t n,
                                   double *probs,
                                   size_t capacity,
                                   size_t *written);

/**
 * Number of events currently buffered for `user_id` (0 if unseen).
 *
 * # Safety
 * `session` must be a live session and `out` writable.
 */
enum KtfStatus ktf_session_history_len(const struct KtfSession *session,
                                       int64_t user_id,
                                       size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIMEKT_H */
