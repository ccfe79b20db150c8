/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef EDITROLL_H
#define EDITROLL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ErStatus {
  ER_STATUS_OK = 0,
  ER_STATUS_NULL_POINTER = 1,
  ER_STATUS_INVALID_ARGUMENT = 2,
  ER_STATUS_IO = 3,
  ER_STATUS_FORMAT = 4,
  ER_STATUS_BOUNDS = 5,
  ER_STATUS_SHAPE = 6,
  ER_STATUS_NO_LEGAL_EVENT = 7,
  ER_STATUS_STACK_EMPTY = 8,
  ER_STATUS_NUMERIC = 9,
  ER_STATUS_INTERNAL = 10,
} ErStatus;

typedef enum ErEventKind {
  ER_EVENT_KIND_ADD = 0,
  ER_EVENT_KIND_REMOVE = 1,
} ErEventKind;

typedef enum ErStopReason {
  ER_STOP_REASON_BUDGET = 0,
  ER_STOP_REASON_STABILIZED = 1,
} ErStopReason;

/**
 * A loaded scorer.
 */
typedef struct ErModel ErModel;

/**
 * An editing session bound to one model.
 */
typedef struct ErSession ErSession;

/**
 * Sampler settings. A negative `max_removals` means unlimited.
 */
typedef struct ErSamplerConfig {
  double temperature;
  int64_t max_removals;
  uint32_t max_iterations;
  bool protect_input;
  bool add_only;
  uint64_t seed;
} ErSamplerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *er_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *er_version(void);

struct ErSamplerConfig er_sampler_config_default(void);

/**
 * Load a checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string and `out` valid for one pointer write.
 */
enum ErStatus er_model_load(const char *path, struct ErModel **out);

/**
 * Grid the model was trained on.
 *
 * # Safety
 * `model` must come from [`er_model_load`]; out pointers may be null.
 */
enum ErStatus er_model_dims(const struct ErModel *model,
                            size_t *time_steps,
                            size_t *pitch_count,
                            uint8_t *pitch_offset);

/**
 * # Safety
 * `model` must come from [`er_model_load`] and not be used afterwards.
 * Null is ignored.
 */
void er_model_free(struct ErModel *model);

/**
 * Start a session on the model's grid. `cells` holds the initial roll
 * (`len` must equal the grid size) or is null for an empty roll.
 *
 * # Safety
 * `model` must be live, `cells` valid for `len` reads when non-null, and
 * `out` valid for one pointer write.
 */
enum ErStatus er_session_new(const struct ErModel *model,
                             const uint8_t *cells,
                             size_t len,
                             struct ErSamplerConfig config,
                             struct ErSession **out);

/**
 * Sample and apply one model event.
 *
 * # Safety
 * `session` must be live; out pointers may be null.
 */
enum ErStatus er_session_step(struct ErSession *session,
                              size_t *time,
                              size_t *pitch,
                              enum ErEventKind *kind,
                              double *logprob);

/**
 * Step until the iteration budget runs out or the roll stabilizes.
 *
 * # Safety
 * `session` must be live; out pointers may be null.
 */
enum ErStatus er_session_run(struct ErSession *session, enum ErStopReason *stop, size_t *steps);

/**
 * Toggle a cell as the user. `protect` shields it from model removal when
 * the session protects input.
 *
 * # Safety
 * `session` must be live.
 */
enum ErStatus er_session_edit(struct ErSession *session, size_t time, size_t pitch, bool protect);

/**
 * # Safety
 * `session` must be live; out pointers may be null.
 */
enum ErStatus er_session_undo(struct ErSession *session, size_t *time, size_t *pitch);

/**
 * # Safety
 * `session` must be live; out pointers may be null.
 */
enum ErStatus er_session_redo(struct ErSession *session, size_t *time, size_t *pitch);

/**
 * Copy the current roll into `buf`, which must hold exactly the grid size.
 *
 * # Safety
 * `session` must be live and `buf` valid for `len` writes.
 */
enum ErStatus er_session_roll(const struct ErSession *session, uint8_t *buf, size_t len);

/**
 * Occupied cells in the current roll; 0 for a null session.
 *
 * # Safety
 * `session` must be live or null.
 */
size_t er_session_note_count(const struct ErSession *session);

/**
 * # Safety
 * `session` must come from [`er_session_new`] and not be used afterwards.
 * Null is ignored.
 */
void er_session_free(struct ErSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDITROLL_H */
