#ifndef SUBGOAL_DS_H
#define SUBGOAL_DS_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SdsStatus {
  SDS_STATUS_OK = 0,
  SDS_STATUS_NULL_POINTER = 1,
  SDS_STATUS_INVALID_ARGUMENT = 2,
  SDS_STATUS_IO = 3,
  SDS_STATUS_PARSE = 4,
  SDS_STATUS_VALIDATION = 5,
  SDS_STATUS_NUMERIC = 6,
  SDS_STATUS_UNSUPPORTED = 7,
  SDS_STATUS_PANIC = 8,
} SdsStatus;

// A cascade of segment policies with its switching state.
typedef struct SdsController SdsController;

// A loaded demonstration.
typedef struct SdsDemo SdsDemo;

// A trained segment policy.
typedef struct SdsModel SdsModel;

// Result of one controller step.
typedef struct SdsStepInfo {
  // -1: no gripper command this step, 0: open, 1: close.
  int32_t gripper_command;
  size_t active_segment;
  // 1 when a subgoal was attained on this step.
  int32_t segment_completed;
} SdsStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into this library on the same
// thread.
const char *sds_last_error(void);

// Library version as a static NUL-terminated string.
const char *sds_version(void);

// Loads a model JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SdsStatus sds_model_load(const char *path, struct SdsModel **out);

// # Safety
// `model` must be null or a handle from [`sds_model_load`] not yet freed.
void sds_model_free(struct SdsModel *model);

// State dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t sds_model_dim(const struct SdsModel *model);

// Commanded world velocity at world position `x`, speed cap applied.
//
// # Safety
// `x` and `out` must point to `dim` doubles.
enum SdsStatus sds_model_velocity(const struct SdsModel *model,
                                  const double *x,
                                  size_t dim,
                                  double *out);

// Lyapunov value at world position `x`. Fails with `Unsupported` for BC
// models, which have none.
//
// # Safety
// `x` must point to `dim` doubles and `out` to one double.
enum SdsStatus sds_model_lyapunov(const struct SdsModel *model,
                                  const double *x,
                                  size_t dim,
                                  double *out);

// Builds a controller over `count` models. Subgoal `k` occupies
// `subgoals[k*dim .. (k+1)*dim]`; `gripper_actions[k]` is 0 (open) or 1
// (close). `delta <= 0` selects the default attainment radius. The models are
// copied, so the caller keeps ownership of the handles.
//
// # Safety
// `models` must point to `count` live handles, `subgoals` to `count * dim`
// doubles and `gripper_actions` to `count` bytes.
enum SdsStatus sds_controller_new(const struct SdsModel *const *models,
                                  size_t count,
                                  const double *subgoals,
                                  size_t dim,
                                  const uint8_t *gripper_actions,
                                  double delta,
                                  struct SdsController **out);

// # Safety
// `ctrl` must be null or a handle from [`sds_controller_new`] not yet freed.
void sds_controller_free(struct SdsController *ctrl);

// One control step at observed position `x`. `t_in_segment` is the fraction
// of the active segment's demonstrated duration elapsed, used only for the
// orientation schedule. Writes the velocity to `velocity_out`.
//
// # Safety
// `x` and `velocity_out` must point to `dim` doubles; `info` may be null.
enum SdsStatus sds_controller_step(struct SdsController *ctrl,
                                   const double *x,
                                   size_t dim,
                                   double t_in_segment,
                                   double *velocity_out,
                                   struct SdsStepInfo *info);

// Seconds the caller holds each command. When positive, stable policies
// command the displacement of their flow over that period so `v` falls on
// every held step. `0` turns this off and returns the raw field.
//
// # Safety
// `ctrl` must be null or a live handle.
enum SdsStatus sds_controller_set_period(struct SdsController *ctrl, double dt);

// Index of the policy currently in control, or `usize::MAX` for null.
//
// # Safety
// `ctrl` must be null or a live handle.
size_t sds_controller_active(const struct SdsController *ctrl);

// Returns control to the first segment.
//
// # Safety
// `ctrl` must be null or a live handle.
void sds_controller_reset(struct SdsController *ctrl);

// Loads a demonstration JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SdsStatus sds_demo_load(const char *path, struct SdsDemo **out);

// # Safety
// `demo` must be null or a handle from [`sds_demo_load`] not yet freed.
void sds_demo_free(struct SdsDemo *demo);

// Number of samples, or 0 for null.
//
// # Safety
// `demo` must be null or a live handle.
size_t sds_demo_len(const struct SdsDemo *demo);

// State dimension, or 0 for null.
//
// # Safety
// `demo` must be null or a live handle.
size_t sds_demo_dim(const struct SdsDemo *demo);

// Segments the demonstration at gripper events. Writes the number of
// segments to `count` and, when `subgoals` is non-null, the subgoals to
// `subgoals[k*dim ..]` for as many as fit in `capacity` segments.
//
// # Safety
// `subgoals` must be null or point to `capacity * dim` doubles.
enum SdsStatus sds_demo_segment(const struct SdsDemo *demo,
                                double *subgoals,
                                size_t capacity,
                                size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUBGOAL_DS_H */
