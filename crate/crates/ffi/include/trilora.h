#ifndef TRILORA_H
#define TRILORA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TriloraEncoding {
  TRILORA_ENCODING_BASE64 = 0,
  TRILORA_ENCODING_ARRAY = 1,
} TriloraEncoding;

typedef enum TriloraInit {
  /**
   * `B = 0`, so a fresh adapter leaves the layer output unchanged.
   */
  TRILORA_INIT_OUTPUT_PRESERVING = 0,
  TRILORA_INIT_LECUN_ALL = 1,
} TriloraInit;

typedef enum TriloraMode {
  TRILORA_MODE_B_ONLY = 0,
  TRILORA_MODE_AB = 1,
  TRILORA_MODE_CB = 2,
  TRILORA_MODE_ABC = 3,
} TriloraMode;

typedef enum TriloraRatioMode {
  TRILORA_RATIO_MODE_UNIFORM = 0,
  /**
   * Per-layer ratios from the layer shape.
   */
  TRILORA_RATIO_MODE_EQ7 = 1,
  /**
   * Global ratio base.
   */
  TRILORA_RATIO_MODE_EQ8 = 2,
} TriloraRatioMode;

/**
 * Result code of every fallible call.
 */
typedef enum TriloraStatus {
  TRILORA_STATUS_OK = 0,
  TRILORA_STATUS_NULL_POINTER = 1,
  TRILORA_STATUS_INVALID_ARGUMENT = 2,
  TRILORA_STATUS_SHAPE_MISMATCH = 3,
  TRILORA_STATUS_RANK_TOO_LARGE = 4,
  TRILORA_STATUS_NON_FINITE = 5,
  TRILORA_STATUS_PARSE = 6,
  TRILORA_STATUS_PANIC = 7,
} TriloraStatus;

/**
 * Opaque AdamW state bound to one adapter's shapes.
 */
typedef struct TriloraAdamState TriloraAdamState;

/**
 * Opaque tri-matrix adapter.
 */
typedef struct TriloraAdapter TriloraAdapter;

/**
 * Shape and hyperparameters of an adapter.
 */
typedef struct TriloraSpec {
  size_t m;
  size_t n;
  size_t r1;
  size_t r2;
  enum TriloraMode mode;
  enum TriloraInit init;
  uint64_t seed;
  double scale;
} TriloraSpec;

/**
 * Writable gradient buffers with the same shapes as [`TriloraGrads`].
 */
typedef struct TriloraGradsOut {
  double *a;
  size_t a_len;
  double *b;
  size_t b_len;
  double *c;
  size_t c_len;
} TriloraGradsOut;

/**
 * Read-only gradient buffers, `a` is `r2 x n`, `b` is `r1 x r2`, `c` is `m x r1`.
 */
typedef struct TriloraGrads {
  const double *a;
  size_t a_len;
  const double *b;
  size_t b_len;
  const double *c;
  size_t c_len;
} TriloraGrads;

/**
 * Learning rates for the three factors.
 */
typedef struct TriloraRates {
  double a;
  double b;
  double c;
} TriloraRates;

/**
 * AdamW hyperparameters. The learning rates come from [`TriloraRates`].
 */
typedef struct TriloraAdamConfig {
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
} TriloraAdamConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL if the last
 * call succeeded. Valid until the next call into the library on this thread.
 */
const char *trilora_last_error(void);

/**
 * Creates an adapter. `r1` must not exceed `m` and `r2` must not exceed `n`.
 *
 * # Safety
 * `spec` and `out` must be valid pointers.
 */
enum TriloraStatus trilora_adapter_new(const struct TriloraSpec *spec, struct TriloraAdapter **out);

/**
 * # Safety
 * `adapter` must be NULL or a handle from this library not yet freed.
 */
void trilora_adapter_free(struct TriloraAdapter *adapter);

/**
 * Writes the adapter's spec to `out`.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a valid pointer.
 */
enum TriloraStatus trilora_adapter_spec(const struct TriloraAdapter *adapter,
                                        struct TriloraSpec *out);

/**
 * Copies the three factors into caller buffers (`a`: `r2 x n`, `b`:
 * `r1 x r2`, `c`: `m x r1`).
 *
 * # Safety
 * `adapter` must be a live handle; each buffer must hold its stated length.
 */
enum TriloraStatus trilora_adapter_factors(const struct TriloraAdapter *adapter,
                                           struct TriloraGradsOut out);

/**
 * Replaces the three factors, keeping the spec. Frozen factors are
 * overwritten too.
 *
 * # Safety
 * `adapter` must be a live handle; each buffer must hold its stated length.
 */
enum TriloraStatus trilora_adapter_set_factors(struct TriloraAdapter *adapter,
                                               struct TriloraGrads factors);

/**
 * Adapter contribution `s·C·B·A·X` for `x` of shape `n x batch`, written to
 * `out` of shape `m x batch`.
 *
 * # Safety
 * `adapter` must be a live handle; `x` and `out` must hold their stated lengths.
 */
enum TriloraStatus trilora_adapter_forward(const struct TriloraAdapter *adapter,
                                           const double *x,
                                           size_t x_len,
                                           size_t batch,
                                           double *out,
                                           size_t out_len);

/**
 * Gradients of `L` with respect to `A`, `B` and `C` given the input `x`
 * (`n x batch`) and the upstream gradient `u = ∂L/∂Y` (`m x batch`).
 *
 * # Safety
 * `adapter` must be a live handle; every buffer must hold its stated length.
 */
enum TriloraStatus trilora_adapter_grads(const struct TriloraAdapter *adapter,
                                         const double *x,
                                         size_t x_len,
                                         const double *u,
                                         size_t u_len,
                                         size_t batch,
                                         struct TriloraGradsOut out);

/**
 * Per-factor rates for a layer of shape `m x n`. `ratio_base` is used only
 * by `TRILORA_RATIO_MODE_EQ8`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TriloraStatus trilora_lr_ratios(enum TriloraRatioMode mode,
                                     double base_lr,
                                     double ratio_base,
                                     size_t m,
                                     size_t n,
                                     struct TriloraRates *out);

/**
 * `X ← X − η_X·sign(G_X)` for every factor the adapter's mode trains.
 * Gradients of frozen factors are still shape-checked but otherwise ignored.
 *
 * # Safety
 * `adapter` must be a live handle; gradient buffers must hold their stated lengths.
 */
enum TriloraStatus trilora_signsgd_step(struct TriloraAdapter *adapter,
                                        struct TriloraGrads grads,
                                        struct TriloraRates rates);

/**
 * Fresh AdamW state (zero moments, step 0) matching `adapter`.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a valid pointer.
 */
enum TriloraStatus trilora_adam_state_new(const struct TriloraAdapter *adapter,
                                          struct TriloraAdamState **out);

/**
 * # Safety
 * `state` must be NULL or a handle from this library not yet freed.
 */
void trilora_adam_state_free(struct TriloraAdamState *state);

/**
 * Number of AdamW steps taken with `state`.
 *
 * # Safety
 * `state` must be a live handle.
 */
uint64_t trilora_adam_state_step(const struct TriloraAdamState *state);

/**
 * One bias-corrected AdamW step with decoupled weight decay.
 *
 * # Safety
 * `adapter` and `state` must be live handles and `config` a valid pointer;
 * gradient buffers must hold their stated lengths.
 */
enum TriloraStatus trilora_adamw_step(struct TriloraAdapter *adapter,
                                      struct TriloraAdamState *state,
                                      struct TriloraGrads grads,
                                      const struct TriloraAdamConfig *config,
                                      struct TriloraRates rates);

/**
 * Matthews correlation of a binary confusion matrix; 0 when undefined.
 */
double trilora_mcc(uint64_t tp, uint64_t tn, uint64_t fp, uint64_t fn_);

/**
 * Serializes the adapter as a JSON checkpoint into a new string owned by the
 * caller.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a valid pointer.
 */
enum TriloraStatus trilora_checkpoint_to_json(const struct TriloraAdapter *adapter,
                                              enum TriloraEncoding encoding,
                                              char **out);

/**
 * Loads a tri-matrix adapter from a JSON checkpoint. LoRA checkpoints are
 * rejected with `TRILORA_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TriloraStatus trilora_checkpoint_from_json(const char *json, struct TriloraAdapter **out);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be NULL or a string from this library not yet freed.
 */
void trilora_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRILORA_H */
