#ifndef WCOMP_H
#define WCOMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WcStatus {
  WC_STATUS_OK = 0,
  WC_STATUS_NULL_POINTER = 1,
  WC_STATUS_INVALID_INPUT = 2,
  WC_STATUS_DOMAIN = 3,
  WC_STATUS_UNSUPPORTED = 4,
  WC_STATUS_DIMENSION = 5,
  WC_STATUS_CONTRACT = 6,
  WC_STATUS_DIVERGED = 7,
  WC_STATUS_DATASET = 8,
  WC_STATUS_CHECKPOINT = 9,
  WC_STATUS_CONFIG = 10,
  WC_STATUS_IO = 11,
  WC_STATUS_BUFFER_TOO_SMALL = 12,
  WC_STATUS_PANIC = 99,
} WcStatus;

typedef enum WcKind {
  WC_KIND_IDENTITY = 0,
  WC_KIND_ARCTAN = 1,
  WC_KIND_ARCSINH = 2,
  WC_KIND_ERF = 3,
  WC_KIND_POWERPROP = 4,
} WcKind;

/**
 * Plain network (64-bit precision).
 */
typedef struct WcNetwork WcNetwork;

/**
 * Training run over one seed (64-bit precision).
 */
typedef struct WcTrainer WcTrainer;

/**
 * Scalar reparameterization; `alpha` is read for `Powerprop` only.
 */
typedef struct WcReparam {
  enum WcKind kind;
  double a;
  double b;
  double alpha;
} WcReparam;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message (NUL-terminated, truncated
 * to `cap`) into `buf` and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t wc_last_error(char *buf, size_t cap);

/**
 * `psi(v)`.
 *
 * # Safety
 * `reparam` and `out` must be valid pointers.
 */
enum WcStatus wc_psi(const struct WcReparam *reparam, double v, double *out);

/**
 * `psi'(v)`.
 *
 * # Safety
 * `reparam` and `out` must be valid pointers.
 */
enum WcStatus wc_psi_prime(const struct WcReparam *reparam, double v, double *out);

/**
 * `psi^-1(w)`; `WC_STATUS_DOMAIN` outside the image.
 *
 * # Safety
 * `reparam` and `out` must be valid pointers.
 */
enum WcStatus wc_psi_inverse(const struct WcReparam *reparam, double w, double *out);

/**
 * `(d psi / da, d psi / db)` at `v`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WcStatus wc_psi_grad_ab(const struct WcReparam *reparam,
                             double v,
                             double *out_a,
                             double *out_b);

/**
 * Creates a trainer from a JSON experiment config for one seed. Relative
 * dataset paths are resolved against `base_dir` (may be null).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `base_dir` null or one,
 * and `out` a valid pointer.
 */
enum WcStatus wc_trainer_new(const char *config_json,
                             const char *base_dir,
                             uint64_t seed,
                             struct WcTrainer **out);

/**
 * Restores a trainer saved with [`wc_trainer_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WcStatus wc_trainer_load(const char *path, struct WcTrainer **out);

/**
 * Runs one mini-batch; `*running` becomes 0 once training has ended.
 *
 * # Safety
 * `t` must come from this library; `running` must be valid or null.
 */
enum WcStatus wc_trainer_step(struct WcTrainer *t, uint8_t *running);

/**
 * Trains until the configured epoch count is reached.
 *
 * # Safety
 * `t` must come from this library.
 */
enum WcStatus wc_trainer_run(struct WcTrainer *t);

/**
 * Number of completed epochs.
 *
 * # Safety
 * `t` must come from this library; `out` must be valid.
 */
enum WcStatus wc_trainer_epoch(const struct WcTrainer *t, size_t *out);

/**
 * Saves the full training state.
 *
 * # Safety
 * `t` must come from this library; `path` must be a NUL-terminated string.
 */
enum WcStatus wc_trainer_save(const struct WcTrainer *t, const char *path);

/**
 * Writes the run summary as JSON into `buf` (NUL-terminated). `*len`
 * receives the length without the terminator; a buffer that is too small
 * yields `WC_STATUS_BUFFER_TOO_SMALL` with `*len` still set.
 *
 * # Safety
 * `t` must come from this library, `buf` valid for `cap` bytes (or null),
 * `len` valid.
 */
enum WcStatus wc_trainer_result_json(const struct WcTrainer *t, char *buf, size_t cap, size_t *len);

/**
 * Bakes the current weights into a plain network.
 *
 * # Safety
 * `t` must come from this library and `out` be valid.
 */
enum WcStatus wc_trainer_bake(struct WcTrainer *t, struct WcNetwork **out);

/**
 * # Safety
 * `t` must come from this library (or be null) and not be used afterwards.
 */
void wc_trainer_free(struct WcTrainer *t);

/**
 * Loads a plain (baked) network checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum WcStatus wc_network_load(const char *path, struct WcNetwork **out);

/**
 * # Safety
 * `n` must come from this library; `path` must be a NUL-terminated string.
 */
enum WcStatus wc_network_save(const struct WcNetwork *n, const char *path);

/**
 * Features per sample and number of classes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum WcStatus wc_network_dims(const struct WcNetwork *n, size_t *input_len, size_t *classes);

/**
 * Eval-mode logits for `batch` samples. `input` holds `batch * input_len`
 * values, `out` must hold `batch * classes`.
 *
 * # Safety
 * `input` and `out` must be valid for the stated lengths.
 */
enum WcStatus wc_network_logits(const struct WcNetwork *n,
                                const double *input,
                                size_t batch,
                                double *out,
                                size_t out_len);

/**
 * # Safety
 * `n` must come from this library (or be null) and not be used afterwards.
 */
void wc_network_free(struct WcNetwork *n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WCOMP_H */
