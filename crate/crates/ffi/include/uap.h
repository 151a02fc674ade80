#ifndef UAP_H
#define UAP_H

/* Generated from src/lib.rs by cbindgen; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define UAP_OK 0

#define UAP_ERR_INVALID_ARGUMENT 1

#define UAP_ERR_PRECONDITION 2

#define UAP_ERR_DEGENERATE_ENCODING 3

#define UAP_ERR_INTEGRITY 4

#define UAP_ERR_CORRUPT_DATASET 5

#define UAP_ERR_DEGENERATE_DATASET 6

#define UAP_ERR_IO 7

#define UAP_ERR_JSON 8

#define UAP_ERR_NULL_POINTER 9

#define UAP_ERR_PANIC 10

#define UAP_STRATEGY_TRA 0

#define UAP_STRATEGY_IRA 1

#define UAP_STRATEGY_TIRA 2

#define UAP_MODE_PATCH 0

#define UAP_MODE_GLOBAL 1

#define UAP_NORM_L2 0

#define UAP_NORM_LINF 1

#define UAP_ENCODER_LINEAR 0

#define UAP_ENCODER_MLP 1

// Opaque dataset.
typedef struct UapDataset UapDataset;

// Opaque image encoder.
typedef struct UapEncoder UapEncoder;

// Opaque perturbation with its constraint and provenance.
typedef struct UapPerturbation UapPerturbation;

// Attack settings. Fill with `uap_attack_config_default` and then adjust.
typedef struct UapAttackConfig {
  // One of `UAP_STRATEGY_*`.
  int32_t strategy;
  // One of `UAP_MODE_*`.
  int32_t mode;
  // One of `UAP_NORM_*`; global mode only.
  int32_t norm;
  // Global budget; global mode only.
  double epsilon;
  // Patch side in pixels, bottom-right corner; patch mode only.
  uintptr_t mask_side;
  uintptr_t k;
  double eta;
  uintptr_t epochs;
  uintptr_t max_inner_iters;
  uintptr_t batch_size;
  uintptr_t probe_images;
  uint64_t seed;
  // Nonzero to visit samples in a seeded random order.
  int32_t shuffle;
} UapAttackConfig;

// Clean and adversarial recall at one `k`.
typedef struct UapRecall {
  double tr_clean;
  double tr_adversarial;
  double ir_clean;
  double ir_adversarial;
} UapRecall;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *uap_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`) and returns the full message length
// excluding the terminator.
//
// # Safety
// `buf` must be valid for `len` bytes or null with `len == 0`.
uintptr_t uap_last_error(char *buf, uintptr_t len);

// Projects `delta` onto the ℓ2 ball of radius `epsilon`. `out` may alias
// `delta`.
//
// # Safety
// `delta` and `out` must be valid for `len` doubles.
int32_t uap_project_l2(const double *delta, uintptr_t len, double epsilon, double *out);

// Clamps `delta` to `[-epsilon, epsilon]`. `out` may alias `delta`.
//
// # Safety
// `delta` and `out` must be valid for `len` doubles.
int32_t uap_project_linf(const double *delta, uintptr_t len, double epsilon, double *out);

// Distance from `x` to the hyperplane `w·x + b = 0`.
//
// # Safety
// `w` and `x` must be valid for `dim` doubles; `distance` must be writable.
int32_t uap_binary_distance(const double *w,
                            double b,
                            const double *x,
                            uintptr_t dim,
                            double *distance);

// Smallest step `r` putting `x + r` on the hyperplane `w·x + b = 0`.
//
// # Safety
// `w`, `x` and `out` must be valid for `dim` doubles.
int32_t uap_binary_min_perturbation(const double *w,
                                    double b,
                                    const double *x,
                                    uintptr_t dim,
                                    double *out);

// Index of the class whose boundary with `y` is closest to `x`, for the
// affine classifier with row-major `weights` (`classes × dim`) and `offsets`.
//
// # Safety
// Pointers must be valid for the sizes implied by `classes` and `dim`.
int32_t uap_nearest_boundary(const double *weights,
                             const double *offsets,
                             uintptr_t classes,
                             uintptr_t dim,
                             const double *x,
                             uintptr_t y,
                             uintptr_t *nearest);

// Smallest step onto the nearest boundary of class `y`.
//
// # Safety
// Pointers must be valid for the sizes implied by `classes` and `dim`.
int32_t uap_multiclass_min_perturbation(const double *weights,
                                        const double *offsets,
                                        uintptr_t classes,
                                        uintptr_t dim,
                                        const double *x,
                                        uintptr_t y,
                                        double *out);

// Step that pushes `x` past its `k` nearest boundaries, overshoot included.
// `converged` is set to 1 when all `k` were crossed, else 0; `iterations`
// may be null.
//
// # Safety
// Pointers must be valid for the sizes implied by `classes` and `dim`.
int32_t uap_cross_k_boundaries(const double *weights,
                               const double *offsets,
                               uintptr_t classes,
                               uintptr_t dim,
                               const double *x,
                               uintptr_t y,
                               uintptr_t k,
                               double eta,
                               uintptr_t max_iters,
                               double *out,
                               int32_t *converged,
                               uintptr_t *iterations);

// Sets `hit` to 1 if any index in `matches` ranks in the top `k` of the
// row-major `gallery` (`n_gallery × dim`) by dot product with `query`.
//
// # Safety
// Pointers must be valid for the sizes given.
int32_t uap_indicator(const double *query,
                      const double *gallery,
                      uintptr_t n_gallery,
                      uintptr_t dim,
                      const uintptr_t *matches,
                      uintptr_t n_matches,
                      uintptr_t k,
                      int32_t *hit);

// Creates a randomly initialized encoder. `kind` is `UAP_ENCODER_LINEAR` or
// `UAP_ENCODER_MLP` (the benchmark architecture with the given input and
// output sizes).
//
// # Safety
// `out` must be writable.
int32_t uap_encoder_new(int32_t kind,
                        uintptr_t channels,
                        uintptr_t height,
                        uintptr_t width,
                        uintptr_t embed_dim,
                        uint64_t seed,
                        struct UapEncoder **out);

// Loads an encoder manifest (or its directory), verifying its hashes.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
int32_t uap_encoder_load(const char *path_, struct UapEncoder **out);

// Writes the encoder into directory `dir`.
//
// # Safety
// `encoder` must come from this library; `dir` must be NUL-terminated.
int32_t uap_encoder_save(const struct UapEncoder *encoder, const char *dir);

// Input length (`c·h·w`) and embedding dimension.
//
// # Safety
// `encoder` must come from this library; outputs must be writable.
int32_t uap_encoder_dims(const struct UapEncoder *encoder,
                         uintptr_t *input_len,
                         uintptr_t *embed_dim);

// Unit-norm embedding of a `c×h×w` image given as `input_len` doubles.
//
// # Safety
// `pixels` must be valid for `input_len` doubles and `out` for `embed_dim`.
int32_t uap_encoder_encode(const struct UapEncoder *encoder,
                           const double *pixels,
                           uintptr_t input_len,
                           double *out,
                           uintptr_t embed_dim);

// # Safety
// `encoder` must come from this library and not be used afterwards.
void uap_encoder_free(struct UapEncoder *encoder);

// Loads a dataset manifest (or its directory), verifying hashes and
// structure.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
int32_t uap_dataset_load(const char *path_, struct UapDataset **out);

// # Safety
// `dataset` must come from this library; outputs must be writable.
int32_t uap_dataset_counts(const struct UapDataset *dataset,
                           uintptr_t *n_images,
                           uintptr_t *n_texts);

// # Safety
// `dataset` must come from this library and not be used afterwards.
void uap_dataset_free(struct UapDataset *dataset);

// Defaults for `mode`, sized for images of `height × width`: TIRA for patch
// mode (3% square), TRA with the ℓ2 budget for global mode.
//
// # Safety
// `out` must be writable.
int32_t uap_attack_config_default(int32_t mode,
                                  uintptr_t height,
                                  uintptr_t width,
                                  struct UapAttackConfig *out);

// Synthesizes a universal perturbation.
//
// # Safety
// Handles must come from this library; `config` must be readable and `out`
// writable.
int32_t uap_attack_run(const struct UapEncoder *encoder,
                       const struct UapDataset *dataset,
                       const struct UapAttackConfig *config,
                       struct UapPerturbation **out);

// Loads a saved perturbation (sidecar path or directory), verifying hashes
// and budget.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
int32_t uap_perturbation_load(const char *path_, struct UapPerturbation **out);

// Writes the perturbation files into directory `dir`.
//
// # Safety
// `perturbation` must come from this library; `dir` must be NUL-terminated.
int32_t uap_perturbation_save(const struct UapPerturbation *perturbation, const char *dir);

// Copies `δ` (row-major `c×h×w`) into `out`, which must hold exactly `len`
// values.
//
// # Safety
// `perturbation` must come from this library; `out` must be valid for `len`
// doubles.
int32_t uap_perturbation_delta(const struct UapPerturbation *perturbation,
                               double *out,
                               uintptr_t len);

// # Safety
// `perturbation` must come from this library and not be used afterwards.
void uap_perturbation_free(struct UapPerturbation *perturbation);

// Clean and adversarial TR/IR recall at `k` (clamped to the gallery size).
//
// # Safety
// Handles must come from this library; `out` must be writable.
int32_t uap_evaluate_recall(const struct UapEncoder *encoder,
                            const struct UapDataset *dataset,
                            const struct UapPerturbation *perturbation,
                            uintptr_t k,
                            struct UapRecall *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UAP_H */
