#ifndef ERED_H
#define ERED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum EredStatus {
  ERED_STATUS_OK = 0,
  ERED_STATUS_NULL_POINTER = 1,
  ERED_STATUS_INVALID_ARGUMENT = 2,
  ERED_STATUS_SHAPE = 3,
  ERED_STATUS_CONFIG = 4,
  ERED_STATUS_IO = 5,
  ERED_STATUS_NUMERIC = 6,
  ERED_STATUS_PROTOCOL = 7,
  ERED_STATUS_DIVERGENCE = 8,
  ERED_STATUS_PANIC = 9,
} EredStatus;

/*
 Image handle: `height × width × channels` doubles.
 */
typedef struct EredImage EredImage;

/*
 Gaussian-mixture prior handle.
 */
typedef struct EredPrior EredPrior;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *ered_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ered_version(void);

/*
 Copies `height * width * channels` doubles, channel-interleaved row-major.

 # Safety
 `data` must point to that many readable doubles; `out` must be writable.
 */
enum EredStatus ered_image_new(size_t height,
                               size_t width,
                               size_t channels,
                               const double *data,
                               struct EredImage **out);

/*
 Loads PNG, PGM/PPM or EDNZ. PNG/PNM values are scaled to `[0, 1]`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EredStatus ered_image_load(const char *path, struct EredImage **out);

/*
 Saves by extension. PNG output is 16-bit and clamped to `[0, 1]`.

 # Safety
 `image` must be a live handle; `path` a NUL-terminated string.
 */
enum EredStatus ered_image_save(const struct EredImage *image, const char *path);

/*
 # Safety
 `image` must be a live handle; the out-pointers must be writable.
 */
enum EredStatus ered_image_shape(const struct EredImage *image,
                                 size_t *height,
                                 size_t *width,
                                 size_t *channels);

/*
 Copies the pixels into `buf`, which must hold exactly `len` doubles.

 # Safety
 `image` must be a live handle; `buf` must have room for `len` doubles.
 */
enum EredStatus ered_image_read(const struct EredImage *image, double *buf, size_t len);

/*
 # Safety
 `image` must be null or a handle not yet freed.
 */
void ered_image_free(struct EredImage *image);

/*
 Parses `{"components": [{"weight", "mean", "tau"}, ...]}`.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum EredStatus ered_prior_from_json(const char *json, struct EredPrior **out);

/*
 # Safety
 `prior` must be a live handle; `dim` writable.
 */
enum EredStatus ered_prior_dim(const struct EredPrior *prior, size_t *dim);

/*
 `log p_σ(x)` for the prior smoothed by `N(0, σ² I)`.

 # Safety
 `x` must hold `len` doubles; `out` must be writable.
 */
enum EredStatus ered_prior_log_density(const struct EredPrior *prior,
                                       double sigma,
                                       const double *x,
                                       size_t len,
                                       double *out);

/*
 `∇ log p_σ(x)` into `out` (`len` doubles).

 # Safety
 `x` and `out` must each hold `len` doubles.
 */
enum EredStatus ered_prior_score(const struct EredPrior *prior,
                                 double sigma,
                                 const double *x,
                                 size_t len,
                                 double *out);

/*
 Posterior mean `E[x | x + σ ε = x_in]` into `out`; `sigma` must be > 0.

 # Safety
 `x` and `out` must each hold `len` doubles.
 */
enum EredStatus ered_prior_mmse(const struct EredPrior *prior,
                                double sigma,
                                const double *x,
                                size_t len,
                                double *out);

/*
 # Safety
 `prior` must be null or a handle not yet freed.
 */
void ered_prior_free(struct EredPrior *prior);

/*
 Simulates an observation of `image` under a forward-model JSON object
 (the `"model"` section of a CLI config).

 # Safety
 `model_json` must be a NUL-terminated string, `image` a live handle and
 `out` writable.
 */
enum EredStatus ered_degrade(const char *model_json,
                             const struct EredImage *image,
                             uint64_t seed,
                             struct EredImage **out);

/*
 Runs the restoration loop. `config_json` needs `"model"` and `"run"`
 sections as in the CLI config. On `ERED_STATUS_DIVERGENCE` the partial
 iterate is still returned through `out`.

 # Safety
 `config_json` must be a NUL-terminated string, `observation` a live
 handle, `out` writable and `iterations` null or writable.
 */
enum EredStatus ered_restore(const char *config_json,
                             const struct EredImage *observation,
                             struct EredImage **out,
                             size_t *iterations);

/*
 PSNR in dB of `image` against `reference` for the given peak value.

 # Safety
 Both handles must be live; `out` writable.
 */
enum EredStatus ered_psnr(const struct EredImage *image,
                          const struct EredImage *reference,
                          double peak,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERED_H */
