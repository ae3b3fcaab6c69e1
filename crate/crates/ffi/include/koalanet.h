#ifndef KOALANET_H
#define KOALANET_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Taps in a degradation kernel.
 */
#define KOALA_KERNEL_TAPS 400

/*
 Result codes. Values 2 to 4 match the command-line exit codes.
 */
typedef enum KoalaStatus {
  KOALA_STATUS_OK = 0,
  KOALA_STATUS_IO = 2,
  KOALA_STATUS_INVALID = 3,
  KOALA_STATUS_NUMERIC = 4,
  KOALA_STATUS_NULL_POINTER = 5,
  KOALA_STATUS_PANIC = 6,
} KoalaStatus;

/*
 Loaded network. Create with [`koala_model_load`], release with
 [`koala_model_free`].
 */
typedef struct KoalaModel KoalaModel;

/*
 Library version, a static NUL-terminated string.
 */
const char *koala_version(void);

/*
 Message for the last failed call on this thread, or an empty string.
 Valid until the next call into this library from the same thread.
 */
const char *koala_last_error(void);

/*
 Loads a checkpoint written by `koalanet train`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KoalaStatus koala_model_load(const char *path, struct KoalaModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`koala_model_load`] and not be used afterwards.
 */
void koala_model_free(struct KoalaModel *model);

/*
 Upscaling factor, or 0 for a null model.

 # Safety
 `model` must be null or a live model.
 */
uint32_t koala_model_scale(const struct KoalaModel *model);

/*
 Whether the model carries KOALA modules and a downsampler.

 # Safety
 `model` must be null or a live model.
 */
bool koala_model_is_koala(const struct KoalaModel *model);

/*
 Super-resolves a `width × height` image into `out`, which must hold
 `width·s × height·s × 3` bytes.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum KoalaStatus koala_model_super_resolve(const struct KoalaModel *model,
                                           const uint8_t *rgb,
                                           uint32_t width,
                                           uint32_t height,
                                           uint8_t *out,
                                           uintptr_t out_len);

/*
 Image-wide mean of the estimated per-pixel degradation kernels, written
 to `kernel_out` (400 doubles).

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum KoalaStatus koala_model_estimate_kernel(const struct KoalaModel *model,
                                             const uint8_t *rgb,
                                             uint32_t width,
                                             uint32_t height,
                                             double *kernel_out);

/*
 Degradation kernel for an anisotropic Gaussian followed by bicubic
 downscaling, written to `kernel_out` (400 doubles).

 # Safety
 `kernel_out` must hold 400 doubles.
 */
enum KoalaStatus koala_degradation_kernel(double sigma1,
                                          double sigma2,
                                          double theta,
                                          uint32_t scale,
                                          double *kernel_out);

/*
 Blurs with `kernel` (400 doubles), subsamples by `scale` and quantizes
 to 8 bits. `width` and `height` must be multiples of `scale`; `out`
 holds `width/s × height/s × 3` bytes.

 # Safety
 Pointers must be valid for the stated lengths.
 */
enum KoalaStatus koala_degrade(const uint8_t *rgb,
                               uint32_t width,
                               uint32_t height,
                               const double *kernel,
                               uint32_t scale,
                               uint8_t *out,
                               uintptr_t out_len);

#endif  /* KOALANET_H */
