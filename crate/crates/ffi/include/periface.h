#ifndef PERIFACE_H
#define PERIFACE_H

#include <stddef.h>
#include <stdint.h>

#define PF_OK 0

#define PF_ERR_NULL_POINTER 1

#define PF_ERR_INVALID_ARGUMENT 2

#define PF_ERR_DIMENSION 3

#define PF_ERR_IO 4

#define PF_ERR_NUMERIC 5

#define PF_ERR_CONFIG 6

// Malformed weight archive, image, CSV or JSON.
#define PF_ERR_FORMAT 7

// Landmarks, masks, embeddings or datasets that cannot be used.
#define PF_ERR_DEGENERATE 8

#define PF_ERR_BUFFER_TOO_SMALL 9

#define PF_ERR_PANIC 99

typedef enum PfResultImage {
  // The masked input.
  PF_RESULT_IMAGE_MASKED = 0,
  // The periocular crop.
  PF_RESULT_IMAGE_CROP = 1,
  // Rendered from the encoded latent, before refinement.
  PF_RESULT_IMAGE_PRE = 2,
  // Rendered from the refined latent.
  PF_RESULT_IMAGE_POST = 3,
} PfResultImage;

typedef enum PfMetric {
  // Mean per-pixel ℓ1 of the RGB difference, 0–255 scale.
  PF_METRIC_L1 = 0,
  PF_METRIC_PSNR = 1,
  PF_METRIC_SSIM = 2,
  // Total variation of the second image; the first is ignored.
  PF_METRIC_TV = 3,
} PfMetric;

// A frozen generator.
typedef struct PfGenerator PfGenerator;

// An RGB image, channel-planar, values in `[0, 1]`.
typedef struct PfImage PfImage;

// Outputs of one inpainting run.
typedef struct PfInpaintResult PfInpaintResult;

// Trained encoders, mapper and frozen generator plus the loss weights used
// for latent refinement.
typedef struct PfInpainter PfInpainter;

// Settings of the latent refinement. `max_iters = 0` skips it.
typedef struct PfInversionParams {
  size_t max_iters;
  double lr;
  double beta1;
  double beta2;
  double tolerance;
} PfInversionParams;

// Loss components in the order of the weighted training total.
typedef struct PfLossComponents {
  double perc;
  double style;
  double id;
  double lnd;
  double rec;
} PfLossComponents;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *pf_last_error_message(void);

void pf_clear_last_error(void);

// Library version as a static NUL-terminated string.
const char *pf_version(void);

// `data` holds `3 * height * width` values, red plane first.
// `data` must point to `len` readable doubles; `out` must be writable.
int32_t pf_image_new(size_t height,
                     size_t width,
                     const double *data,
                     size_t len,
                     struct PfImage **out);

// `file` must be a NUL-terminated string; `out` must be writable.
int32_t pf_image_load_png(const char *file, struct PfImage **out);

// `image` must be a live handle; `file` a NUL-terminated string.
int32_t pf_image_save_png(const struct PfImage *image, const char *file);

// `image` must be a live handle or NULL (returns 0).
size_t pf_image_height(const struct PfImage *image);

// `image` must be a live handle or NULL (returns 0).
size_t pf_image_width(const struct PfImage *image);

// Copy the pixel data into `buf`, which must hold `3 * height * width`
// doubles.
// `buf` must point to `len` writable doubles.
int32_t pf_image_copy_data(const struct PfImage *image, double *buf, size_t len);

// `image` must come from this library and not be used afterwards.
void pf_image_free(struct PfImage *image);

// The built-in toy generator.
// `out` must be writable.
int32_t pf_generator_toy(struct PfGenerator **out);

// `spec` is `toy` or `archive:<path>`.
// `spec` must be a NUL-terminated string; `out` must be writable.
int32_t pf_generator_load(const char *spec, struct PfGenerator **out);

// `gen` must be a live handle or NULL (returns 0).
size_t pf_generator_latent_dim(const struct PfGenerator *gen);

// Render `G(w)`.
// `w` must point to `len` readable doubles; `out` must be writable.
int32_t pf_generator_render(const struct PfGenerator *gen,
                            const double *w,
                            size_t len,
                            struct PfImage **out);

// `gen` must come from this library and not be used afterwards.
void pf_generator_free(struct PfGenerator *gen);

// Untrained toy models.
// `out` must be writable.
int32_t pf_inpainter_toy(struct PfInpainter **out);

// Models restored from a training checkpoint.
// `checkpoint` must be a NUL-terminated string; `out` must be writable.
int32_t pf_inpainter_load(const char *checkpoint, struct PfInpainter **out);

// `inpainter` must come from this library and not be used afterwards.
void pf_inpainter_free(struct PfInpainter *inpainter);

struct PfInversionParams pf_inversion_params_default(void);

// Mask the periocular region of `input`, encode, map, render and refine.
// Handles must be live; `params` may be NULL for defaults; `out` must be
// writable.
int32_t pf_inpaint(const struct PfInpainter *inpainter,
                   const struct PfImage *input,
                   const struct PfInversionParams *params,
                   struct PfInpaintResult **out);

// A new image handle holding a copy of the requested output.
// `result` must be live; `out` must be writable.
int32_t pf_result_image(const struct PfInpaintResult *result,
                        enum PfResultImage which,
                        struct PfImage **out);

// Number of recorded objective values (initial value included).
// `result` must be a live handle or NULL (returns 0).
size_t pf_result_trace_len(const struct PfInpaintResult *result);

// `buf` must point to `len` writable doubles.
int32_t pf_result_copy_trace(const struct PfInpaintResult *result, double *buf, size_t len);

// Copy the refined latent `w*` (the generator's latent dimension).
// `buf` must point to `len` writable doubles.
int32_t pf_result_copy_w(const struct PfInpaintResult *result, double *buf, size_t len);

// Lowest objective value reached; NaN for a NULL handle.
// `result` must be a live handle or NULL.
double pf_result_best_loss(const struct PfInpaintResult *result);

// `result` must come from this library and not be used afterwards.
void pf_result_free(struct PfInpaintResult *result);

// Handles must be live (`gt` may be NULL for `Tv`); `out` must be writable.
int32_t pf_metric(enum PfMetric metric,
                  const struct PfImage *gt,
                  const struct PfImage *output,
                  double *out);

// Weighted training total under the default weights.
// `components` must be readable; `out` must be writable.
int32_t pf_loss_total(const struct PfLossComponents *components, double *out);

// Inversion objective from its perceptual and identity terms under the
// default weights.
double pf_loss_opt(double perc, double id);

// Equal error rate of cosine similarity scores over `n_thresholds` evenly
// spaced thresholds in `[-1, 1]`.
// The score arrays must hold the stated number of doubles; `eer` and
// `eer_threshold` must be writable.
int32_t pf_equal_error_rate(const double *genuine,
                            size_t n_genuine,
                            const double *impostor,
                            size_t n_impostor,
                            size_t n_thresholds,
                            double *eer,
                            double *eer_threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERIFACE_H */
