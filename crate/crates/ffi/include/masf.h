#ifndef MASF_H
#define MASF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MasfStatus {
  MASF_STATUS_OK = 0,
  MASF_STATUS_NULL_POINTER = 1,
  MASF_STATUS_CONFIG = 2,
  MASF_STATUS_DATA = 3,
  MASF_STATUS_NUMERICAL = 4,
  MASF_STATUS_INVALID_ARGUMENT = 5,
  MASF_STATUS_PANIC = 6,
} MasfStatus;

/**
 * Opaque list of detections.
 */
typedef struct MasfDetections MasfDetections;

/**
 * Opaque model handle.
 */
typedef struct MasfModel MasfModel;

/**
 * One detection in the pixel coordinates of the input image.
 */
typedef struct MasfDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  double score;
  uint32_t class_id;
} MasfDetection;

typedef struct MasfEvalSummary {
  double map50;
  double map5095;
  double precision;
  double recall;
  uint64_t images;
} MasfEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *masf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *masf_version(void);

/**
 * Builds a freshly initialised model from a JSON config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum MasfStatus masf_model_from_config_json(const char *config_json,
                                            uint64_t seed,
                                            struct MasfModel **out);

/**
 * Loads a checkpoint written by training (`<name>.json` next to `<name>.bin`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MasfStatus masf_model_load_checkpoint(const char *path, struct MasfModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void masf_model_free(struct MasfModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MasfStatus masf_model_param_count(const struct MasfModel *model, uint64_t *out);

/**
 * GFLOPs of one forward pass at `image_size`; 0 means the model's own size.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MasfStatus masf_model_gflops(const struct MasfModel *model, uint32_t image_size, double *out);

/**
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum MasfStatus masf_model_input_info(const struct MasfModel *model,
                                      uint32_t *image_size,
                                      uint32_t *num_classes);

/**
 * Runs detection on one planar RGB image (`3·height·width` doubles in
 * [0,1], channel-major). The image is letterboxed to the model size and
 * the boxes are mapped back to its pixel grid.
 *
 * # Safety
 * `pixels` must point to `3·height·width` readable doubles; `out` must be
 * writable.
 */
enum MasfStatus masf_detect(const struct MasfModel *model,
                            const double *pixels,
                            size_t height,
                            size_t width,
                            double score_threshold,
                            double nms_iou,
                            struct MasfDetections **out);

/**
 * Number of detections; 0 for NULL.
 *
 * # Safety
 * `dets` must be NULL or a live handle.
 */
size_t masf_detections_len(const struct MasfDetections *dets);

/**
 * Copies detection `index` (score-descending order) into `out`.
 *
 * # Safety
 * `dets` must be a live handle; `out` must be writable.
 */
enum MasfStatus masf_detections_get(const struct MasfDetections *dets,
                                    size_t index,
                                    struct MasfDetection *out);

/**
 * Releases a detection list. NULL is ignored.
 *
 * # Safety
 * `dets` must come from [`masf_detect`] and not be used afterwards.
 */
void masf_detections_free(struct MasfDetections *dets);

/**
 * Evaluates a model on a manifest. `split` and `format` may be NULL (all
 * items, manifest's own format); `format` is `"visdrone"` or `"internal"`.
 *
 * # Safety
 * String arguments must be NUL-terminated (or NULL where allowed); `out`
 * must be writable.
 */
enum MasfStatus masf_evaluate_manifest(const struct MasfModel *model,
                                       const char *manifest_path,
                                       const char *split,
                                       const char *format,
                                       struct MasfEvalSummary *out);

/**
 * Cosine-annealed learning rate at `step` of `total_steps`, decaying from
 * `lr0` to `lr0·final_fraction`. Returns NaN for invalid arguments.
 */
double masf_cosine_lr(uint64_t step, uint64_t total_steps, double lr0, double final_fraction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASF_H */
