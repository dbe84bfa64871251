#ifndef PHASEALIGN_H
#define PHASEALIGN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call.
 */
typedef enum {
  PA_STATUS_OK = 0,
  PA_STATUS_NULL_POINTER = 1,
  PA_STATUS_INVALID_ARGUMENT = 2,
  PA_STATUS_IO = 3,
  PA_STATUS_FORMAT = 4,
  PA_STATUS_GENERATION = 5,
  PA_STATUS_MODEL = 6,
  PA_STATUS_OUT_OF_RANGE = 7,
  PA_STATUS_BUFFER_TOO_SMALL = 8,
  /**
   * The metric is undefined for the input, e.g. AP without ground truth.
   */
  PA_STATUS_UNDEFINED = 9,
  PA_STATUS_PANIC = 10,
} PaStatus;

typedef enum {
  PA_OVERLAP_IOU = 0,
  /**
   * Intersection over the predicted box.
   */
  PA_OVERLAP_IOBB_PRED = 1,
  /**
   * Intersection over the ground-truth box.
   */
  PA_OVERLAP_IOBB_GT = 2,
} PaOverlap;

typedef struct PaDataset PaDataset;

typedef struct PaDetections PaDetections;

typedef struct PaDetector PaDetector;

typedef struct PaSample PaSample;

/**
 * Axis-aligned box in center form, pixel units.
 */
typedef struct {
  double cx;
  double cy;
  double w;
  double h;
} PaBox;

typedef struct {
  PaBox bbox;
  double score;
} PaDetection;

/**
 * A detection or ground-truth box tagged with its image index.
 */
typedef struct {
  size_t image;
  PaBox bbox;
  /**
   * Ignored for ground truth.
   */
  double score;
} PaImageBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pa_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * NUL-terminated) and returns the buffer size needed for the full message.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t pa_last_error(char *buf, size_t cap);

/**
 * Renders one phantom. `spec_json` may be null for the default spec;
 * `tier` is the misalignment magnitude in pixels (0 for aligned).
 *
 * # Safety
 * `spec_json` must be null or a NUL-terminated string; `out` must be valid.
 */
PaStatus pa_sample_new(const char *spec_json, double tier, uint64_t seed, PaSample **out);

/**
 * # Safety
 * `sample` must be null or a handle from this library, freed once.
 */
void pa_sample_free(PaSample *sample);

/**
 * Image shape: channels (phases times slices, phase-major), height, width.
 *
 * # Safety
 * Pointers must be valid.
 */
PaStatus pa_sample_shape(const PaSample *sample, size_t *channels, size_t *height, size_t *width);

/**
 * Copies the `[C, H, W]` image, intensities in `[0, 1]`.
 *
 * # Safety
 * `buf` must be valid for `cap` floats.
 */
PaStatus pa_sample_image(const PaSample *sample, float *buf, size_t cap);

/**
 * Number of ground-truth lesion boxes, or 0 for a null handle.
 *
 * # Safety
 * `sample` must be null or a live handle.
 */
size_t pa_sample_box_count(const PaSample *sample);

/**
 * # Safety
 * `buf` must be valid for `cap` boxes.
 */
PaStatus pa_sample_boxes(const PaSample *sample, PaBox *buf, size_t cap);

/**
 * Phase in whose frame the boxes are annotated.
 *
 * # Safety
 * Pointers must be valid.
 */
PaStatus pa_sample_annotation_phase(const PaSample *sample, size_t *phase);

/**
 * Opens a dataset container for random access.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
PaStatus pa_dataset_open(const char *path, PaDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from this library, freed once.
 */
void pa_dataset_free(PaDataset *dataset);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t pa_dataset_len(const PaDataset *dataset);

/**
 * Reads sample `index` into a new handle.
 *
 * # Safety
 * Pointers must be valid.
 */
PaStatus pa_dataset_get(PaDataset *dataset, size_t index, PaSample **out);

/**
 * Loads a trained checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
PaStatus pa_detector_load(const char *path, PaDetector **out);

/**
 * # Safety
 * `detector` must be null or a handle from this library, freed once.
 */
void pa_detector_free(PaDetector *detector);

/**
 * Runs the detector on one sample; results are after the confidence
 * filter and non-maximum suppression, highest score first.
 *
 * # Safety
 * Pointers must be valid.
 */
PaStatus pa_detector_detect(const PaDetector *detector, const PaSample *sample, PaDetections **out);

/**
 * # Safety
 * `dets` must be null or a handle from this library, freed once.
 */
void pa_detections_free(PaDetections *dets);

/**
 * # Safety
 * `dets` must be null or a live handle.
 */
size_t pa_detections_count(const PaDetections *dets);

/**
 * # Safety
 * `buf` must be valid for `cap` detections.
 */
PaStatus pa_detections_copy(const PaDetections *dets, PaDetection *buf, size_t cap);

double pa_iou(PaBox a, PaBox b);

/**
 * Intersection over the area of `pred`, or of `gt` when `over_gt` is set.
 */
double pa_iobb(PaBox pred, PaBox gt, bool over_gt);

/**
 * Dice of two binary masks of `len` bytes (nonzero is foreground).
 *
 * # Safety
 * `a` and `b` must be valid for `len` bytes.
 */
PaStatus pa_dice(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/**
 * Average precision over `images` images at overlap threshold `thr`.
 * Returns `Undefined` (and NaN) when there is no ground truth.
 *
 * # Safety
 * `preds` and `gts` must be valid for their counts; `out` must be valid.
 */
PaStatus pa_average_precision(const PaImageBox *preds,
                              size_t n_preds,
                              const PaImageBox *gts,
                              size_t n_gts,
                              size_t images,
                              PaOverlap overlap,
                              double thr,
                              double *out);

/**
 * `1 - unregistered / registered`. Returns `Undefined` (and NaN) when
 * `registered` is not positive.
 *
 * # Safety
 * `out` must be valid.
 */
PaStatus pa_sensitivity(double unregistered, double registered, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHASEALIGN_H */
