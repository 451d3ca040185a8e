#ifndef M2SFORMER_H
#define M2SFORMER_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum M2sStatus {
  M2S_STATUS_OK = 0,
  M2S_STATUS_NULL_POINTER = 1,
  M2S_STATUS_INVALID_ARGUMENT = 2,
  M2S_STATUS_DIMENSION = 3,
  M2S_STATUS_IO = 4,
  M2S_STATUS_CHECKPOINT = 5,
  M2S_STATUS_RUNTIME = 6,
  M2S_STATUS_PANIC = 7,
} M2sStatus;

typedef enum M2sLabel {
  M2S_LABEL_HARD = 0,
  M2S_LABEL_EASY = 1,
} M2sLabel;

typedef enum M2sPreset {
  M2S_PRESET_TOY = 0,
  M2S_PRESET_FULL = 1,
} M2sPreset;

typedef enum M2sCurvatureMode {
  M2S_CURVATURE_MODE_AS_WRITTEN = 0,
  M2S_CURVATURE_MODE_STANDARD = 1,
} M2sCurvatureMode;

/*
 Opaque model handle.
 */
typedef struct M2sModel M2sModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until the
 next call into this library from the same thread.
 */
const char *m2s_last_error(void);

/*
 Learnable parameter count of a preset (`M2sPreset` value).

 # Safety
 `out` must be a valid pointer to writable memory.
 */
enum M2sStatus m2s_count_params(int32_t preset, uint64_t *out);

/*
 Freshly initialized model for a preset (`M2sPreset` value) and seed.

 # Safety
 `out` must be a valid pointer to writable memory.
 */
enum M2sStatus m2s_model_new(int32_t preset, uint64_t seed, struct M2sModel **out);

/*
 Load a model from a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum M2sStatus m2s_model_load(const char *path, struct M2sModel **out);

/*
 Write a model to a checkpoint file.

 # Safety
 `model` must come from this library; `path` must be NUL-terminated.
 */
enum M2sStatus m2s_model_save(const struct M2sModel *model, const char *path);

/*
 Release a model. Null is ignored.

 # Safety
 `model` must come from this library and must not be used afterwards.
 */
void m2s_model_free(struct M2sModel *model);

/*
 Parameter count of a loaded model.

 # Safety
 `model` must come from this library and `out` must be valid.
 */
enum M2sStatus m2s_model_parameter_count(const struct M2sModel *model, uint64_t *out);

/*
 Run the model on a planar RGB image (`3 * height * width` floats in
 `[0, 1]`, channel-major). Writes `height * width` probabilities to
 `mask_out`, and the difficulty score and label when those pointers are
 non-null. Height and width must be multiples of 32.

 # Safety
 Buffers must hold the stated number of elements.
 */
enum M2sStatus m2s_model_predict(const struct M2sModel *model,
                                 const float *image,
                                 size_t height,
                                 size_t width,
                                 float *mask_out,
                                 double *score_out,
                                 enum M2sLabel *label_out);

/*
 Difficulty score and label of a row-major `height * width` prior map.
 `mode` is an `M2sCurvatureMode` value.

 # Safety
 `prior` must hold `height * width` values; outputs must be valid.
 */
enum M2sStatus m2s_difficulty_score(const double *prior,
                                    size_t height,
                                    size_t width,
                                    double threshold,
                                    int32_t mode,
                                    double *score_out,
                                    enum M2sLabel *label_out);

/*
 Dice and IoU between two binary masks of `len` bytes (nonzero = set).
 Either output pointer may be null.

 # Safety
 `pred` and `target` must hold `len` bytes.
 */
enum M2sStatus m2s_dice_iou(const uint8_t *pred,
                            const uint8_t *target,
                            size_t len,
                            double *dsc_out,
                            double *iou_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* M2SFORMER_H */
