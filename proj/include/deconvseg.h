/* deconvseg: encoder-decoder semantic segmentation engine.
 *
 * C interface over the engine: opaque handles, status codes, thread-local
 * error text. All functions return DSEG_OK on success; on failure the
 * message is available via dseg_last_error() until the next call on the
 * same thread.
 */
#ifndef DECONVSEG_H
#define DECONVSEG_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  DSEG_OK = 0,
  DSEG_ERR = 1,   /* domain failure (io, shapes, training, ...) */
  DSEG_USAGE = 2  /* bad arguments or configuration */
} dseg_status;

const char* dseg_version(void);

/* Message for the most recent failure on this thread; never NULL. */
const char* dseg_last_error(void);

/* Worker threads for internal kernels. n < 1 restores the default
 * (DSEG_THREADS env var if set, else all cores). Results never depend on
 * the thread count. */
void dseg_set_threads(int n);

/* ---- models ---------------------------------------------------------- */

typedef struct dseg_model dseg_model;

dseg_status dseg_model_load(const char* path, dseg_model** out);
dseg_status dseg_model_save(const dseg_model* model, const char* path);
void dseg_model_free(dseg_model* model);
int64_t dseg_model_param_count(const dseg_model* model);

/* ---- pipeline commands ------------------------------------------------ */

/* Writes a synthetic dataset (images/, masks/, manifest.json) under out_dir.
 * out_dir may be NULL to use the config's data directory. */
dseg_status dseg_synth(const char* config_path, const char* out_dir);

/* Two-stage training per the config. stage: 0 = both stages, 1 or 2 = that
 * stage only. resume_checkpoint may be NULL. */
dseg_status dseg_train(const char* config_path, int stage,
                       const char* resume_checkpoint);

/* Segment one image. proposals_path may be NULL (grid fallback); mode may be
 * NULL to take the config's ("max" or "sum"); ensemble != 0 averages with the
 * FCN baseline's probabilities. Writes label.png, overlay.png, probs.dsegc
 * and provenance.json under out_dir. */
dseg_status dseg_predict(const char* config_path, const char* image_path,
                         const char* proposals_path, const char* mode, int ensemble,
                         const char* out_dir);

/* Mean IoU / pixel accuracy of predicted index masks against ground truth;
 * masks pair by file stem. Writes a JSON report and appends a CSV row. */
dseg_status dseg_eval(const char* pred_dir, const char* gt_dir, int64_t num_classes,
                      const char* report_path);

/* Layer activation images (most representative channel per layer).
 * layers_csv is a comma-separated list of layer names. */
dseg_status dseg_dump_activations(const char* config_path, const char* image_path,
                                  const char* layers_csv, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* DECONVSEG_H */
