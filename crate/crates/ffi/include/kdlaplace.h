#ifndef KDLAPLACE_H
#define KDLAPLACE_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  KD_STATUS_OK = 0,
  KD_STATUS_NULL_POINTER = 1,
  KD_STATUS_INVALID_ARGUMENT = 2,
  KD_STATUS_IO = 3,
  KD_STATUS_NUMERICAL = 4,
  KD_STATUS_DIM_MISMATCH = 5,
  KD_STATUS_PARSE = 6,
  KD_STATUS_BUFFER_TOO_SMALL = 7,
  KD_STATUS_PANIC = 8,
} KdStatus;

typedef enum {
  KD_STRATEGY_UNIFORM = 0,
  KD_STRATEGY_MARGIN = 1,
  KD_STRATEGY_LAPLACE = 2,
} KdStrategy;

/**
 * Opaque list of examples.
 */
typedef struct KdDataset KdDataset;

/**
 * Opaque network plus the aux head and exit depth a student carries.
 */
typedef struct KdModel KdModel;

/**
 * Opaque Laplace posterior over a student's aux head.
 */
typedef struct KdPosterior KdPosterior;

/**
 * Mirror of the generator spec with C layout.
 */
typedef struct {
  size_t n;
  size_t num_classes;
  size_t core_dim;
  size_t spurious_dim;
  double rho;
  double core_separation;
  double spurious_separation;
  double noise_std;
  uint64_t seed;
} KdGeneratorSpec;

typedef struct {
  double average_accuracy;
  double worst_group_accuracy;
  size_t worst_group_id;
  size_t total;
} KdGroupSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *kd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kd_version(void);

/**
 * Releases a string returned by this library.
 */
void kd_string_free(char *s);

KdStatus kd_generator_spec_default(KdGeneratorSpec *out);

KdStatus kd_dataset_generate(const KdGeneratorSpec *spec, KdDataset **out);

/**
 * Group-balanced draw with `per_group` examples in every (label, attribute) cell.
 */
KdStatus kd_dataset_generate_balanced(const KdGeneratorSpec *spec,
                                      size_t per_group,
                                      KdDataset **out);

KdStatus kd_dataset_load(const char *path, KdDataset **out);

KdStatus kd_dataset_save(const KdDataset *ds, const char *path);

/**
 * Number of examples; 0 for a NULL handle.
 */
size_t kd_dataset_len(const KdDataset *ds);

/**
 * Feature width; 0 for a NULL or empty dataset.
 */
size_t kd_dataset_feature_dim(const KdDataset *ds);

/**
 * Copies example `index` into caller buffers. Any of `label`, `group` may be NULL.
 */
KdStatus kd_dataset_example(const KdDataset *ds,
                            size_t index,
                            double *features,
                            size_t features_len,
                            size_t *label,
                            size_t *group);

void kd_dataset_free(KdDataset *ds);

KdStatus kd_model_load(const char *path, KdModel **out);

KdStatus kd_model_save(const KdModel *model, const char *path);

/**
 * Trains a teacher on the whole dataset. `config_toml` may be NULL for defaults.
 */
KdStatus kd_train_teacher(const KdDataset *ds, const char *config_toml, KdModel **out);

/**
 * Distills a student on the whole dataset. `strategy` is a [`KdStrategy`]
 * value and overrides the config's.
 */
KdStatus kd_distill(const KdModel *teacher,
                    const KdDataset *ds,
                    int32_t strategy,
                    const char *config_toml,
                    KdModel **out);

size_t kd_model_input_dim(const KdModel *model);

size_t kd_model_num_classes(const KdModel *model);

/**
 * Whether the model carries an aux head (students trained with a
 * non-uniform strategy do).
 */
bool kd_model_has_aux(const KdModel *model);

/**
 * Writes `num_classes` logits for one input.
 */
KdStatus kd_model_logits(const KdModel *model,
                         const double *x,
                         size_t x_len,
                         double *out,
                         size_t out_len);

/**
 * Softmax probabilities at temperature `temp` for one input.
 */
KdStatus kd_model_predict(const KdModel *model,
                          const double *x,
                          size_t x_len,
                          double temp,
                          double *out,
                          size_t out_len);

KdStatus kd_evaluate(const KdModel *model, const KdDataset *ds, KdGroupSummary *out);

void kd_model_free(KdModel *model);

/**
 * Fits the covariance of the student's exit features over `ds` around its
 * aux head. The model must carry an aux head.
 */
KdStatus kd_posterior_fit(const KdModel *model, const KdDataset *ds, KdPosterior **out);

/**
 * Width of the feature vectors the posterior expects.
 */
size_t kd_posterior_feature_dim(const KdPosterior *post);

/**
 * Logit mean (`num_classes` values) and isotropic variance for features `phi`.
 */
KdStatus kd_posterior_predictive(const KdPosterior *post,
                                 const double *phi,
                                 size_t phi_len,
                                 double *mu,
                                 size_t mu_len,
                                 double *sigma2);

/**
 * Entropy (nats) of the Monte-Carlo averaged softmax at temperature 1,
 * sampled from a stream seeded with `seed`.
 */
KdStatus kd_posterior_entropy(const KdPosterior *post,
                              const double *phi,
                              size_t phi_len,
                              size_t samples,
                              uint64_t seed,
                              double *entropy);

/**
 * JSON diagnostics (head, covariance, ridge, eigenvalue summary). Free the
 * string with [`kd_string_free`].
 */
KdStatus kd_posterior_dump_json(const KdPosterior *post, char **out);

void kd_posterior_free(KdPosterior *post);

/**
 * `exp(beta·H^alpha)` clamped to `[1, cap]`.
 */
KdStatus kd_entropy_weight(double h, double beta, double alpha, double cap, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDLAPLACE_H */
