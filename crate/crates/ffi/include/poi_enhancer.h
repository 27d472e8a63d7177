#ifndef POI_ENHANCER_H
#define POI_ENHANCER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum PeStatus {
  PE_STATUS_OK = 0,
  PE_STATUS_NULL_ARGUMENT = 1,
  PE_STATUS_INVALID_INPUT = 2,
  PE_STATUS_IO = 3,
  PE_STATUS_PARSE = 4,
  PE_STATUS_CONFIG = 5,
  PE_STATUS_SHAPE = 6,
  PE_STATUS_NUMERIC = 7,
  PE_STATUS_CORRUPT = 8,
  PE_STATUS_BACKEND = 9,
  PE_STATUS_PANIC = 10,
} PeStatus;

// A POI embedding table.
typedef struct PeEmbeddings PeEmbeddings;

// A trained enhancer.
typedef struct PeModel PeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *pe_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pe_version(void);

// Loads a checkpoint written by the training command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum PeStatus pe_model_load(const char *path, struct PeModel **out);

// Embedding width `d` and feature width `D` of a model.
//
// # Safety
// `model` must come from [`pe_model_load`]; `d` and `feature_dim` writable.
enum PeStatus pe_model_dims(const struct PeModel *model, size_t *d, size_t *feature_dim);

// Runs the model on one batch of `n` rows. `ev`, `ea`, `es` are `n×D`,
// `e_poi` and `out` are `n×d`, all row-major.
//
// # Safety
// All arrays must hold the stated number of doubles.
enum PeStatus pe_model_forward(const struct PeModel *model,
                               const double *ev,
                               const double *ea,
                               const double *es,
                               const double *e_poi,
                               size_t n,
                               double *out);

// Frees a model; null is ignored.
//
// # Safety
// `model` must come from [`pe_model_load`] and not be used afterwards.
void pe_model_free(struct PeModel *model);

// Loads a whitespace-separated embedding file (`poi_id v1 … vd` per line).
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum PeStatus pe_embeddings_load(const char *path, struct PeEmbeddings **out);

// Writes an embedding table in the same text format.
//
// # Safety
// `emb` must be a live handle and `path` a NUL-terminated string.
enum PeStatus pe_embeddings_save(const struct PeEmbeddings *emb, const char *path);

// Number of rows and their width.
//
// # Safety
// `emb` must be a live handle; `len` and `dim` writable.
enum PeStatus pe_embeddings_shape(const struct PeEmbeddings *emb, size_t *len, size_t *dim);

// Copies the vector of `poi_id` into `out`, which holds `len` doubles.
//
// # Safety
// `emb` must be a live handle and `out` hold `len` doubles.
enum PeStatus pe_embeddings_get(const struct PeEmbeddings *emb,
                                uint32_t poi_id,
                                double *out,
                                size_t len);

// Euclidean distance between two POIs' embeddings.
//
// # Safety
// `emb` must be a live handle and `out` writable.
enum PeStatus pe_embeddings_distance(const struct PeEmbeddings *emb,
                                     uint32_t a,
                                     uint32_t b,
                                     double *out);

// Frees an embedding table; null is ignored.
//
// # Safety
// `emb` must come from this library and not be used afterwards.
void pe_embeddings_free(struct PeEmbeddings *emb);

// Enhances `base` with the features stored in `features_dir`.
//
// # Safety
// Handles must be live, `features_dir` NUL-terminated and `out` writable.
enum PeStatus pe_enhance(const struct PeModel *model,
                         const struct PeEmbeddings *base,
                         const char *features_dir,
                         size_t chunk_size,
                         bool skip_missing,
                         struct PeEmbeddings **out);

// InfoNCE of an `m×d` batch (anchor, positive, negatives) at temperature `gamma`.
//
// # Safety
// `fused` must hold `m*d` doubles and `out` be writable.
enum PeStatus pe_infonce_loss(const double *fused, size_t m, size_t d, double gamma, double *out);

// Mean absolute difference of the pairwise cosine matrices of two `m×d` batches.
//
// # Safety
// `fused` and `base` must hold `m*d` doubles and `out` be writable.
enum PeStatus pe_similarity_loss(const double *fused,
                                 const double *base,
                                 size_t m,
                                 size_t d,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POI_ENHANCER_H */
