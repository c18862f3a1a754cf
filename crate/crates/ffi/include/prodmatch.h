#ifndef PRODMATCH_H
#define PRODMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PmStatus {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_ARGUMENT = 1,
  PM_STATUS_INVALID_UTF8 = 2,
  PM_STATUS_INVALID_ARGUMENT = 3,
  PM_STATUS_IO = 4,
  PM_STATUS_FORMAT = 5,
  PM_STATUS_DIMENSION = 6,
  PM_STATUS_NOT_FOUND = 7,
  PM_STATUS_UNDEFINED = 8,
  PM_STATUS_BUFFER_TOO_SMALL = 9,
  PM_STATUS_PANIC = 99,
} PmStatus;

/**
 * Offer corpus loaded from JSONL (with its `.emb` sidecar when present).
 */
typedef struct PmCorpus PmCorpus;

/**
 * Trained projection head.
 */
typedef struct PmHead PmHead;

/**
 * Brand-blocked retrieval index.
 */
typedef struct PmIndex PmIndex;

/**
 * One retrieved neighbour.
 */
typedef struct PmCandidate {
  /**
   * Position in the index; see `pm_index_offer_id`.
   */
  size_t position;
  /**
   * Cosine distance `1 - cos`.
   */
  double distance;
  /**
   * 1 when `distance <= distance_threshold`.
   */
  int accepted;
} PmCandidate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *pm_last_error(void);

/**
 * # Safety
 * `path` must be a valid C string; `out` a valid pointer.
 */
enum PmStatus pm_corpus_load(const char *path, struct PmCorpus **out);

/**
 * Number of offers; 0 for null.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t pm_corpus_len(const struct PmCorpus *corpus);

/**
 * # Safety
 * `corpus` must be null or a handle not freed before.
 */
void pm_corpus_free(struct PmCorpus *corpus);

/**
 * # Safety
 * `path` must be a valid C string; `out` a valid pointer.
 */
enum PmStatus pm_head_load(const char *path, struct PmHead **out);

/**
 * Embedding dimension; 0 for null.
 *
 * # Safety
 * `head` must be null or a live handle.
 */
size_t pm_head_output_dim(const struct PmHead *head);

/**
 * # Safety
 * `head` must be null or a handle not freed before.
 */
void pm_head_free(struct PmHead *head);

/**
 * Writes the unit embedding of offer `offer` of `corpus` to `out[0..out_len]`;
 * `out_len` must be at least `pm_head_output_dim(head)`.
 *
 * # Safety
 * Handles must be live; `out` must point to `out_len` writable doubles.
 */
enum PmStatus pm_embed_offer(const struct PmHead *head,
                             const struct PmCorpus *corpus,
                             size_t offer,
                             double *out,
                             size_t out_len);

/**
 * Embeds every offer of `corpus` with `head` and indexes them.
 *
 * # Safety
 * Handles must be live; `out` a valid pointer.
 */
enum PmStatus pm_index_build(const struct PmHead *head,
                             const struct PmCorpus *corpus,
                             struct PmIndex **out);

/**
 * Loads an index file written by `prodmatch index`.
 *
 * # Safety
 * `path` must be a valid C string; `out` a valid pointer.
 */
enum PmStatus pm_index_load(const char *path, struct PmIndex **out);

/**
 * Number of indexed offers; 0 for null.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t pm_index_len(const struct PmIndex *index);

/**
 * Offer id at `position`, or null when out of range. Owned by the index.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
const char *pm_index_offer_id(const struct PmIndex *index, size_t position);

/**
 * Brand-blocked exact kNN for one unit query vector. Writes up to `capacity`
 * candidates, nearest first, and their count to `written`.
 *
 * # Safety
 * `index` must be live; `brand` a valid C string; `query` must point to `dim`
 * doubles, `out` to `capacity` writable candidates.
 */
enum PmStatus pm_index_query(const struct PmIndex *index,
                             const char *brand,
                             const double *query,
                             size_t dim,
                             size_t k,
                             double brand_threshold,
                             double distance_threshold,
                             struct PmCandidate *out,
                             size_t capacity,
                             size_t *written);

/**
 * # Safety
 * `index` must be null or a handle not freed before.
 */
void pm_index_free(struct PmIndex *index);

/**
 * Normalized text feature of a brand and title; free with `pm_string_free`.
 *
 * # Safety
 * `brand` and `title` must be valid C strings; `out` a valid pointer.
 */
enum PmStatus pm_normalize_text(const char *brand, const char *title, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not freed before.
 */
void pm_string_free(char *s);

/**
 * Jaro-Winkler similarity in `[0, 1]`.
 *
 * # Safety
 * `a` and `b` must be valid C strings; `out` a valid pointer.
 */
enum PmStatus pm_jaro_winkler(const char *a, const char *b, double *out);

/**
 * `TPR / FPR`. When FPR is 0 and TPR positive, `*infinite` is set to 1 and
 * `*out` to `INFINITY`.
 *
 * # Safety
 * `out` and `infinite` must be valid pointers.
 */
enum PmStatus pm_lr_plus(double tpr, double fpr, double *out, int *infinite);

/**
 * `1 / (1 + (1/p_model - 1) / lr_plus)`; pass `lr_infinite = 1` for an
 * infinite ratio (then `lr_plus` is ignored).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PmStatus pm_predict_hitl_precision(double p_model,
                                        double lr_plus,
                                        int lr_infinite,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRODMATCH_H */
