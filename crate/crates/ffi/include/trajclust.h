#ifndef TRAJCLUST_H
#define TRAJCLUST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every call.
typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_DATA_ERROR = 3,
  TC_STATUS_METHOD_ERROR = 4,
  TC_STATUS_BUFFER_TOO_SMALL = 5,
  TC_STATUS_PANIC = 6,
} TcStatus;

// Clustering method selector.
typedef enum TcMethod {
  TC_METHOD_PGKMEANS = 0,
  TC_METHOD_CAAE = 1,
  TC_METHOD_RETURN_KMEANS = 2,
  TC_METHOD_LATENT_KMEANS = 3,
} TcMethod;

// Opaque trajectory dataset.
typedef struct TcDataset TcDataset;

// Opaque conflict graph.
typedef struct TcGraph TcGraph;

// Clustering settings. `k_star == 0` disables merging.
typedef struct TcClusterParams {
  size_t k;
  size_t k_star;
  size_t best_of;
  size_t max_iters;
  size_t epochs;
  double alpha;
} TcClusterParams;

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call on the same thread.
const char *tc_last_error(void);

// Library version as a static NUL-terminated string.
const char *tc_version(void);

// Rolls out every expert of `env` for `episodes` episodes each.
//
// # Safety
// `env` must be a NUL-terminated string and `out` a writable pointer.
enum TcStatus tc_dataset_generate(const char *env,
                                  size_t episodes,
                                  uint64_t seed,
                                  struct TcDataset **out);

// Reads a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum TcStatus tc_dataset_load(const char *path, struct TcDataset **out);

// Writes a dataset file.
//
// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum TcStatus tc_dataset_save(const struct TcDataset *ds, const char *path);

// Number of trajectories.
//
// # Safety
// `ds` must be a live handle and `out` a writable pointer.
enum TcStatus tc_dataset_len(const struct TcDataset *ds, size_t *out);

// Copies the ground-truth labels into `buf`, which must hold at least
// `tc_dataset_len` entries.
//
// # Safety
// `ds` must be a live handle and `buf` must point to `len` writable entries.
enum TcStatus tc_dataset_labels(const struct TcDataset *ds, size_t *buf, size_t len);

// Releases a dataset. Null is ignored.
//
// # Safety
// `ds` must be null or a handle not yet freed.
void tc_dataset_free(struct TcDataset *ds);

// Defaults: one run, 50 iterations, 50 epochs, attraction weight 1.
struct TcClusterParams tc_cluster_params_default(size_t k);

// Clusters the trajectories of `ds` (labels are never read) and writes one
// cluster id per trajectory into `assignment`. `final_value` may be null;
// otherwise it receives the final objective or training loss, or NaN when
// the method has none.
//
// # Safety
// `ds` and `params` must be valid, `assignment` must point to `len`
// writable entries and `final_value` must be null or writable.
enum TcStatus tc_cluster(const struct TcDataset *ds,
                         enum TcMethod method,
                         const struct TcClusterParams *params,
                         uint64_t seed,
                         size_t *assignment,
                         size_t len,
                         double *final_value);

// Normalized mutual information of two labelings of length `n`.
//
// # Safety
// `pred` and `truth` must point to `n` readable entries; `out` must be
// writable.
enum TcStatus tc_nmi(const size_t *pred, const size_t *truth, size_t n, double *out);

// Builds the conflict graph of a dataset.
//
// # Safety
// `ds` must be a live handle and `out` a writable pointer.
enum TcStatus tc_graph_build(const struct TcDataset *ds, struct TcGraph **out);

// Node and edge counts; either output may be null.
//
// # Safety
// `g` must be a live handle; outputs must be null or writable.
enum TcStatus tc_graph_size(const struct TcGraph *g, size_t *nodes, size_t *edges);

// Checks that no conflicting pair shares a cluster. On a violation
// `valid` is false and `u`, `v` name the witness pair.
//
// # Safety
// `g` must be a live handle, `assignment` must point to `n` readable
// entries and `valid`, `u`, `v` must be writable.
enum TcStatus tc_graph_check(const struct TcGraph *g,
                             const size_t *assignment,
                             size_t n,
                             bool *valid,
                             size_t *u,
                             size_t *v);

// Releases a graph. Null is ignored.
//
// # Safety
// `g` must be null or a handle not yet freed.
void tc_graph_free(struct TcGraph *g);

#endif  /* TRAJCLUST_H */
