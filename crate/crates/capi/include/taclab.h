/* C interface for the taclab diagnostics layer.
 *
 * All fallible functions return a tlb_status code and write results through
 * out-pointers. Handles are opaque; free them with the matching _free
 * function. Error messages are per-thread: after a non-zero return,
 * tlb_last_error() gives a human-readable description valid until the next
 * failing call on the same thread.
 */

#ifndef TACLAB_H
#define TACLAB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. */
enum {
    TLB_OK = 0,          /* success */
    TLB_ERR_INVALID = 1, /* bad argument (null pointer, malformed data) */
    TLB_ERR_FORMAT = 2,  /* file exists but is not a valid .attn file */
    TLB_ERR_IO = 3,      /* filesystem error */
    TLB_ERR_PANIC = 4    /* internal error */
};

/* Classification codes returned by tlb_attn_classify. */
enum {
    TLB_CLEAN = 0,
    TLB_DISCONTINUOUS = 1,
    TLB_INCOMPLETE = 2,
    TLB_OVERESTIMATED = 3
};

/* Opaque attention-matrix handle. */
typedef struct TlbAttention TlbAttention;

/* Static version string, e.g. "0.1.0". */
const char *tlb_version(void);

/* Message for this thread's last error; valid until the next failing call
 * on the same thread. Never null. */
const char *tlb_last_error(void);

/* Loads a binary .attn file. On success writes a new handle to *out. */
int tlb_attn_load(const char *path, TlbAttention **out);

/* Builds a handle from a row-major steps x positions weight buffer. Each
 * row must be a probability distribution (non-negative, summing to 1). */
int tlb_attn_from_data(const double *data, size_t steps, size_t positions,
                       TlbAttention **out);

/* Frees a handle. Null is a no-op. */
void tlb_attn_free(TlbAttention *m);

/* Matrix dimensions. Return 0 for a null handle. */
size_t tlb_attn_steps(const TlbAttention *m);
size_t tlb_attn_positions(const TlbAttention *m);

/* Classifies the matrix against the fatal-alignment-error taxonomy and
 * writes one of the TLB_CLEAN..TLB_OVERESTIMATED codes to *out_class.
 * Negative threshold arguments select the defaults: back_tol 1,
 * fwd_skip 3, end_slack 1, dwell_max 40. */
int tlb_attn_classify(const TlbAttention *m, int back_tol, int fwd_skip,
                      int end_slack, int dwell_max, int *out_class);

/* Mann-Whitney U statistic (for the first sample) and two-sided p-value.
 * Uses the exact permutation distribution for small samples and a normal
 * approximation with tie correction otherwise. */
int tlb_mann_whitney(const double *a, size_t na, const double *b, size_t nb,
                     double *out_u, double *out_p);

/* Population standard deviation of f0 over voiced frames. voiced[i] == 0
 * marks frame i unvoiced; voiced frames must have f0 > 0. */
int tlb_f0_std(const double *f0, const uint8_t *voiced, size_t n,
               double *out_std);

#ifdef __cplusplus
}
#endif

#endif /* TACLAB_H */
