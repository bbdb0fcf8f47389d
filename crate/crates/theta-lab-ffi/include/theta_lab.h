#ifndef THETA_LAB_H
#define THETA_LAB_H

#include <stddef.h>
#include <stdint.h>

#define TL_OK 0

#define TL_ERR_NULL_POINTER 1

#define TL_ERR_INVALID_UTF8 2

#define TL_ERR_PANIC 3

#define TL_ERR_INVALID_PERIOD_MATRIX 10

#define TL_ERR_TRUNCATION_INSUFFICIENT 11

#define TL_ERR_ALL_COORDINATES_VANISH 12

#define TL_ERR_POLE_AT_LATTICE_POINT 13

#define TL_ERR_NEAR_SINGULAR_INPUT 14

#define TL_ERR_INVALID_LATTICE 15

#define TL_ERR_COLLISION_DETECTED 16

#define TL_ERR_STEP_REJECTED 17

#define TL_ERR_DEGENERATE_EIGENVALUE 18

#define TL_ERR_BRANCH_AMBIGUITY 19

#define TL_ERR_BOUNDARY_ZERO 20

#define TL_ERR_NON_SIMPLE_ZERO 21

#define TL_ERR_TRACKING_LOST 22

#define TL_ERR_INSUFFICIENT_ZEROS 23

#define TL_ERR_GRID_HITS_DIVISOR 24

#define TL_ERR_FACTOR_VANISHES 25

#define TL_ERR_FIT_DEGENERATE 26

#define TL_ERR_SHIFT_INVARIANT_DIVISOR 27

#define TL_ERR_RESIDUE_OBSTRUCTION 28

#define TL_ERR_DIVISOR_HIT 29

#define TL_ERR_INVALID_CURVE_DATUM 30

#define TL_ERR_CONFIG_INVALID 31

#define TL_ERR_INVALID_ARGUMENT 32

#define TL_ERR_IO 33

/*
 A Calogero-Moser state.
 */
typedef struct TlCmState TlCmState;

/*
 An elliptic lattice with half-periods `omega1`, `omega2`.
 */
typedef struct TlLattice TlLattice;

/*
 A validated period matrix.
 */
typedef struct TlPeriodMatrix TlPeriodMatrix;

/*
 A residual report together with its JSON text.
 */
typedef struct TlReport TlReport;

/*
 A complex number laid out as two doubles.
 */
typedef struct TlComplex {
  double re;
  double im;
} TlComplex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty when none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *tl_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *tl_version(void);

/*
 Creates a `g x g` period matrix from row-major entries.

 # Safety
 `entries` must point to `g * g` values and `out` to writable storage.
 */
int32_t tl_period_matrix_new(size_t g,
                             const struct TlComplex *entries,
                             struct TlPeriodMatrix **out_handle);

/*
 Releases a period matrix; null is ignored.

 # Safety
 `b` must come from [`tl_period_matrix_new`] and not be used afterwards.
 */
void tl_period_matrix_free(struct TlPeriodMatrix *b);

/*
 Genus of a period matrix, 0 for null.

 # Safety
 `b` must be null or a live handle.
 */
size_t tl_period_matrix_genus(const struct TlPeriodMatrix *b);

/*
 Riemann theta function at `z` (length `g`) with absolute tolerance `tol`.

 # Safety
 `z` must point to `genus` values; `result` must be writable.
 */
int32_t tl_theta_eval(const struct TlPeriodMatrix *b,
                      const struct TlComplex *z,
                      double tol,
                      struct TlComplex *result);

/*
 Defect of the theta addition formula at `(z, w)`.

 # Safety
 `z` and `w` must point to `genus` values; `result` must be writable.
 */
int32_t tl_addition_residual(const struct TlPeriodMatrix *b,
                             const struct TlComplex *z,
                             const struct TlComplex *w,
                             double tol,
                             double *result);

/*
 # Safety
 `out_handle` must be writable.
 */
int32_t tl_lattice_new(struct TlComplex omega1,
                       struct TlComplex omega2,
                       struct TlLattice **out_handle);

/*
 # Safety
 `lat` must come from [`tl_lattice_new`] and not be used afterwards.
 */
void tl_lattice_free(struct TlLattice *lat);

/*
 Weierstrass `sigma`, `zeta` and `wp` at `x`.

 # Safety
 `lat` must be a live handle; output pointers must be writable.
 */
int32_t tl_lattice_weierstrass(const struct TlLattice *lat,
                               struct TlComplex x,
                               struct TlComplex *sigma,
                               struct TlComplex *zeta,
                               struct TlComplex *wp);

/*
 The Lame kernel `Phi(x, z)`.

 # Safety
 `lat` must be a live handle; `result` must be writable.
 */
int32_t tl_lattice_phi(const struct TlLattice *lat,
                       struct TlComplex x,
                       struct TlComplex z,
                       struct TlComplex *result);

/*
 Creates a state of `n` particles.

 # Safety
 `q` and `p` must point to `n` values; `lat` must be a live handle.
 */
int32_t tl_cm_state_new(const struct TlLattice *lat,
                        size_t n,
                        const struct TlComplex *q,
                        const struct TlComplex *p,
                        struct TlCmState **out_handle);

/*
 # Safety
 `s` must come from a `tl_cm_*` constructor and not be used afterwards.
 */
void tl_cm_state_free(struct TlCmState *s);

/*
 Number of particles, 0 for null.

 # Safety
 `s` must be null or a live handle.
 */
size_t tl_cm_state_len(const struct TlCmState *s);

/*
 Copies positions and momenta into `q` and `p` (length `n` each).

 # Safety
 `q` and `p` must have room for `tl_cm_state_len(s)` values.
 */
int32_t tl_cm_state_get(const struct TlCmState *s, struct TlComplex *q, struct TlComplex *p);

/*
 Hamiltonian of the state.

 # Safety
 `s` must be a live handle; `result` must be writable.
 */
int32_t tl_cm_hamiltonian(const struct TlCmState *s, struct TlComplex *result);

/*
 Relative defect of the Lax equation at spectral parameter `z`.

 # Safety
 `s` must be a live handle; `result` must be writable.
 */
int32_t tl_cm_lax_residual(const struct TlCmState *s, struct TlComplex z, double *result);

/*
 Power traces `tr L(z)^k`, `k = 1..=kmax`, written to `traces`.

 # Safety
 `traces` must have room for `kmax` values.
 */
int32_t tl_cm_power_traces(const struct TlCmState *s,
                           struct TlComplex z,
                           size_t kmax,
                           struct TlComplex *traces);

/*
 Integrates `steps` RK4 steps of size `dt` and returns the final state
 as a new handle.

 # Safety
 `s` must be a live handle; `out_handle` must be writable.
 */
int32_t tl_cm_flow(const struct TlCmState *s,
                   double dt,
                   size_t steps,
                   struct TlCmState **out_handle);

/*
 Validates and runs a scenario given as JSON text. A report is returned
 even when residuals fail; check [`tl_report_pass`].

 # Safety
 `json` must be a NUL-terminated string; `out_handle` must be writable.
 */
int32_t tl_run_scenario_json(const char *json, struct TlReport **out_handle);

/*
 1 when every residual passed, 0 otherwise or for null.

 # Safety
 `r` must be null or a live handle.
 */
int32_t tl_report_pass(const struct TlReport *r);

/*
 Largest upper-bound residual, NaN when there is none.

 # Safety
 `r` must be null or a live handle.
 */
double tl_report_max_residual(const struct TlReport *r);

/*
 JSON text of the report, owned by the handle.

 # Safety
 `r` must be null or a live handle.
 */
const char *tl_report_json(const struct TlReport *r);

/*
 # Safety
 `r` must come from [`tl_run_scenario_json`] and not be used afterwards.
 */
void tl_report_free(struct TlReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THETA_LAB_H */
