#ifndef LANE_EMDEN_H
#define LANE_EMDEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LeStatus {
  LE_STATUS_OK = 0,
  LE_STATUS_NULL_POINTER = 1,
  LE_STATUS_PRECONDITION = 2,
  LE_STATUS_NON_CONVERGENCE = 3,
  LE_STATUS_NUMERICAL = 4,
  LE_STATUS_IO = 5,
  LE_STATUS_PANIC = 6,
} LeStatus;

typedef enum LeRegime {
  LE_REGIME_SUBCRITICAL = 0,
  LE_REGIME_CRITICAL_BOUNDED = 1,
  LE_REGIME_UNBOUNDED = 2,
} LeRegime;

// Optimizer solution handle.
typedef struct LeOptimizer LeOptimizer;

typedef struct LeConstants {
  double a;
  double mu;
  double p_c;
  double s;
  double alpha;
  double tau;
  double threshold;
  double support_edge;
  double residual;
  double mu_consistency;
} LeConstants;

typedef struct LeSpectrum {
  double kappa;
  double bs_margin;
  double qhq_top;
} LeSpectrum;

typedef struct LeQuotient {
  double extrapolated;
  double hessian_prediction;
  double min_quotient;
  double zero_mode_fraction;
} LeQuotient;

typedef struct LeScattering {
  double s;
  double tau;
  double f_at_0;
  double origin_margin;
  double residual;
  double max_monotonicity_violation;
} LeScattering;

typedef struct LeTheory {
  double alpha_exp;
  // Minimal free energy; `-inf` when unbounded.
  double f_m;
  // Critical mass, NaN away from `p = 1 + lambda/d`.
  double m_c;
  // `int ell_chi^p`, NaN unless subcritical.
  double p_m;
  enum LeRegime regime;
} LeTheory;

typedef struct LeFlowSummary {
  double t_final;
  double final_energy;
  double max_energy_increase;
  double mass_drift;
  double final_p_integral;
  uint64_t accepted_steps;
  uint64_t rejected_steps;
  // 0 converged, 1 time reached, 2 budget exhausted, 3 unresolved concentration.
  uint32_t stop;
} LeFlowSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. Valid until the next
// call into this library on the same thread.
const char *le_last_error(void);

// Library version as a static NUL-terminated string.
const char *le_version(void);

// Solve for the optimizer at `(d, lambda, p)` on `n` uniform cells.
// `r_max <= 0` selects 1.5 times the support radius; `tol <= 0` the default.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum LeStatus le_optimizer_solve(size_t d,
                                 double lambda,
                                 double p,
                                 size_t n,
                                 double r_max,
                                 double tol,
                                 struct LeOptimizer **out);

// Release a handle; NULL is ignored.
//
// # Safety
// `h` must be NULL or a handle from [`le_optimizer_solve`] not yet freed.
void le_optimizer_free(struct LeOptimizer *h);

// Number of grid nodes of the solution (0 for NULL).
//
// # Safety
// `h` must be NULL or a live handle.
size_t le_optimizer_len(const struct LeOptimizer *h);

// # Safety
// `h` must be a live handle and `out` writable.
enum LeStatus le_optimizer_constants(struct LeOptimizer *h, struct LeConstants *out);

// Copy nodes and optimizer values into caller buffers of length `len`,
// which must equal [`le_optimizer_len`].
//
// # Safety
// `r` and `ell` must each point to `len` writable doubles.
enum LeStatus le_optimizer_profile(struct LeOptimizer *h, double *r, double *ell, size_t len);

// Gap, Birman-Schwinger margin and projected Hessian top over channels `0..=m_max`.
//
// # Safety
// `h` must be a live handle and `out` writable.
enum LeStatus le_spectrum(struct LeOptimizer *h, size_t m_max, struct LeSpectrum *out);

// Deficit quotient curve along the seeded direction `seed` at the default amplitudes.
//
// # Safety
// `h` must be a live handle and `out` writable.
enum LeStatus le_stability_quotient(struct LeOptimizer *h, uint64_t seed, struct LeQuotient *out);

// Scattering diagnostics; the fractional Hamiltonian uses `r_points` radii
// up to 1.4 times the support radius and `t_slices` extension slices.
//
// # Safety
// `h` must be a live handle and `out` writable.
enum LeStatus le_scattering(struct LeOptimizer *h,
                            size_t r_points,
                            size_t t_slices,
                            struct LeScattering *out);

// Minimal free energy and regime for `a` at the given coupling and mass.
//
// # Safety
// `out` must be writable.
enum LeStatus le_theory_values(size_t d,
                               double lambda,
                               double p,
                               double chi,
                               double mass,
                               double a,
                               struct LeTheory *out);

// Flow from a Gaussian of width `sigma` on `n` cells of radius `r_max`;
// `t_end <= 0` runs to the energy plateau, `max_steps == 0` keeps the default budget.
//
// # Safety
// `out` must be writable.
enum LeStatus le_flow_run(size_t d,
                          double lambda,
                          double p,
                          double chi,
                          double mass,
                          size_t n,
                          double r_max,
                          double sigma,
                          double t_end,
                          uint64_t max_steps,
                          struct LeFlowSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANE_EMDEN_H */
