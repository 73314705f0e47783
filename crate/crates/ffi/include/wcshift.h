#ifndef WCSHIFT_H
#define WCSHIFT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WcStatus {
  WC_STATUS_OK = 0,
  WC_STATUS_NULL_POINTER = 1,
  WC_STATUS_INVALID_UTF8 = 2,
  WC_STATUS_CONFIG = 3,
  WC_STATUS_DATA = 4,
  WC_STATUS_NUMERICAL = 5,
  WC_STATUS_IO = 6,
  WC_STATUS_PANIC = 7,
} WcStatus;

/**
 * Cohort handle.
 */
typedef struct WcCohort WcCohort;

/**
 * Predictor handle.
 */
typedef struct WcPredictor WcPredictor;

/**
 * Worst-case report handle.
 */
typedef struct WcReport WcReport;

/**
 * Frank-Wolfe settings. `draw_size == 0` means the pool size.
 */
typedef struct WcFwParams {
  size_t iterations;
  size_t num_samples;
  size_t num_samples2;
  double momentum;
  size_t draw_size;
  uint64_t seed;
  bool literal_sign;
  bool centered;
} WcFwParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *wc_last_error_message(void);

/**
 * Library defaults for the Frank-Wolfe settings.
 */
struct WcFwParams wc_fw_params_default(void);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WcStatus wc_cohort_from_json(const char *json, struct WcCohort **out_cohort);

/**
 * # Safety
 * `cohort` must come from [`wc_cohort_from_json`] or be null.
 */
void wc_cohort_free(struct WcCohort *cohort);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WcStatus wc_predictor_from_json(const char *json, struct WcPredictor **out_predictor);

/**
 * # Safety
 * `predictor` must come from [`wc_predictor_from_json`] or be null.
 */
void wc_predictor_free(struct WcPredictor *predictor);

/**
 * Runs the worst-case search. `loss_json` is a loss object such as
 * `{"type":"top-k","k":10}`. `params` may be null for the defaults.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated, `out_report` valid.
 */
enum WcStatus wc_find_worst_case(const struct WcCohort *cohort,
                                 const struct WcPredictor *predictor,
                                 const char *loss_json,
                                 double rho_ind,
                                 double rho_xi,
                                 const struct WcFwParams *params,
                                 struct WcReport **out_report);

/**
 * Worst-case expected decision loss.
 *
 * # Safety
 * `report` must be live and `out_value` valid.
 */
enum WcStatus wc_report_value(const struct WcReport *report, double *out_value);

/**
 * Number of instances in the report.
 *
 * # Safety
 * `report` must be live and `out_len` valid.
 */
enum WcStatus wc_report_num_instances(const struct WcReport *report, size_t *out_len);

/**
 * Instance-level shifted distribution, written to `out_q[0..len]`.
 *
 * # Safety
 * `report` must be live and `out_q` must hold `len` doubles.
 */
enum WcStatus wc_report_instance_distribution(const struct WcReport *report,
                                              double *out_q,
                                              size_t len);

/**
 * Serializes the report. Free the string with [`wc_string_free`].
 *
 * # Safety
 * `report` must be live and `out_json` valid.
 */
enum WcStatus wc_report_to_json(const struct WcReport *report, char **out_json);

/**
 * # Safety
 * `report` must come from [`wc_find_worst_case`] or be null.
 */
void wc_report_free(struct WcReport *report);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void wc_string_free(char *s);

/**
 * χ² divergence `sum (q - p)^2 / p`.
 *
 * # Safety
 * `q` and `p` must hold `len` doubles.
 */
enum WcStatus wc_chi_square_div(const double *q, const double *p, size_t len, double *out_div);

/**
 * Maximizer of `<v, q>` over distributions within χ² radius `rho` of uniform.
 *
 * # Safety
 * `v` and `out_q` must hold `len` doubles.
 */
enum WcStatus wc_gradmax(const double *v, size_t len, double rho, double *out_q);

/**
 * Exact 0/1 knapsack. Sets `out_chosen[i]` to 1 for selected items.
 *
 * # Safety
 * `values`, `costs` and `out_chosen` must hold `len` entries.
 */
enum WcStatus wc_solve_knapsack(const double *values,
                                const int64_t *costs,
                                size_t len,
                                int64_t budget,
                                uint8_t *out_chosen);

/**
 * Gini coefficient of non-negative values.
 *
 * # Safety
 * `values` must hold `len` doubles.
 */
enum WcStatus wc_gini(const double *values, size_t len, double *out_gini);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WCSHIFT_H */
