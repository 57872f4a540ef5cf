#ifndef MRSIM_H
#define MRSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrsimClientClass {
  MrsimClientClass_Outside = 0,
  MrsimClientClass_CoServer = 1,
  MrsimClientClass_CoRack = 2,
  MrsimClientClass_CrossRack = 3,
} MrsimClientClass;

typedef enum MrsimMode {
  MrsimMode_Chain = 0,
  MrsimMode_Mirrored = 1,
  MrsimMode_Both = 2,
} MrsimMode;

typedef enum MrsimStatus {
  MrsimStatus_Ok = 0,
  MrsimStatus_NullPointer = 1,
  MrsimStatus_InvalidUtf8 = 2,
  MrsimStatus_Config = 3,
  MrsimStatus_Simulation = 4,
  MrsimStatus_OutOfRange = 5,
  MrsimStatus_BufferTooSmall = 6,
  MrsimStatus_Panic = 7,
} MrsimStatus;

/**
 * Results of one or more runs.
 */
typedef struct MrsimReport MrsimReport;

/**
 * Scenario parameters.
 */
typedef struct MrsimScenario MrsimScenario;

/**
 * One result row. `saving_ratio` is NaN when not applicable.
 */
typedef struct MrsimRow {
  enum MrsimMode mode;
  uint32_t k;
  uint64_t data_time_ns;
  uint64_t total_time_ns;
  uint64_t payload_link_traversals;
  uint64_t acks_bytes;
  uint64_t retx_count;
  uint64_t early_ack_count;
  double saving_ratio;
  bool replicas_ok;
} MrsimRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *mrsim_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *mrsim_version(void);

/**
 * Creates a scenario with default parameters.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum MrsimStatus mrsim_scenario_new(struct MrsimScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be valid for writing.
 */
enum MrsimStatus mrsim_scenario_from_toml(const char *text, struct MrsimScenario **out);

/**
 * # Safety
 * `s` must be NULL or a handle from this library not yet freed.
 */
void mrsim_scenario_free(struct MrsimScenario *s);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MrsimStatus mrsim_scenario_set_k(struct MrsimScenario *s, uint32_t k);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MrsimStatus mrsim_scenario_set_mode(struct MrsimScenario *s, enum MrsimMode mode);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MrsimStatus mrsim_scenario_set_seed(struct MrsimScenario *s, uint64_t seed);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MrsimStatus mrsim_scenario_set_loss(struct MrsimScenario *s, double loss);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum MrsimStatus mrsim_scenario_set_block_size(struct MrsimScenario *s, uint64_t bytes);

/**
 * Runs the scenario's configured modes.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be valid for writing.
 */
enum MrsimStatus mrsim_run(const struct MrsimScenario *s, struct MrsimReport **out);

/**
 * Runs both modes for every k in `[k_min, k_max]`.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be valid for writing.
 */
enum MrsimStatus mrsim_sweep(const struct MrsimScenario *s,
                             uint32_t k_min,
                             uint32_t k_max,
                             struct MrsimReport **out);

/**
 * # Safety
 * `r` must be NULL or a handle from this library not yet freed.
 */
void mrsim_report_free(struct MrsimReport *r);

/**
 * Number of rows; 0 for NULL.
 *
 * # Safety
 * `r` must be NULL or a live report handle.
 */
uintptr_t mrsim_report_len(const struct MrsimReport *r);

/**
 * # Safety
 * `r` must be a live report handle; `out` must be valid for writing.
 */
enum MrsimStatus mrsim_report_row(const struct MrsimReport *r,
                                  uintptr_t index,
                                  struct MrsimRow *out);

/**
 * Writes the report as CSV with a trailing NUL. `needed` (optional)
 * receives the required size including the NUL; a short buffer yields
 * `BufferTooSmall` and is left untouched.
 *
 * # Safety
 * `r` must be a live report handle; `buf` must be valid for `cap` bytes
 * (or NULL with `cap` 0); `needed` must be NULL or valid for writing.
 */
enum MrsimStatus mrsim_report_csv(const struct MrsimReport *r,
                                  char *buf,
                                  uintptr_t cap,
                                  uintptr_t *needed);

/**
 * Mean analytic saving ratio over the placement cases of one client class.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum MrsimStatus mrsim_analytic_average(uint32_t k, enum MrsimClientClass class_, double *out);

/**
 * Mean of the per-class averages.
 *
 * # Safety
 * `out` must be valid for writing.
 */
enum MrsimStatus mrsim_analytic_pooled(uint32_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRSIM_H */
