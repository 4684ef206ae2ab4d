#ifndef SPIKELAB_H
#define SPIKELAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum sl_status {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_ARGUMENT = 2,
  SL_STATUS_DIMENSION = 3,
  SL_STATUS_NUMERIC = 4,
  SL_STATUS_CONFIG = 5,
  SL_STATUS_FORMAT = 6,
  SL_STATUS_IO = 7,
  SL_STATUS_INTERNAL = 8,
  SL_STATUS_PANIC = 9,
} sl_status;

/**
 * A network and its parameters.
 */
typedef struct sl_network sl_network;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *sl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sl_version(void);

/**
 * One I-LIF time step over `n` neurons. Writes integer spikes to
 * `spikes_out` and the post-reset membrane to `h_out`. `h_out` may alias
 * `h`.
 *
 * # Safety
 * Every pointer must be valid for `n` elements.
 */
enum sl_status sl_ilif_step(const double *h,
                            const double *x,
                            size_t n,
                            double tau,
                            double v_th,
                            int32_t d_max,
                            int32_t *spikes_out,
                            double *h_out);

/**
 * LFSI of one layer's spike counts laid out `(T, N, C, H, W)` row-major.
 *
 * # Safety
 * `dims` must point to 5 values and `spikes` to their product.
 */
enum sl_status sl_lfsi_layer(const int32_t *spikes,
                             const size_t *dims,
                             int32_t d_max,
                             size_t window,
                             double *out);

/**
 * Energy in millijoules of `sops` synaptic operations and `flops`
 * real-valued floating point operations.
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum sl_status sl_energy_mj(double sops, double flops, double *out);

/**
 * Freshly initialized MDSNet of the given depth (10, 18, 34 or 104).
 *
 * # Safety
 * `out` must be valid for a write.
 */
enum sl_status sl_network_mdsnet(size_t depth,
                                 double width,
                                 size_t in_channels,
                                 size_t num_classes,
                                 uint64_t seed,
                                 struct sl_network **out);

/**
 * Freshly initialized network from a JSON network spec.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` valid for a write.
 */
enum sl_status sl_network_from_json(const char *json, uint64_t seed, struct sl_network **out);

/**
 * Network stored in a model file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid for a write.
 */
enum sl_status sl_network_load(const char *path, struct sl_network **out);

/**
 * Releases a network. NULL is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void sl_network_free(struct sl_network *net);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `net` must be a live handle and `out` valid for a write.
 */
enum sl_status sl_network_param_count(const struct sl_network *net, size_t *out);

/**
 * Eval-mode forward pass on `input` laid out `(T, N, C, H, W)`. A single
 * frame (`T = 1`) is direct-encoded to the network's time steps. On
 * success `*json_out` holds the metrics report, to be released with
 * [`sl_string_free`].
 *
 * # Safety
 * `dims` must point to 5 values, `input` to their product, and
 * `json_out` must be valid for a write.
 */
enum sl_status sl_network_simulate(struct sl_network *net,
                                   const double *input,
                                   const size_t *dims,
                                   size_t lfsi_window,
                                   char **json_out);

/**
 * Releases a string returned by the library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKELAB_H */
