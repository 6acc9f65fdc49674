#ifndef ACTOFFLOAD_H
#define ACTOFFLOAD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AoStatus {
  AO_STATUS_OK = 0,
  AO_STATUS_NULL_POINTER = 1,
  AO_STATUS_INVALID_ARGUMENT = 2,
  AO_STATUS_CONFIG = 3,
  AO_STATUS_MODEL = 4,
  AO_STATUS_CACHE = 5,
  AO_STATUS_STORAGE = 6,
  AO_STATUS_PANIC = 7,
} AoStatus;

typedef enum AoStage {
  AO_STAGE_FORWARD = 0,
  AO_STAGE_BACKWARD = 1,
  AO_STAGE_WEIGHT_UPDATE = 2,
} AoStage;

/**
 * Opaque tensor cache over a transfer engine.
 */
typedef struct AoCache AoCache;

/**
 * Opaque configuration: model, parallelism, hardware and plan sections.
 */
typedef struct AoConfig AoConfig;

/**
 * Opaque reference returned by pack and consumed by unpack.
 */
typedef struct AoPacked AoPacked;

/**
 * Opaque tensor buffer with its shape.
 */
typedef struct AoTensor AoTensor;

/**
 * Model-level projection for one configuration.
 */
typedef struct AoProjection {
  double step_time_s;
  double forward_time_s;
  double activations_per_gpu;
  double required_write_bw;
  /**
   * `INFINITY` when nothing is written.
   */
  double lifespan_years;
  double max_activations_per_gpu;
} AoProjection;

/**
 * Storage and plan settings for a new cache.
 */
typedef struct AoCacheOptions {
  /**
   * Bytes/s; 0 or less means unthrottled.
   */
  double write_bw;
  double read_bw;
  uint64_t budget_bytes;
  uint64_t min_tensor_elems;
  bool keep_last_module;
} AoCacheOptions;

typedef struct AoCacheStats {
  uint64_t packed;
  uint64_t pass_through;
  uint64_t kept;
  uint64_t offloaded;
  uint64_t offloaded_bytes;
  uint64_t forwarded;
  uint64_t loads;
  uint64_t released;
  uint64_t backend_writes;
  uint64_t backend_reads;
} AoCacheStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *ao_last_error(void);

/**
 * Library version as a static string.
 */
const char *ao_version(void);

/**
 * The built-in configuration: 3-layer BERT, hidden 12288, batch 16, TP 2.
 */
enum AoStatus ao_config_default(struct AoConfig **out);

/**
 * Load and validate a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum AoStatus ao_config_load(const char *path, struct AoConfig **out);

void ao_config_free(struct AoConfig *config);

/**
 * Step time, activations, bandwidth and lifespan for `config`.
 *
 * # Safety
 * `config` must come from this library; `out` must be writable.
 */
enum AoStatus ao_config_project(const struct AoConfig *config, struct AoProjection *out);

/**
 * Activation bytes saved per GPU over one step.
 *
 * # Safety
 * `config` must come from this library; `out` must be writable.
 */
enum AoStatus ao_config_activations(const struct AoConfig *config, double *out);

/**
 * Write bandwidth that moves `activation_bytes` in half of `step_time_s`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AoStatus ao_required_write_bandwidth(double activation_bytes, double step_time_s, double *out);

/**
 * Cache over an in-memory store on a simulated clock.
 *
 * # Safety
 * `options` must be readable and `out` writable.
 */
enum AoStatus ao_cache_new_virtual(const struct AoCacheOptions *options, struct AoCache **out);

/**
 * Cache writing files under `root` with background worker threads. The
 * bandwidths in `options` throttle the workers; 0 leaves them unthrottled.
 *
 * # Safety
 * `root` must be NUL-terminated; `options` readable; `out` writable.
 */
enum AoStatus ao_cache_new_file(const char *root,
                                const struct AoCacheOptions *options,
                                struct AoCache **out);

/**
 * Drains outstanding transfers, then frees the cache.
 */
void ao_cache_free(struct AoCache *cache);

/**
 * Copy `len` bytes into a new tensor of the given shape. The shape's
 * element count must divide `len`.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `shape` to `ndim` values.
 */
enum AoStatus ao_tensor_new(const uint8_t *data,
                            size_t len,
                            const size_t *shape,
                            size_t ndim,
                            struct AoTensor **out);

void ao_tensor_free(struct AoTensor *tensor);

/**
 * Borrow the tensor's bytes. The pointer lives as long as the tensor.
 *
 * # Safety
 * `tensor` must come from this library; `data` and `len` must be writable.
 */
enum AoStatus ao_tensor_data(const struct AoTensor *tensor, const uint8_t **data, size_t *len);

/**
 * CRC-32 of the tensor's bytes.
 *
 * # Safety
 * `tensor` must come from this library; `out` must be writable.
 */
enum AoStatus ao_tensor_checksum(const struct AoTensor *tensor, uint32_t *out);

/**
 * Register a tensor as a weight so packing passes it through.
 *
 * # Safety
 * Both handles must come from this library.
 */
enum AoStatus ao_cache_register_weight(struct AoCache *cache, const struct AoTensor *tensor);

/**
 * Hand a tensor saved for backward to the cache. The tensor handle stays
 * owned by the caller.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum AoStatus ao_cache_pack(struct AoCache *cache,
                            const struct AoTensor *tensor,
                            struct AoPacked **out);

/**
 * Get the tensor back, waiting for its reload if needed. The returned
 * tensor is a new handle the caller frees.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum AoStatus ao_cache_unpack(struct AoCache *cache,
                              const struct AoPacked *packed,
                              struct AoTensor **out);

void ao_packed_free(struct AoPacked *packed);

/**
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_forward_enter(struct AoCache *cache, uint64_t module);

/**
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_forward_exit(struct AoCache *cache, uint64_t module);

/**
 * Entering a module's backward also queues the prefetch of what it and
 * the modules before it offloaded.
 *
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_backward_enter(struct AoCache *cache, uint64_t module);

/**
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_backward_exit(struct AoCache *cache, uint64_t module);

/**
 * Mark the beginning (`begin` true) or end of a training stage.
 *
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_stage(struct AoCache *cache, enum AoStage stage, bool begin);

/**
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_switch_microbatch(struct AoCache *cache, uint32_t index);

/**
 * Let `seconds` of compute pass. Simulated caches move their clock; file
 * caches sleep.
 *
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_advance(struct AoCache *cache, double seconds);

/**
 * Finish the step: wait for transfers and release everything left.
 *
 * # Safety
 * `cache` must come from this library.
 */
enum AoStatus ao_cache_end_step(struct AoCache *cache);

/**
 * # Safety
 * `cache` must come from this library; `out` must be writable.
 */
enum AoStatus ao_cache_stats(const struct AoCache *cache, struct AoCacheStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTOFFLOAD_H */
