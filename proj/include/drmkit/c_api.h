#ifndef DRMKIT_C_API_H
#define DRMKIT_C_API_H

#include <stddef.h>
#include <stdint.h>

#if defined(DRMKIT_BUILDING_LIBRARY)
#define DRM_API __attribute__((visibility("default")))
#else
#define DRM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Opaque run context: holds run options and the outputs of the last run. */
typedef struct drm_context drm_context;

typedef enum drm_status {
  DRM_OK = 0,
  DRM_E_CONFIG = 1,  /* bad config, unknown key, missing checkpoint or input */
  DRM_E_RUNTIME = 2, /* numeric divergence, I/O failure, internal error */
  DRM_E_ARGUMENT = 3 /* null handle or invalid argument to this API */
} drm_status;

DRM_API const char* drm_version(void);

/* Message of the last failed call on this thread; "" if none. */
DRM_API const char* drm_last_error(void);

DRM_API drm_status drm_context_create(drm_context** out);
DRM_API void drm_context_destroy(drm_context* ctx);

/* Overrides the config's `seed`. */
DRM_API drm_status drm_context_set_seed(drm_context* ctx, uint64_t seed);
DRM_API drm_status drm_context_clear_seed(drm_context* ctx);
/* Overrides the config's `output.dir`; NULL clears the override. */
DRM_API drm_status drm_context_set_output(drm_context* ctx, const char* dir);

/* Runs `command` (fm-train, drm-train, align, sample, eval, report) on the
   config file at `config_path`. */
DRM_API drm_status drm_run(drm_context* ctx, const char* command, const char* config_path);

/* Results of the last successful drm_run; strings live until the next run
   or destroy. */
DRM_API const char* drm_context_experiment(const drm_context* ctx);
DRM_API const char* drm_context_output_dir(const drm_context* ctx);
DRM_API size_t drm_context_output_count(const drm_context* ctx);
DRM_API const char* drm_context_output_file(const drm_context* ctx, size_t index);

/* Checks a run directory's manifest against its stored config and outputs. */
DRM_API drm_status drm_verify_run(const char* run_dir);

#ifdef __cplusplus
}
#endif

#endif /* DRMKIT_C_API_H */
