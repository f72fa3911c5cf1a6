#include "drmkit/c_api.h"

#include <new>
#include <optional>
#include <string>
#include <vector>

#include "drmkit/error.hpp"
#include "drmkit/harness.hpp"

struct drm_context {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string experiment;
  std::string out_dir;
  std::vector<std::string> files;
};

namespace {

thread_local std::string g_last_error;

drm_status fail(drm_status code, std::string message) {
  g_last_error = std::move(message);
  return code;
}

drm_status ok() {
  g_last_error.clear();
  return DRM_OK;
}

// Maps exceptions from the core to status codes.
template <class F>
drm_status guarded(F&& f) {
  try {
    f();
    return ok();
  } catch (const drmkit::ConfigError& e) {
    return fail(DRM_E_CONFIG, e.what());
  } catch (const drmkit::ShapeError& e) {
    return fail(DRM_E_CONFIG, e.what());
  } catch (const std::bad_alloc&) {
    return fail(DRM_E_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(DRM_E_RUNTIME, e.what());
  } catch (...) {
    return fail(DRM_E_RUNTIME, "unknown error");
  }
}

}  // namespace

extern "C" {

const char* drm_version(void) { return drmkit::harness::version(); }

const char* drm_last_error(void) { return g_last_error.c_str(); }

drm_status drm_context_create(drm_context** out) {
  if (!out) return fail(DRM_E_ARGUMENT, "drm_context_create: null output pointer");
  *out = new (std::nothrow) drm_context();
  if (!*out) return fail(DRM_E_RUNTIME, "out of memory");
  return ok();
}

void drm_context_destroy(drm_context* ctx) { delete ctx; }

drm_status drm_context_set_seed(drm_context* ctx, uint64_t seed) {
  if (!ctx) return fail(DRM_E_ARGUMENT, "null context");
  ctx->seed = seed;
  return ok();
}

drm_status drm_context_clear_seed(drm_context* ctx) {
  if (!ctx) return fail(DRM_E_ARGUMENT, "null context");
  ctx->seed.reset();
  return ok();
}

drm_status drm_context_set_output(drm_context* ctx, const char* dir) {
  if (!ctx) return fail(DRM_E_ARGUMENT, "null context");
  if (dir && !*dir) return fail(DRM_E_ARGUMENT, "empty output directory");
  if (dir) {
    ctx->out = dir;
  } else {
    ctx->out.reset();
  }
  return ok();
}

drm_status drm_run(drm_context* ctx, const char* command, const char* config_path) {
  if (!ctx) return fail(DRM_E_ARGUMENT, "null context");
  if (!command || !config_path) return fail(DRM_E_ARGUMENT, "drm_run: command and config path are required");
  return guarded([&] {
    drmkit::harness::RunOptions opts;
    opts.command = command;
    opts.config = config_path;
    opts.seed = ctx->seed;
    if (ctx->out) opts.out = *ctx->out;
    const auto result = drmkit::harness::run(opts);
    ctx->experiment = result.experiment;
    ctx->out_dir = result.out_dir.string();
    ctx->files = result.files;
  });
}

const char* drm_context_experiment(const drm_context* ctx) { return ctx ? ctx->experiment.c_str() : ""; }

const char* drm_context_output_dir(const drm_context* ctx) { return ctx ? ctx->out_dir.c_str() : ""; }

size_t drm_context_output_count(const drm_context* ctx) { return ctx ? ctx->files.size() : 0; }

const char* drm_context_output_file(const drm_context* ctx, size_t index) {
  if (!ctx || index >= ctx->files.size()) return nullptr;
  return ctx->files[index].c_str();
}

drm_status drm_verify_run(const char* run_dir) {
  if (!run_dir) return fail(DRM_E_ARGUMENT, "null run directory");
  return guarded([&] {
    const std::string problem = drmkit::harness::verify_manifest(run_dir);
    if (!problem.empty()) throw drmkit::ConfigError(std::string(run_dir) + ": " + problem);
  });
}

}  // extern "C"
