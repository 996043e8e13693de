#include "svam/svam.h"

#include <memory>
#include <string>

#include "svam/error.hpp"
#include "svam/pipeline.hpp"

struct svam_pipeline {
  std::unique_ptr<svam::pipeline::Pipeline> impl;
  std::string last_error;
};

namespace {

thread_local std::string g_open_error;

svam_status status_of(const svam::Error& e) { return (svam_status)(int)e.code(); }

template <class F>
svam_status guarded(svam_pipeline* p, F&& fn) {
  if (!p || !p->impl) return SVAM_ERROR;
  p->last_error.clear();
  try {
    fn();
    return SVAM_OK;
  } catch (const svam::Error& e) {
    p->last_error = e.what();
    return status_of(e);
  } catch (const std::exception& e) {
    p->last_error = e.what();
    return SVAM_ERROR;
  }
}

svam_status open_impl(svam_pipeline** out, const std::function<svam::config::RunConfig()>& load) {
  if (!out) return SVAM_ERROR;
  *out = nullptr;
  g_open_error.clear();
  try {
    auto handle = std::make_unique<svam_pipeline>();
    handle->impl = std::make_unique<svam::pipeline::Pipeline>(load());
    *out = handle.release();
    return SVAM_OK;
  } catch (const svam::Error& e) {
    g_open_error = e.what();
    return status_of(e);
  } catch (const std::exception& e) {
    g_open_error = e.what();
    return SVAM_ERROR;
  }
}

}  // namespace

extern "C" {

svam_status svam_open(const char* config_path, svam_pipeline** out) {
  if (!config_path) return SVAM_ERR_CONFIG;
  std::string path = config_path;
  return open_impl(out, [path] { return svam::config::RunConfig::from_file(path); });
}

svam_status svam_open_text(const char* config_json, svam_pipeline** out) {
  if (!config_json) return SVAM_ERR_CONFIG;
  std::string text = config_json;
  return open_impl(out, [text] { return svam::config::RunConfig::from_text(text); });
}

void svam_close(svam_pipeline* p) { delete p; }

const char* svam_last_error(const svam_pipeline* p) {
  return p ? p->last_error.c_str() : "null pipeline handle";
}

const char* svam_global_error(void) { return g_open_error.c_str(); }

svam_status svam_set_seed(svam_pipeline* p, uint64_t seed) {
  return guarded(p, [&] { p->impl->set_seed(seed); });
}

svam_status svam_set_out_dir(svam_pipeline* p, const char* dir) {
  if (!dir) return SVAM_ERROR;
  return guarded(p, [&] { p->impl->set_out_dir(dir); });
}

svam_status svam_set_data_path(svam_pipeline* p, const char* path) {
  if (!path) return SVAM_ERROR;
  return guarded(p, [&] { p->impl->set_data_path(path); });
}

svam_status svam_gen_data(svam_pipeline* p) {
  return guarded(p, [&] { p->impl->cmd_gen_data(); });
}

svam_status svam_train(svam_pipeline* p, int stage, int resume) {
  return guarded(p, [&] { p->impl->cmd_train(stage, resume != 0); });
}

svam_status svam_eval(svam_pipeline* p, int episodes, int seeds, int write_traces) {
  return guarded(p, [&] { p->impl->cmd_eval(episodes, seeds, write_traces != 0); });
}

svam_status svam_ablate(svam_pipeline* p, const char* variant, int episodes, int seeds) {
  if (!variant) return SVAM_ERR_CONFIG;
  std::string v = variant;
  return guarded(p, [&] { p->impl->cmd_ablate(v, episodes, seeds); });
}

svam_status svam_bench_latency(svam_pipeline* p, int trials) {
  return guarded(p, [&] { p->impl->cmd_bench_latency(trials); });
}

svam_status svam_gradcheck(svam_pipeline* p, int inject_fault) {
  return guarded(p, [&] {
    auto report = p->impl->cmd_gradcheck(inject_fault != 0);
    if (!report.at("pass").get<bool>()) {
      throw svam::Error(svam::Status::error, "gradient check failed");
    }
  });
}

const char* svam_version(void) { return "svam 1.0.0"; }

}  // extern "C"
