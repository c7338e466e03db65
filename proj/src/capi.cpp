#include "mclaro.h"

#include <cstring>
#include <string>

#include "mclaro/pipeline.hpp"

using mclaro::pipeline::Config;
using mclaro::pipeline::Experiment;
using mclaro::pipeline::MissingArtifact;

struct mclaro_experiment {
  Config cfg;
  std::string out_dir;
  std::string last_error;
};

namespace {

thread_local std::string g_open_error;

mclaro_status classify(const std::exception& e) {
  const std::string msg = e.what();
  if (dynamic_cast<const MissingArtifact*>(&e)) return MCLARO_ERR_MISSING_ARTIFACT;
  if (msg.rfind("config:", 0) == 0) return MCLARO_ERR_CONFIG;
  if (dynamic_cast<const std::invalid_argument*>(&e)) return MCLARO_ERR_INVALID_ARG;
  if (msg.find("cannot open") != std::string::npos ||
      msg.find("read failed") != std::string::npos ||
      msg.find("write failed") != std::string::npos)
    return MCLARO_ERR_IO;
  if (msg.find("non-finite") != std::string::npos ||
      msg.find("diverged") != std::string::npos)
    return MCLARO_ERR_NUMERIC;
  return MCLARO_ERR_INTERNAL;
}

}  // namespace

extern "C" {

const char* mclaro_version(void) { return "0.1.0"; }

const char* mclaro_status_name(mclaro_status status) {
  switch (status) {
    case MCLARO_OK: return "ok";
    case MCLARO_ERR_INVALID_ARG: return "invalid_argument";
    case MCLARO_ERR_CONFIG: return "config_error";
    case MCLARO_ERR_IO: return "io_error";
    case MCLARO_ERR_MISSING_ARTIFACT: return "missing_artifact";
    case MCLARO_ERR_NUMERIC: return "numeric_error";
    case MCLARO_ERR_INTERNAL: return "internal_error";
  }
  return "unknown";
}

mclaro_status mclaro_experiment_open(const char* config_path,
                                     const char* out_dir,
                                     mclaro_experiment** out) {
  if (out) *out = nullptr;
  if (!config_path || !out_dir || !out) {
    g_open_error = "null argument";
    return MCLARO_ERR_INVALID_ARG;
  }
  try {
    auto* exp = new mclaro_experiment{
        mclaro::pipeline::load_config(config_path), out_dir, ""};
    *out = exp;
    return MCLARO_OK;
  } catch (const std::exception& e) {
    g_open_error = e.what();
    return classify(e);
  }
}

void mclaro_experiment_close(mclaro_experiment* exp) { delete exp; }

mclaro_status mclaro_experiment_set_seed(mclaro_experiment* exp,
                                         uint64_t seed) {
  if (!exp) return MCLARO_ERR_INVALID_ARG;
  exp->cfg.seed = seed;
  exp->cfg.raw["seed"] = seed;
  return MCLARO_OK;
}

mclaro_status mclaro_experiment_set_threads(mclaro_experiment* exp,
                                            int threads) {
  if (!exp) return MCLARO_ERR_INVALID_ARG;
  if (threads < 1) {
    exp->last_error = "threads must be >= 1";
    return MCLARO_ERR_INVALID_ARG;
  }
  exp->cfg.threads = threads;
  return MCLARO_OK;
}

mclaro_status mclaro_experiment_set_ablation(mclaro_experiment* exp,
                                             const char* flags) {
  if (!exp) return MCLARO_ERR_INVALID_ARG;
  bool fusion = false, mask_opt = false;
  if (!flags ||
      !mclaro::training::parse_ablation_flags(flags, fusion, mask_opt)) {
    exp->last_error = "ablation flags must be one of 00, 01, 10, 11";
    return MCLARO_ERR_INVALID_ARG;
  }
  exp->cfg.variants = {flags};
  exp->cfg.raw["training"]["variants"] = exp->cfg.variants;
  return MCLARO_OK;
}

mclaro_status mclaro_experiment_run(mclaro_experiment* exp,
                                    const char* stage) {
  if (!exp || !stage) return MCLARO_ERR_INVALID_ARG;
  try {
    Experiment e(exp->cfg, exp->out_dir);
    e.run(stage);
    exp->last_error.clear();
    return MCLARO_OK;
  } catch (const std::exception& e) {
    exp->last_error = e.what();
    return classify(e);
  }
}

const char* mclaro_last_error(const mclaro_experiment* exp) {
  return exp ? exp->last_error.c_str() : g_open_error.c_str();
}

}  // extern "C"
