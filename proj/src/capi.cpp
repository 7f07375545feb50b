#include "seqswap/seqswap.h"

#include <json.hpp>

#include <algorithm>
#include <exception>
#include <stdexcept>
#include <string>

#include "seqswap/checkpoint.hpp"
#include "seqswap/config.hpp"
#include "seqswap/error.hpp"
#include "seqswap/experiments.hpp"

struct seqswap_model {
  seqswap::Model model;
};

namespace {

thread_local std::string g_last_error;

template <class F>
int guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return SEQSWAP_OK;
  } catch (const seqswap::Error& e) {
    g_last_error = e.what();
    return static_cast<int>(e.category());
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return SEQSWAP_ERR_CONFIG;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return SEQSWAP_ERR_ARGUMENT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SEQSWAP_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return SEQSWAP_ERR_INTERNAL;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

int argument_error(const char* what) {
  g_last_error = what;
  return SEQSWAP_ERR_ARGUMENT;
}

}  // namespace

extern "C" {

const char* seqswap_version(void) { return "1.0.0"; }

const char* seqswap_status_name(int status) {
  switch (status) {
    case SEQSWAP_OK: return "ok";
    case SEQSWAP_ERR_INTERNAL: return "internal error";
    case SEQSWAP_ERR_ARGUMENT: return "invalid argument";
    default:
      if (status >= 2 && status <= 7) return seqswap::category_name(static_cast<seqswap::ErrorCategory>(status));
      return "unknown status";
  }
}

const char* seqswap_last_error(void) { return g_last_error.c_str(); }

const char* seqswap_command_name(size_t index) {
  const auto& names = seqswap::command_names();
  return index < names.size() ? names[index].c_str() : nullptr;
}

int seqswap_run(const char* command, const char* config_path, const uint64_t* seed, const char* out_dir,
                seqswap_progress_fn progress, void* user) {
  if (command == nullptr || config_path == nullptr) return argument_error("command and config path are required");
  return guarded([&] {
    seqswap::Workspace ws;
    ws.config = seqswap::load_config(config_path);
    if (seed) ws.config.seed = *seed;
    ws.root = out_dir ? out_dir : "out";
    if (progress) ws.progress = [progress, user](const std::string& line) { progress(line.c_str(), user); };
    seqswap::run_command(command, ws);
  });
}

int seqswap_check_config(const char* config_path) {
  if (config_path == nullptr) return argument_error("config path is required");
  return guarded([&] { (void)seqswap::load_config(config_path); });
}

int seqswap_model_create(const char* config_json, uint64_t seed, seqswap_model** out) {
  if (config_json == nullptr || out == nullptr) return argument_error("config and output handle are required");
  *out = nullptr;
  return guarded([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(config_json);
    } catch (const nlohmann::json::exception& e) {
      throw seqswap::ConfigError(std::string("model config: ") + e.what());
    }
    seqswap::Rng rng(seqswap::mix_seed(seed, seqswap::stream::kInit));
    *out = new seqswap_model{seqswap::init_model(seqswap::parse_model_config(j), rng)};
  });
}

int seqswap_model_load(const char* path, seqswap_model** out) {
  if (path == nullptr || out == nullptr) return argument_error("path and output handle are required");
  *out = nullptr;
  return guarded([&] { *out = new seqswap_model{seqswap::load_checkpoint(path)}; });
}

int seqswap_model_save(const seqswap_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return argument_error("model and path are required");
  return guarded([&] { seqswap::save_checkpoint(model->model, path); });
}

void seqswap_model_free(seqswap_model* model) { delete model; }

int seqswap_model_describe(const seqswap_model* model, seqswap_model_info* info) {
  if (model == nullptr || info == nullptr) return argument_error("model and info are required");
  return guarded([&] {
    const auto& c = model->model.config;
    info->layers = c.layers;
    info->dim = c.dim;
    info->tokens = c.tokens();
    info->classes = c.classes;
    info->image_values = c.image_size();
    info->parameters = seqswap::parameter_count(model->model);
    info->halting = c.halting ? 1 : 0;
  });
}

int seqswap_model_classify(const seqswap_model* model, const double* images, size_t batch, double* logits,
                           size_t logits_len) {
  if (model == nullptr || images == nullptr || logits == nullptr) {
    return argument_error("model, images and logits are required");
  }
  return guarded([&] {
    const auto& c = model->model.config;
    require(batch > 0, "batch must be positive");
    if (logits_len < batch * c.classes) {
      throw seqswap::ShapeError("logits buffer holds " + std::to_string(logits_len) + " values, need " +
                                std::to_string(batch * c.classes));
    }
    seqswap::NoGradScope off;
    const auto r = seqswap::forward(model->model, {images, batch * c.image_size()}, batch);
    std::copy(r.logits.data().begin(), r.logits.data().end(), logits);
  });
}

}  // extern "C"
