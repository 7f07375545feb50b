#ifndef SEQSWAP_SEQSWAP_H
#define SEQSWAP_SEQSWAP_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(SEQSWAP_BUILDING)
#define SEQSWAP_API __declspec(dllexport)
#else
#define SEQSWAP_API __declspec(dllimport)
#endif
#else
#define SEQSWAP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum seqswap_status {
  SEQSWAP_OK = 0,
  SEQSWAP_ERR_INTERNAL = 1,
  SEQSWAP_ERR_SHAPE = 2,
  SEQSWAP_ERR_CONTRACT = 3,
  SEQSWAP_ERR_FORMAT = 4,
  SEQSWAP_ERR_DEPENDENCY = 5,
  SEQSWAP_ERR_IO = 6,
  SEQSWAP_ERR_CONFIG = 7,
  SEQSWAP_ERR_ARGUMENT = 8
} seqswap_status;

typedef struct seqswap_model seqswap_model;

/* Receives progress lines while a command runs. */
typedef void (*seqswap_progress_fn)(const char* line, void* user);

SEQSWAP_API const char* seqswap_version(void);
SEQSWAP_API const char* seqswap_status_name(int status);

/* Message of the last failed call on the calling thread; empty after success. */
SEQSWAP_API const char* seqswap_last_error(void);

/* Command names in order; NULL past the end. */
SEQSWAP_API const char* seqswap_command_name(size_t index);

/* Runs one experiment command. `seed` overrides the config seed when not
   NULL; `out_dir` defaults to "out" when NULL. */
SEQSWAP_API int seqswap_run(const char* command, const char* config_path, const uint64_t* seed,
                            const char* out_dir, seqswap_progress_fn progress, void* user);

/* Validates a config file without running anything. */
SEQSWAP_API int seqswap_check_config(const char* config_path);

/* `config_json` is a model config object, e.g. {"layers":4,"dim":32}. */
SEQSWAP_API int seqswap_model_create(const char* config_json, uint64_t seed, seqswap_model** out);
SEQSWAP_API int seqswap_model_load(const char* path, seqswap_model** out);
SEQSWAP_API int seqswap_model_save(const seqswap_model* model, const char* path);
SEQSWAP_API void seqswap_model_free(seqswap_model* model);

typedef struct seqswap_model_info {
  size_t layers;
  size_t dim;
  size_t tokens;
  size_t classes;
  size_t image_values; /* doubles per input image */
  size_t parameters;
  int halting;
} seqswap_model_info;

SEQSWAP_API int seqswap_model_describe(const seqswap_model* model, seqswap_model_info* info);

/* Logits for `batch` images of image_values doubles each, written row-major
   into `logits` (batch * classes values). */
SEQSWAP_API int seqswap_model_classify(const seqswap_model* model, const double* images, size_t batch,
                                       double* logits, size_t logits_len);

#ifdef __cplusplus
}
#endif

#endif
