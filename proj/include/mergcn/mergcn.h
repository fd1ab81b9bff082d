#ifndef MERGCN_MERGCN_H
#define MERGCN_MERGCN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(MERGCN_BUILDING_LIBRARY)
#define MG_API __declspec(dllexport)
#else
#define MG_API __declspec(dllimport)
#endif
#else
#define MG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mg_status {
  MG_OK = 0,
  MG_ERR_INVALID_ARGUMENT = 1,
  MG_ERR_SHAPE = 2,
  MG_ERR_IO = 3,
  MG_ERR_PARSE = 4,
  MG_ERR_VALIDATION = 5,
  MG_ERR_NUMERIC = 6,
  MG_ERR_MISMATCH = 7,
  MG_ERR_EMPTY_SELECTION = 8,
  MG_ERR_CHECK_FAILED = 9,
  MG_ERR_INTERNAL = 10
} mg_status;

/* Message for the most recent failure on the calling thread ("" if none). */
MG_API const char* mg_last_error(void);
MG_API const char* mg_status_name(mg_status status);
MG_API const char* mg_version(void);

/* Strings returned through char** out-parameters are owned by the caller. */
MG_API void mg_string_free(char* s);

/* ---- configuration: flat key = value pairs ---- */

typedef struct mg_config mg_config;

MG_API mg_status mg_config_create(mg_config** out);
MG_API void mg_config_destroy(mg_config* config);
/* Unknown keys are rejected. Later calls override earlier ones. */
MG_API mg_status mg_config_set(mg_config* config, const char* key, const char* value);
MG_API mg_status mg_config_load_file(mg_config* config, const char* path);
/* Copies the value into buf (NUL-terminated); *found is 0 when unset. */
MG_API mg_status mg_config_get(const mg_config* config, const char* key, char* buf, size_t buf_len, int* found);
MG_API mg_status mg_config_to_json(const mg_config* config, char** json_out);

/* ---- datasets ---- */

typedef struct mg_manifest mg_manifest;

/* Writes frames/<id>.mert and manifest.jsonl under out_dir. `out` may be NULL. */
MG_API mg_status mg_synthesize(const mg_config* config, const char* out_dir, mg_manifest** out);
MG_API mg_status mg_manifest_load(const char* path, mg_manifest** out);
MG_API void mg_manifest_destroy(mg_manifest* manifest);
MG_API size_t mg_manifest_record_count(const mg_manifest* manifest);
MG_API size_t mg_manifest_class_count(const mg_manifest* manifest);
MG_API size_t mg_manifest_subject_count(const mg_manifest* manifest);

/* ---- AU graph ---- */

typedef struct mg_graph_summary {
  size_t n;
  size_t zero_columns;
  size_t annotations;
} mg_graph_summary;

/* Builds vocabulary and adjacency from the training records of fold `fold`
 * of the configured split plan, or from every record when fold < 0. The
 * plain-text export is returned through text_out (may be NULL). */
MG_API mg_status mg_graph_build(const mg_config* config, const mg_manifest* manifest, int fold, char** text_out,
                                mg_graph_summary* summary);

/* ---- training ---- */

typedef struct mg_cv_summary {
  size_t folds;
  size_t n_eval;
  double pooled_accuracy;
  double seconds;
} mg_cv_summary;

/* Runs cross-validation with the configured strategy. results_path and
 * checkpoint_dir may be NULL. `echo` (may be NULL) is the effective config
 * embedded verbatim in the results and checkpoint sidecars. */
MG_API mg_status mg_cross_validate(const mg_config* config, const mg_manifest* manifest, const char* results_path,
                                   const char* checkpoint_dir, mg_cv_summary* summary);

/* ---- models and evaluation ---- */

typedef struct mg_model mg_model;
typedef struct mg_metrics mg_metrics;

MG_API mg_status mg_model_load(const char* checkpoint_path, mg_model** out);
MG_API void mg_model_destroy(mg_model* model);
MG_API size_t mg_model_class_count(const mg_model* model);
MG_API size_t mg_model_au_count(const mg_model* model);
/* Predicts one manifest record. probabilities may be NULL; otherwise it must
 * hold mg_model_class_count() entries. */
MG_API mg_status mg_model_predict(const mg_model* model, const mg_manifest* manifest, size_t record_index,
                                  size_t* class_id, double* probabilities);

/* split: "all", "train" or "test" (ids recorded with the checkpoint).
 * subject: restrict to one subject, or NULL. An empty selection returns
 * MG_ERR_EMPTY_SELECTION. */
MG_API mg_status mg_evaluate(const mg_model* model, const mg_manifest* manifest, const char* split,
                             const char* subject, mg_metrics** out);
MG_API void mg_metrics_destroy(mg_metrics* metrics);
MG_API double mg_metrics_accuracy(const mg_metrics* metrics);
MG_API size_t mg_metrics_count(const mg_metrics* metrics);
MG_API size_t mg_metrics_class_count(const mg_metrics* metrics);
MG_API size_t mg_metrics_confusion(const mg_metrics* metrics, size_t true_class, size_t predicted_class);
MG_API mg_status mg_metrics_to_json(const mg_metrics* metrics, char** json_out);

/* ---- self-check ---- */

typedef struct mg_gradcheck_options {
  double eps;
  size_t samples_per_param;
  uint64_t seed;
  int freeze_activations;
  int corrupt_backward;
} mg_gradcheck_options;

typedef struct mg_gradcheck_report {
  double max_rel_error;
  char worst_param[128];
  size_t worst_index;
  double worst_analytic;
  double worst_numeric;
  size_t coordinates_checked;
  size_t kink_crossings;
  double seconds;
} mg_gradcheck_report;

MG_API void mg_gradcheck_default_options(mg_gradcheck_options* options);
/* Gradient check of a tiny end-to-end model (2 AUs, width scale 0.125, T=8,
 * 3 classes, one channel). */
MG_API mg_status mg_gradcheck(const mg_gradcheck_options* options, mg_gradcheck_report* report);

#ifdef __cplusplus
}
#endif

#endif
