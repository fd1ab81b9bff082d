#include "mergcn/mergcn.h"

#include <chrono>
#include <cstring>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <new>
#include <string>

#include "core/config.hpp"
#include "core/data.hpp"
#include "core/error.hpp"
#include "core/eval.hpp"
#include "core/model.hpp"
#include "core/selfcheck.hpp"

using namespace mergcn;

struct mg_config {
  KeyValueConfig kv;
};

struct mg_manifest {
  DatasetManifest manifest;
};

struct mg_model {
  MerGcnModel model;
  nlohmann::json sidecar;
};

struct mg_metrics {
  Metrics metrics;
};

namespace {

thread_local std::string g_last_error;

mg_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return MG_ERR_INVALID_ARGUMENT;
    case ErrorCode::Shape: return MG_ERR_SHAPE;
    case ErrorCode::Io: return MG_ERR_IO;
    case ErrorCode::Parse: return MG_ERR_PARSE;
    case ErrorCode::Validation: return MG_ERR_VALIDATION;
    case ErrorCode::Numeric: return MG_ERR_NUMERIC;
    case ErrorCode::Mismatch: return MG_ERR_MISMATCH;
    case ErrorCode::EmptySelection: return MG_ERR_EMPTY_SELECTION;
    case ErrorCode::CheckFailed: return MG_ERR_CHECK_FAILED;
  }
  return MG_ERR_INTERNAL;
}

mg_status set_error(mg_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

template <typename Fn>
mg_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return MG_OK;
  } catch (const Error& e) {
    return set_error(to_status(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return set_error(MG_ERR_PARSE, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(MG_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(MG_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(MG_ERR_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (!p) fail(ErrorCode::InvalidArgument, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::vector<std::size_t> ids_from_sidecar(const DatasetManifest& manifest, const nlohmann::json& sidecar,
                                          const char* key) {
  if (!sidecar.contains(key)) {
    fail(ErrorCode::InvalidArgument, std::string("checkpoint sidecar has no '") + key + "' record list");
  }
  std::vector<std::size_t> out;
  for (const auto& id : sidecar.at(key)) {
    const auto idx = manifest.find(id.get<std::string>());
    if (!idx) fail(ErrorCode::Mismatch, "record '" + id.get<std::string>() + "' from the checkpoint is not in the manifest");
    out.push_back(*idx);
  }
  return out;
}

}  // namespace

extern "C" {

const char* mg_last_error(void) { return g_last_error.c_str(); }

const char* mg_status_name(mg_status status) {
  switch (status) {
    case MG_OK: return "ok";
    case MG_ERR_INVALID_ARGUMENT: return "invalid argument";
    case MG_ERR_SHAPE: return "shape error";
    case MG_ERR_IO: return "i/o error";
    case MG_ERR_PARSE: return "parse error";
    case MG_ERR_VALIDATION: return "validation error";
    case MG_ERR_NUMERIC: return "numeric error";
    case MG_ERR_MISMATCH: return "mismatch";
    case MG_ERR_EMPTY_SELECTION: return "empty selection";
    case MG_ERR_CHECK_FAILED: return "check failed";
    case MG_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* mg_version(void) { return "0.1.0"; }

void mg_string_free(char* s) { std::free(s); }

mg_status mg_config_create(mg_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new mg_config();
  });
}

void mg_config_destroy(mg_config* config) { delete config; }

mg_status mg_config_set(mg_config* config, const char* key, const char* value) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(value, "value");
    config->kv.set(key, value);
  });
}

mg_status mg_config_load_file(mg_config* config, const char* path) {
  return guarded([&] {
    require(config, "config");
    require(path, "path");
    config->kv.load_file(path);
  });
}

mg_status mg_config_get(const mg_config* config, const char* key, char* buf, size_t buf_len, int* found) {
  return guarded([&] {
    require(config, "config");
    require(key, "key");
    require(found, "found");
    const auto v = config->kv.get(key);
    *found = v ? 1 : 0;
    if (!v) return;
    if (!buf || buf_len <= v->size()) {
      fail(ErrorCode::InvalidArgument, "buffer too small for value of '" + std::string(key) + "'");
    }
    std::memcpy(buf, v->c_str(), v->size() + 1);
  });
}

mg_status mg_config_to_json(const mg_config* config, char** json_out) {
  return guarded([&] {
    require(config, "config");
    require(json_out, "json_out");
    *json_out = dup_string(config->kv.to_json().dump(2));
  });
}

mg_status mg_synthesize(const mg_config* config, const char* out_dir, mg_manifest** out) {
  return guarded([&] {
    require(config, "config");
    require(out_dir, "out_dir");
    DatasetManifest m = generate_synthetic(synthetic_config_from(config->kv), out_dir);
    m.header["config"] = config->kv.to_json();
    write_manifest(std::filesystem::path(out_dir) / "manifest.jsonl", m);
    if (out) *out = new mg_manifest{std::move(m)};
  });
}

mg_status mg_manifest_load(const char* path, mg_manifest** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new mg_manifest{load_manifest(path)};
  });
}

void mg_manifest_destroy(mg_manifest* manifest) { delete manifest; }

size_t mg_manifest_record_count(const mg_manifest* manifest) {
  return manifest ? manifest->manifest.records.size() : 0;
}

size_t mg_manifest_class_count(const mg_manifest* manifest) {
  return manifest ? manifest->manifest.class_names.size() : 0;
}

size_t mg_manifest_subject_count(const mg_manifest* manifest) {
  return manifest ? manifest->manifest.subjects().size() : 0;
}

mg_status mg_graph_build(const mg_config* config, const mg_manifest* manifest, int fold, char** text_out,
                         mg_graph_summary* summary) {
  return guarded([&] {
    require(config, "config");
    require(manifest, "manifest");
    const DatasetManifest& m = manifest->manifest;
    std::vector<std::size_t> indices;
    if (fold < 0) {
      indices = m.all_indices();
    } else {
      const SplitPlan plan = split_plan_from(config->kv, m);
      if (static_cast<std::size_t>(fold) >= plan.folds.size()) {
        fail(ErrorCode::InvalidArgument, "fold " + std::to_string(fold) + " out of range: plan has " +
                                             std::to_string(plan.folds.size()) + " folds");
      }
      indices = resolve_ids(m, plan.folds[static_cast<std::size_t>(fold)].train_ids);
    }
    const auto annotations = m.annotations(indices);
    const TrainConfig tc = train_config_from(config->kv);
    const AuVocabulary vocab = tc.fixed_vocab ? AuVocabulary(*tc.fixed_vocab) : build_vocabulary(annotations);
    const AdjacencyMatrix adj = build_adjacency(annotations, vocab, tc.adjacency);
    if (text_out) *text_out = dup_string(export_adjacency_text(adj, vocab));
    if (summary) {
      summary->n = vocab.size();
      summary->zero_columns = adj.zero_columns().size();
      summary->annotations = annotations.size();
    }
  });
}

mg_status mg_cross_validate(const mg_config* config, const mg_manifest* manifest, const char* results_path,
                            const char* checkpoint_dir, mg_cv_summary* summary) {
  return guarded([&] {
    require(config, "config");
    require(manifest, "manifest");
    const DatasetManifest& m = manifest->manifest;
    const TrainConfig tc = train_config_from(config->kv);
    const SplitPlan plan = split_plan_from(config->kv, m);
    CrossValidationOptions opts;
    opts.jobs = config->kv.get_size("jobs", 1);
    if (checkpoint_dir) opts.checkpoint_dir = std::filesystem::path(checkpoint_dir);
    opts.config_echo = config->kv.to_json();
    const CrossValidationResult result = cross_validate(m, plan, tc, opts);
    if (results_path) {
      const nlohmann::json j = results_to_json(result, plan, tc, opts.config_echo);
      const std::filesystem::path p(results_path);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      std::ofstream f(p);
      if (!f) fail(ErrorCode::Io, "cannot write results file " + p.string());
      f << j.dump(2) << '\n';
      if (!f) fail(ErrorCode::Io, "failed writing results file " + p.string());
    }
    if (summary) {
      summary->folds = result.folds.size();
      summary->n_eval = result.pooled.n_eval;
      summary->pooled_accuracy = result.pooled.accuracy;
      summary->seconds = result.seconds;
    }
  });
}

mg_status mg_model_load(const char* checkpoint_path, mg_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    *out = new mg_model{std::move(ck.model), std::move(ck.sidecar)};
  });
}

void mg_model_destroy(mg_model* model) { delete model; }

size_t mg_model_class_count(const mg_model* model) { return model ? model->model.n_classes() : 0; }

size_t mg_model_au_count(const mg_model* model) { return model ? model->model.vocab().size() : 0; }

mg_status mg_model_predict(const mg_model* model, const mg_manifest* manifest, size_t record_index,
                           size_t* class_id, double* probabilities) {
  return guarded([&] {
    require(model, "model");
    require(manifest, "manifest");
    require(class_id, "class_id");
    const DatasetManifest& m = manifest->manifest;
    if (record_index >= m.records.size()) {
      fail(ErrorCode::InvalidArgument, "record index " + std::to_string(record_index) + " out of range");
    }
    const Tensor seq = load_sequence(m, m.records[record_index]);
    const Prediction p = model->model.forward_prediction(seq);
    *class_id = p.class_id;
    if (probabilities) std::copy(p.probabilities.begin(), p.probabilities.end(), probabilities);
  });
}

mg_status mg_evaluate(const mg_model* model, const mg_manifest* manifest, const char* split, const char* subject,
                      mg_metrics** out) {
  return guarded([&] {
    require(model, "model");
    require(manifest, "manifest");
    require(out, "out");
    const DatasetManifest& m = manifest->manifest;
    const std::string which = split ? split : "all";
    std::vector<std::size_t> indices;
    if (which == "all") {
      indices = m.all_indices();
    } else if (which == "train") {
      indices = ids_from_sidecar(m, model->sidecar, "train_ids");
    } else if (which == "test") {
      indices = ids_from_sidecar(m, model->sidecar, "test_ids");
    } else {
      fail(ErrorCode::InvalidArgument, "unknown split '" + which + "' (expected all, train or test)");
    }
    if (subject) {
      std::erase_if(indices, [&](std::size_t i) { return m.records[i].subject != subject; });
    }
    if (indices.empty()) {
      fail(ErrorCode::EmptySelection, "no records selected (split " + which +
                                          (subject ? ", subject " + std::string(subject) : std::string()) + ")");
    }
    SequenceCache cache(m);
    *out = new mg_metrics{evaluate(model->model, m, indices, cache)};
  });
}

void mg_metrics_destroy(mg_metrics* metrics) { delete metrics; }

double mg_metrics_accuracy(const mg_metrics* metrics) { return metrics ? metrics->metrics.accuracy : 0.0; }

size_t mg_metrics_count(const mg_metrics* metrics) { return metrics ? metrics->metrics.n_eval : 0; }

size_t mg_metrics_class_count(const mg_metrics* metrics) { return metrics ? metrics->metrics.confusion.size() : 0; }

size_t mg_metrics_confusion(const mg_metrics* metrics, size_t true_class, size_t predicted_class) {
  if (!metrics) return 0;
  const auto& c = metrics->metrics.confusion;
  if (true_class >= c.size() || predicted_class >= c.size()) return 0;
  return c[true_class][predicted_class];
}

mg_status mg_metrics_to_json(const mg_metrics* metrics, char** json_out) {
  return guarded([&] {
    require(metrics, "metrics");
    require(json_out, "json_out");
    *json_out = dup_string(metrics_to_json(metrics->metrics).dump(2));
  });
}

void mg_gradcheck_default_options(mg_gradcheck_options* options) {
  if (!options) return;
  const GradCheckOptions d;
  options->eps = d.eps;
  options->samples_per_param = d.samples_per_param;
  options->seed = d.seed;
  options->freeze_activations = d.freeze_activation_pattern ? 1 : 0;
  options->corrupt_backward = 0;
}

mg_status mg_gradcheck(const mg_gradcheck_options* options, mg_gradcheck_report* report) {
  return guarded([&] {
    require(report, "report");
    mg_gradcheck_options o;
    mg_gradcheck_default_options(&o);
    if (options) o = *options;
    GradCheckOptions opts;
    opts.eps = o.eps;
    opts.samples_per_param = o.samples_per_param;
    opts.seed = o.seed;
    opts.freeze_activation_pattern = o.freeze_activations != 0;
    opts.corrupt_backward = o.corrupt_backward != 0;
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport r = tiny_model_grad_check(opts);
    *report = mg_gradcheck_report{};
    report->max_rel_error = r.max_rel_error;
    std::strncpy(report->worst_param, r.worst_param.c_str(), sizeof(report->worst_param) - 1);
    report->worst_index = r.worst_index;
    report->worst_analytic = r.worst_analytic;
    report->worst_numeric = r.worst_numeric;
    report->coordinates_checked = r.coordinates_checked;
    report->kink_crossings = r.kink_crossings;
    report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
}

}  // extern "C"
