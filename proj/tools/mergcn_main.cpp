// mergcn: synthesize data, inspect the AU graph, train, evaluate, self-check.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mergcn/mergcn.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// A flag whose value, when given, overrides config key `key`.
struct Binding {
  std::string key;
  std::string value;
  CLI::Option* opt = nullptr;
  const CLI::App* app = nullptr;
};

class Bindings {
 public:
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->key = key;
    b->app = app;
    b->opt = app->add_option(flag, b->value, help);
    items_.push_back(std::move(b));
    return items_.back()->opt;
  }
  // Boolean switch that sets `key` to `value` when present.
  void add_switch(CLI::App* app, const std::string& flag, const std::string& key, const std::string& value,
                  const std::string& help) {
    auto b = std::make_unique<Binding>();
    b->key = key;
    b->value = value;
    b->app = app;
    b->opt = app->add_flag(flag, help);
    items_.push_back(std::move(b));
  }
  void apply(mg_config* cfg, const CLI::App* sub) const {
    for (const auto& b : items_) {
      if (b->app != sub || b->opt->count() == 0) continue;
      check(mg_config_set(cfg, b->key.c_str(), b->value.c_str()));
    }
  }

  static void check(mg_status s) {
    if (s != MG_OK) throw s;
  }

 private:
  std::vector<std::unique_ptr<Binding>> items_;
};

int exit_code_for(mg_status s) {
  if (s == MG_ERR_INVALID_ARGUMENT || s == MG_ERR_EMPTY_SELECTION) return kExitUsage;
  return kExitRuntime;
}

int report_failure(mg_status s) {
  std::cerr << "error: " << mg_last_error() << " (" << mg_status_name(s) << ")\n";
  return exit_code_for(s);
}

using ConfigPtr = std::unique_ptr<mg_config, decltype(&mg_config_destroy)>;
using ManifestPtr = std::unique_ptr<mg_manifest, decltype(&mg_manifest_destroy)>;
using ModelPtr = std::unique_ptr<mg_model, decltype(&mg_model_destroy)>;
using MetricsPtr = std::unique_ptr<mg_metrics, decltype(&mg_metrics_destroy)>;

ManifestPtr load_manifest(const std::string& path) {
  mg_manifest* m = nullptr;
  Bindings::check(mg_manifest_load(path.c_str(), &m));
  return ManifestPtr(m, &mg_manifest_destroy);
}

int cmd_synth(mg_config* cfg, const std::string& out_dir) {
  mg_manifest* raw = nullptr;
  Bindings::check(mg_synthesize(cfg, out_dir.c_str(), &raw));
  ManifestPtr m(raw, &mg_manifest_destroy);
  std::cout << "synthesized " << mg_manifest_record_count(m.get()) << " records (" << mg_manifest_subject_count(m.get())
            << " subjects, " << mg_manifest_class_count(m.get()) << " classes)\n";
  std::cout << "manifest: " << (std::filesystem::path(out_dir) / "manifest.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_graph(mg_config* cfg, const std::string& manifest_path, int fold, const std::string& out_path) {
  ManifestPtr m = load_manifest(manifest_path);
  char* text = nullptr;
  mg_graph_summary summary{};
  Bindings::check(mg_graph_build(cfg, m.get(), fold, &text, &summary));
  const std::string export_text = text;
  mg_string_free(text);
  if (out_path.empty()) {
    std::cout << export_text;
  } else {
    std::ofstream f(out_path);
    f << export_text;
    if (!f) {
      std::cerr << "error: cannot write " << out_path << "\n";
      return kExitRuntime;
    }
    std::cout << "adjacency: " << out_path << "\n";
  }
  std::cout << "n=" << summary.n << " zero_columns=" << summary.zero_columns << " annotations=" << summary.annotations
            << "\n";
  return kExitOk;
}

int cmd_train(mg_config* cfg, const std::string& manifest_path, const std::string& results,
              const std::string& checkpoints) {
  ManifestPtr m = load_manifest(manifest_path);
  mg_cv_summary summary{};
  Bindings::check(mg_cross_validate(cfg, m.get(), results.c_str(), checkpoints.empty() ? nullptr : checkpoints.c_str(),
                                    &summary));
  std::printf("pooled accuracy %.4f over %zu records in %zu folds (%.1f s)\n", summary.pooled_accuracy, summary.n_eval,
              summary.folds, summary.seconds);
  std::cout << "results: " << results << "\n";
  if (!checkpoints.empty()) std::cout << "checkpoints: " << checkpoints << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
             const std::string& subject, const std::string& json_out) {
  mg_model* raw_model = nullptr;
  Bindings::check(mg_model_load(checkpoint.c_str(), &raw_model));
  ModelPtr model(raw_model, &mg_model_destroy);
  ManifestPtr m = load_manifest(manifest_path);
  mg_metrics* raw = nullptr;
  Bindings::check(mg_evaluate(model.get(), m.get(), split.c_str(), subject.empty() ? nullptr : subject.c_str(), &raw));
  MetricsPtr metrics(raw, &mg_metrics_destroy);
  const std::size_t k = mg_metrics_class_count(metrics.get());
  std::printf("accuracy %.4f (n=%zu, split %s)\n", mg_metrics_accuracy(metrics.get()), mg_metrics_count(metrics.get()),
              split.c_str());
  std::cout << "confusion (rows: true, cols: predicted)\n";
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) std::printf("%s%4zu", j ? " " : "", mg_metrics_confusion(metrics.get(), i, j));
    std::printf("\n");
  }
  if (!json_out.empty()) {
    char* text = nullptr;
    Bindings::check(mg_metrics_to_json(metrics.get(), &text));
    std::ofstream f(json_out);
    f << text << "\n";
    mg_string_free(text);
    if (!f) {
      std::cerr << "error: cannot write " << json_out << "\n";
      return kExitRuntime;
    }
  }
  return kExitOk;
}

double config_double(const mg_config* cfg, const char* key, double fallback) {
  char buf[128];
  int found = 0;
  Bindings::check(mg_config_get(cfg, key, buf, sizeof buf, &found));
  if (!found) return fallback;
  try {
    return std::stod(buf);
  } catch (const std::exception&) {
    std::cerr << "error: " << key << " is not a number: " << buf << "\n";
    throw MG_ERR_INVALID_ARGUMENT;
  }
}

int cmd_gradcheck(const mg_config* cfg, bool corrupt) {
  constexpr double kThreshold = 1e-4;
  mg_gradcheck_options opts;
  mg_gradcheck_default_options(&opts);
  opts.eps = config_double(cfg, "eps", opts.eps);
  opts.samples_per_param = static_cast<std::size_t>(config_double(cfg, "samples", static_cast<double>(opts.samples_per_param)));
  opts.seed = static_cast<std::uint64_t>(config_double(cfg, "seed", 0.0));
  {
    char buf[32];
    int found = 0;
    Bindings::check(mg_config_get(cfg, "freeze_activations", buf, sizeof buf, &found));
    if (found) {
      const std::string v = buf;
      opts.freeze_activations = !(v == "0" || v == "false" || v == "no" || v == "off");
    }
  }
  opts.corrupt_backward = corrupt ? 1 : 0;
  mg_gradcheck_report r{};
  Bindings::check(mg_gradcheck(&opts, &r));
  std::printf("eps %g\n", opts.eps);
  std::printf("coordinates checked %zu (kink crossings %zu)\n", r.coordinates_checked, r.kink_crossings);
  std::printf("max relative error %.3e\n", r.max_rel_error);
  std::printf("worst %s[%zu]: analytic %.10e numeric %.10e\n", r.worst_param, r.worst_index, r.worst_analytic,
              r.worst_numeric);
  std::printf("time %.1f s\n", r.seconds);
  const bool ok = r.max_rel_error < kThreshold;
  std::printf("%s (threshold %g)%s\n", ok ? "PASS" : "FAIL", kThreshold, corrupt ? " [corrupted backward]" : "");
  if (!ok) {
    std::fprintf(stderr, "gradient check failed at %s[%zu]\n", r.worst_param, r.worst_index);
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Micro-expression recognition with an AU co-occurrence graph"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  app.add_option("--config", config_file, "Flat key = value config file; flags override it")
      ->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Extra KEY=VALUE config entries (repeatable)");
  app.fallthrough();

  Bindings bind;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  bind.add(synth, "--subjects", "subjects", "Number of subjects");
  bind.add(synth, "--classes", "classes", "Number of classes (1-7)");
  bind.add(synth, "--per", "per", "Sequences per class per subject");
  bind.add(synth, "--t", "t", "Frames per sequence");
  bind.add(synth, "--channels", "channels", "Channels per frame");
  bind.add(synth, "--noise", "noise", "Pixel noise standard deviation");
  bind.add(synth, "--amplitude", "amplitude", "Peak bump intensity");
  bind.add(synth, "--au-dropout", "au_dropout", "Probability of dropping one AU label");
  bind.add(synth, "--seed", "seed", "Generator seed");

  auto* graph = app.add_subcommand("graph", "Build and export the AU co-occurrence graph");
  std::string graph_manifest, graph_out;
  int graph_fold = -1;
  graph->add_option("--manifest", graph_manifest, "Manifest (JSON Lines)")->required();
  graph->add_option("--fold", graph_fold, "Use the training records of this fold of the split plan");
  graph->add_option("--out", graph_out, "Write the adjacency export here instead of stdout");
  bind.add(graph, "--vocab", "vocab", "Fixed AU vocabulary, e.g. 1,2,4");
  bind.add(graph, "--strategy", "strategy", "Split strategy for --fold: loso or kfold");
  bind.add(graph, "--k", "k", "Number of k-fold folds");
  bind.add(graph, "--seed", "seed", "Split seed");

  auto* train = app.add_subcommand("train", "Cross-validated training");
  std::string train_manifest, train_results = "results.json", train_ckpt = "checkpoints";
  train->add_option("--manifest", train_manifest, "Manifest (JSON Lines)")->required();
  train->add_option("--results", train_results, "Results JSON path")->capture_default_str();
  train->add_option("--checkpoints", train_ckpt, "Per-fold checkpoint directory (empty to skip)")->capture_default_str();
  bind.add(train, "--strategy", "strategy", "loso or kfold");
  bind.add(train, "--k", "k", "Number of k-fold folds");
  bind.add(train, "--variant", "variant", "mer-gcn or cnn-only");
  bind.add(train, "--seed", "seed", "Training and split seed");
  bind.add(train, "--split-seed", "split_seed", "Separate k-fold shuffle seed");
  bind.add(train, "--epochs", "epochs", "Epochs per fold");
  bind.add(train, "--lr", "lr", "SGD learning rate");
  bind.add(train, "--momentum", "momentum", "SGD momentum");
  bind.add(train, "--clip-norm", "clip_norm", "Global gradient-norm clip (<= 0 disables)");
  bind.add(train, "--width-scale", "width_scale", "Channel width multiplier in (0, 1]");
  bind.add(train, "--gcn-dims", "gcn_dims", "GCN layer widths, e.g. 128,64");
  bind.add(train, "--vocab", "vocab", "Fixed AU vocabulary shared by all folds");
  bind.add(train, "--jobs", "jobs", "Folds trained in parallel");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_split = "all", eval_subject, eval_json;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint (.mert)")->required();
  eval->add_option("--manifest", eval_manifest, "Manifest (JSON Lines)")->required();
  eval->add_option("--split", eval_split, "all, train or test (ids stored with the checkpoint)")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "train", "test"}));
  eval->add_option("--subject", eval_subject, "Only records of this subject");
  eval->add_option("--json", eval_json, "Also write metrics JSON here");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model's gradients");
  bool corrupt = false;
  bind.add(gradcheck, "--eps", "eps", "Central-difference step");
  bind.add(gradcheck, "--samples", "samples", "Coordinates sampled per parameter");
  bind.add(gradcheck, "--seed", "seed", "Coordinate sampling seed");
  bind.add_switch(gradcheck, "--no-freeze", "freeze_activations", "0",
                  "Re-evaluate rectifiers on perturbed inputs instead of replaying the base pattern");
  gradcheck->add_flag("--corrupt", corrupt, "Plant a wrong backward rule (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  mg_config* raw_cfg = nullptr;
  if (mg_config_create(&raw_cfg) != MG_OK) return report_failure(MG_ERR_INTERNAL);
  ConfigPtr cfg(raw_cfg, &mg_config_destroy);
  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!config_file.empty()) Bindings::check(mg_config_load_file(cfg.get(), config_file.c_str()));
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        std::cerr << "error: --set expects KEY=VALUE, got '" << kv << "'\n";
        return kExitUsage;
      }
      Bindings::check(mg_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
    }
    bind.apply(cfg.get(), sub);
  } catch (mg_status s) {
    std::cerr << "error: " << mg_last_error() << "\n";
    return kExitUsage;
  }

  try {
    if (sub == synth) return cmd_synth(cfg.get(), synth_out);
    if (sub == graph) return cmd_graph(cfg.get(), graph_manifest, graph_fold, graph_out);
    if (sub == train) return cmd_train(cfg.get(), train_manifest, train_results, train_ckpt);
    if (sub == eval) return cmd_eval(eval_ckpt, eval_manifest, eval_split, eval_subject, eval_json);
    if (sub == gradcheck) return cmd_gradcheck(cfg.get(), corrupt);
  } catch (mg_status s) {
    return report_failure(s);
  }
  return kExitUsage;
}
