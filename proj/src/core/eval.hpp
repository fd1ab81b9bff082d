#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "core/data.hpp"
#include "core/model.hpp"
#include "json.hpp"

namespace mergcn {

enum class SplitStrategy { Loso, KFold };

struct Fold {
  std::string label;  // held-out subject for LOSO, "fold<i>" for k-fold
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

struct SplitPlan {
  SplitStrategy strategy = SplitStrategy::KFold;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

SplitPlan loso_splits(const DatasetManifest& manifest);
// Seeded, class-stratified: per-class test counts across folds differ by at most one.
SplitPlan kfold_splits(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed);

std::vector<std::size_t> resolve_ids(const DatasetManifest& manifest, const std::vector<std::string>& ids);

struct Metrics {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_recall;
  std::size_t n_eval = 0;

  static Metrics from_confusion(std::vector<std::vector<std::size_t>> confusion);
};

struct TrainConfig {
  std::size_t epochs = 200;
  double lr = 1e-3;
  double momentum = 0.9;
  double clip_norm = 5.0;  // <= 0 disables clipping
  double width_scale = 1.0;
  std::vector<std::size_t> gcn_dims;
  double gcn_slope = 0.2;
  double backbone_slope = 0.0;
  double head_init_scale = 0.01;
  bool channel_affine = false;
  bool class_weighting = false;
  std::optional<std::vector<int>> fixed_vocab;
  AdjacencyOptions adjacency;
  std::uint64_t seed = 1;
  ModelVariant variant = ModelVariant::MerGcn;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);

struct TrainResult {
  MerGcnModel model;
  std::vector<double> loss_history;  // mean loss per epoch
  std::size_t steps = 0;
  double max_post_clip_norm = 0.0;
};

// Return false to stop after this epoch.
using EpochCallback = std::function<bool(std::size_t epoch, double mean_loss, MerGcnModel& model)>;

// Single-sequence SGD over `train_indices` in a seeded shuffled order per epoch.
// Vocabulary and adjacency come from the training records only.
TrainResult train(const DatasetManifest& manifest, std::span<const std::size_t> train_indices,
                  const TrainConfig& config, SequenceCache& cache, const EpochCallback& on_epoch = {});

Metrics evaluate(const MerGcnModel& model, const DatasetManifest& manifest, std::span<const std::size_t> indices,
                 SequenceCache& cache);

struct FoldResult {
  std::size_t index = 0;
  std::string label;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  Metrics test;
  Metrics train_final;
  std::vector<double> loss_history;
  double max_post_clip_norm = 0.0;
  std::vector<std::size_t> adjacency_counts;
  double seconds = 0.0;
  std::string checkpoint;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  Metrics pooled;
  double seconds = 0.0;
};

struct CrossValidationOptions {
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> checkpoint_dir;
  nlohmann::json config_echo = nlohmann::json::object();
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

CrossValidationResult cross_validate(const DatasetManifest& manifest, const SplitPlan& plan, const TrainConfig& config,
                                     const CrossValidationOptions& options = {});

nlohmann::json metrics_to_json(const Metrics& m);
nlohmann::json results_to_json(const CrossValidationResult& result, const SplitPlan& plan, const TrainConfig& config,
                               const nlohmann::json& config_echo);

std::string strategy_name(SplitStrategy s);

}  // namespace mergcn
