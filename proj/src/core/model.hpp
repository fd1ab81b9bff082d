#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core/au_graph.hpp"
#include "core/backbone.hpp"
#include "json.hpp"

namespace mergcn {

enum class ModelVariant { MerGcn, CnnOnly };

std::string variant_name(ModelVariant v);
ModelVariant parse_variant(const std::string& name);

struct ModelConfig {
  BackboneConfig backbone;
  std::vector<std::size_t> gcn_dims;  // empty: {1024, 512} scaled by width_scale
  double gcn_slope = 0.2;
  std::size_t n_classes = 5;
  ModelVariant variant = ModelVariant::MerGcn;
  // Head weights are drawn with std head_init_scale * sqrt(2 / fan_in).
  double head_init_scale = 0.01;
  AdjacencyOptions adjacency;
};

std::vector<std::size_t> default_gcn_dims(double width_scale);

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::vector<double> au_scores;  // empty for the CNN-only variant
  std::size_t class_id = 0;
};

std::size_t argmax_first(std::span<const double> values);
Prediction make_prediction(std::span<const double> logits, std::span<const double> au_scores);

// au_scores[i] = <row i of h_last, feature>.
Var fuse(Var h_last, Var feature);

struct ForwardOutput {
  Var feature;
  Var au_scores;  // unbound for the CNN-only variant
  Var logits;
};

class MerGcnModel {
 public:
  static MerGcnModel build(const ModelConfig& config, AuVocabulary vocab, AdjacencyMatrix adjacency,
                           std::vector<std::string> class_names, std::uint64_t seed);

  ForwardOutput forward(Tape& tape, const Tensor& seq);
  ForwardOutput forward(Tape& tape, const Tensor& seq) const;

  Var loss(Tape& tape, const Tensor& seq, std::size_t label);
  Prediction forward_prediction(const Tensor& seq) const;
  std::size_t predict(const Tensor& seq) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find_parameter(const std::string& name);

  const ModelConfig& config() const noexcept { return config_; }
  const AuVocabulary& vocab() const noexcept { return vocab_; }
  const AdjacencyMatrix& adjacency() const noexcept { return adjacency_; }
  AdjacencyMatrix& adjacency() noexcept { return adjacency_; }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  std::size_t n_classes() const noexcept { return config_.n_classes; }
  std::uint64_t seed() const noexcept { return seed_; }

  BackboneModel& backbone() noexcept { return backbone_; }
  const BackboneModel& backbone() const noexcept { return backbone_; }
  GcnStack* gcn() noexcept { return gcn_ ? &*gcn_ : nullptr; }
  const GcnStack* gcn() const noexcept { return gcn_ ? &*gcn_ : nullptr; }
  Parameter& head_weight() { return head_.at(0); }
  Parameter& head_bias() { return head_.at(1); }
  const Parameter& head_weight() const { return head_.at(0); }
  const Parameter& head_bias() const { return head_.at(1); }

 private:
  template <typename Self>
  static ForwardOutput forward_impl(Self& self, Tape& tape, const Tensor& seq);

  ModelConfig config_;
  AuVocabulary vocab_{std::vector<int>{1}};
  AdjacencyMatrix adjacency_;
  std::vector<std::string> class_names_;
  std::uint64_t seed_ = 0;
  BackboneModel backbone_;
  std::optional<GcnStack> gcn_;
  ParameterSet head_;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Writes `path` (MERT container) and `path` + ".json" (config sidecar).
// `extra` is merged into the sidecar.
void save_checkpoint(const std::filesystem::path& path, const MerGcnModel& model,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
  MerGcnModel model;
  nlohmann::json sidecar;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace mergcn
