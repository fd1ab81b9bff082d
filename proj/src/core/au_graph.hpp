#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "core/autodiff.hpp"

namespace mergcn {

using AuSet = std::set<int>;

// Sorted, duplicate-free list of FACS action unit ids; node i of the graph is ids()[i].
class AuVocabulary {
 public:
  explicit AuVocabulary(std::vector<int> ids);

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<int>& ids() const noexcept { return ids_; }
  std::optional<std::size_t> index_of(int id) const;

  bool operator==(const AuVocabulary&) const = default;

 private:
  std::vector<int> ids_;
};

AuVocabulary build_vocabulary(std::span<const AuSet> annotations);

struct AdjacencyOptions {
  bool row_normalize = false;
  std::optional<double> binarize_threshold;
};

// Co-occurrence graph: a[i][j] = P(AU_i | AU_j) = pair_counts[i][j] / counts[j].
// A column whose AU never occurs is all zeros.
struct AdjacencyMatrix {
  Tensor a;
  std::vector<std::size_t> counts;
  std::vector<std::size_t> pair_counts;  // n x n row-major

  std::size_t size() const noexcept { return counts.size(); }
  std::size_t pair(std::size_t i, std::size_t j) const { return pair_counts[i * size() + j]; }
  std::vector<std::size_t> zero_columns() const;
};

AdjacencyMatrix build_adjacency(std::span<const AuSet> annotations, const AuVocabulary& vocab,
                                const AdjacencyOptions& opts = {});

// Rebuilds the matrix from stored counts, e.g. after loading a checkpoint.
AdjacencyMatrix adjacency_from_counts(std::vector<std::size_t> counts, std::vector<std::size_t> pair_counts,
                                      const AdjacencyOptions& opts = {});

// H^0: row i is the one-hot feature of node i.
Tensor one_hot_nodes(const AuVocabulary& vocab);

// "n <count>" / "vocab <ids...>" header followed by one matrix row per line.
std::string export_adjacency_text(const AdjacencyMatrix& adj, const AuVocabulary& vocab);

struct GcnLayerSpec {
  std::size_t in_dim;
  std::size_t out_dim;
};

// Stacked graph convolution H^l = act(A H^{l-1} W^{l-1}), node-major H (n x d).
class GcnStack {
 public:
  static GcnStack build(std::size_t n_nodes, std::span<const std::size_t> dims, double slope, std::uint64_t seed);

  std::size_t depth() const noexcept { return layers_.size(); }
  std::size_t input_dim() const { return layers_.front().in_dim; }
  std::size_t output_dim() const { return layers_.back().out_dim; }
  double slope() const noexcept { return slope_; }
  const std::vector<GcnLayerSpec>& layers() const noexcept { return layers_; }

  Parameter& weight(std::size_t layer) { return params_.at(layer); }
  const Parameter& weight(std::size_t layer) const { return params_.at(layer); }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

 private:
  std::vector<GcnLayerSpec> layers_;
  ParameterSet params_;
  double slope_ = 0.2;
};

Var gcn_layer_forward(Var h, Var adj, Var w, double slope);
Var gcn_stack_forward(Tape& tape, const AdjacencyMatrix& adj, GcnStack& stack);
Var gcn_stack_forward(Tape& tape, const AdjacencyMatrix& adj, const GcnStack& stack);

void log_warning(const std::string& message);
void set_warnings_enabled(bool on);

}  // namespace mergcn
