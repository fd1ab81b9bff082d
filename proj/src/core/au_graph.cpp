#include "core/au_graph.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <iostream>
#include <random>

#include "core/error.hpp"

namespace mergcn {

namespace {

std::atomic<bool> g_warnings{true};

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void log_warning(const std::string& message) {
  if (g_warnings.load()) std::cerr << "warning: " << message << '\n';
}

void set_warnings_enabled(bool on) { g_warnings.store(on); }

AuVocabulary::AuVocabulary(std::vector<int> ids) : ids_(std::move(ids)) {
  if (ids_.empty()) fail(ErrorCode::InvalidArgument, "AU vocabulary must not be empty");
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] <= 0) fail(ErrorCode::InvalidArgument, "AU ids must be positive, got " + std::to_string(ids_[i]));
    if (i > 0 && ids_[i] <= ids_[i - 1]) {
      fail(ErrorCode::InvalidArgument, "AU vocabulary must be strictly increasing");
    }
  }
}

std::optional<std::size_t> AuVocabulary::index_of(int id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

AuVocabulary build_vocabulary(std::span<const AuSet> annotations) {
  if (annotations.empty()) fail(ErrorCode::InvalidArgument, "cannot build a vocabulary from zero annotations");
  AuSet all;
  for (std::size_t k = 0; k < annotations.size(); ++k) {
    if (annotations[k].empty()) {
      fail(ErrorCode::InvalidArgument, "annotation " + std::to_string(k) + " has no AUs");
    }
    all.insert(annotations[k].begin(), annotations[k].end());
  }
  return AuVocabulary(std::vector<int>(all.begin(), all.end()));
}

std::vector<std::size_t> AdjacencyMatrix::zero_columns() const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] == 0) out.push_back(j);
  }
  return out;
}

AdjacencyMatrix adjacency_from_counts(std::vector<std::size_t> counts, std::vector<std::size_t> pair_counts,
                                      const AdjacencyOptions& opts) {
  const std::size_t n = counts.size();
  if (n == 0 || pair_counts.size() != n * n) fail(ErrorCode::Shape, "adjacency counts have inconsistent sizes");
  AdjacencyMatrix adj;
  adj.a = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (counts[j] == 0) continue;
      adj.a[i * n + j] = static_cast<double>(pair_counts[i * n + j]) / static_cast<double>(counts[j]);
    }
  }
  if (opts.binarize_threshold) {
    for (double& v : adj.a.values()) v = v >= *opts.binarize_threshold ? 1.0 : 0.0;
  }
  if (opts.row_normalize) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += adj.a[i * n + j];
      if (s > 0.0) {
        for (std::size_t j = 0; j < n; ++j) adj.a[i * n + j] /= s;
      }
    }
  }
  adj.counts = std::move(counts);
  adj.pair_counts = std::move(pair_counts);
  return adj;
}

AdjacencyMatrix build_adjacency(std::span<const AuSet> annotations, const AuVocabulary& vocab,
                                const AdjacencyOptions& opts) {
  const std::size_t n = vocab.size();
  std::vector<std::size_t> counts(n, 0);
  std::vector<std::size_t> pairs(n * n, 0);
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < annotations.size(); ++k) {
    idx.clear();
    for (int au : annotations[k]) {
      auto i = vocab.index_of(au);
      if (!i) {
        fail(ErrorCode::Validation, "AU " + std::to_string(au) + " in annotation " + std::to_string(k) +
                                        " is not in the vocabulary");
      }
      idx.push_back(*i);
    }
    for (std::size_t i : idx) {
      ++counts[i];
      for (std::size_t j : idx) ++pairs[i * n + j];
    }
  }
  AdjacencyMatrix adj = adjacency_from_counts(std::move(counts), std::move(pairs), opts);
  for (std::size_t j : adj.zero_columns()) {
    log_warning("AU " + std::to_string(vocab.ids()[j]) +
                " never occurs; its adjacency column is zero (consider pruning the vocabulary)");
  }
  return adj;
}

Tensor one_hot_nodes(const AuVocabulary& vocab) { return Tensor::identity(vocab.size()); }

std::string export_adjacency_text(const AdjacencyMatrix& adj, const AuVocabulary& vocab) {
  const std::size_t n = adj.size();
  if (vocab.size() != n) fail(ErrorCode::Mismatch, "vocabulary size does not match adjacency size");
  std::string out = "n " + std::to_string(n) + "\nvocab";
  for (int id : vocab.ids()) out += " " + std::to_string(id);
  out += '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out += ' ';
      out += format_double(adj.a[i * n + j]);
    }
    out += '\n';
  }
  return out;
}

GcnStack GcnStack::build(std::size_t n_nodes, std::span<const std::size_t> dims, double slope, std::uint64_t seed) {
  if (n_nodes == 0) fail(ErrorCode::InvalidArgument, "GCN needs at least one node");
  if (dims.empty()) fail(ErrorCode::InvalidArgument, "GCN needs at least one layer");
  if (!(slope >= 0.0 && slope < 1.0)) fail(ErrorCode::InvalidArgument, "GCN activation slope must lie in [0,1)");
  GcnStack stack;
  stack.slope_ = slope;
  std::mt19937_64 rng(seed);
  std::size_t in = n_nodes;
  for (std::size_t l = 0; l < dims.size(); ++l) {
    const std::size_t out = dims[l];
    if (out == 0) fail(ErrorCode::InvalidArgument, "GCN layer width must be positive");
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor w({in, out});
    for (double& v : w.values()) v = u(rng);
    stack.params_.add("gcn.layer" + std::to_string(l) + ".weight", std::move(w));
    stack.layers_.push_back({in, out});
    in = out;
  }
  return stack;
}

Var gcn_layer_forward(Var h, Var adj, Var w, double slope) {
  const Shape& hs = h.shape();
  const Shape& as = adj.shape();
  const Shape& ws = w.shape();
  const bool ok = hs.size() == 2 && as.size() == 2 && ws.size() == 2 && as[0] == as[1] && as[1] == hs[0] &&
                  hs[1] == ws[0];
  if (!ok) {
    const auto n = as.empty() ? 0 : as[0];
    fail(ErrorCode::Shape, "gcn layer dimension mismatch: n=" + std::to_string(n) + " (adjacency " + shape_str(as) +
                               "), H " + shape_str(hs) + " needs n x d, W " + shape_str(ws) + " needs d x d'");
  }
  return ops::leaky_relu(ops::matmul(ops::matmul(adj, h), w), slope);
}

namespace {

template <typename Stack>
Var stack_forward(Tape& tape, const AdjacencyMatrix& adj, Stack& stack) {
  const std::size_t n = adj.size();
  if (stack.depth() == 0 || stack.input_dim() != n) {
    fail(ErrorCode::Shape, "GCN layer 0 expects " + std::to_string(stack.depth() ? stack.input_dim() : 0) +
                               " nodes but the adjacency has " + std::to_string(n));
  }
  const Var a = tape.constant(adj.a);
  Var h = tape.constant(Tensor::identity(n));
  for (std::size_t l = 0; l < stack.depth(); ++l) {
    h = gcn_layer_forward(h, a, tape.parameter(stack.weight(l)), stack.slope());
  }
  return h;
}

}  // namespace

Var gcn_stack_forward(Tape& tape, const AdjacencyMatrix& adj, GcnStack& stack) { return stack_forward(tape, adj, stack); }

Var gcn_stack_forward(Tape& tape, const AdjacencyMatrix& adj, const GcnStack& stack) {
  return stack_forward(tape, adj, stack);
}

}  // namespace mergcn
