#include "core/selfcheck.hpp"

#include <random>

#include "core/data.hpp"
#include "core/model.hpp"

namespace mergcn {

GradCheckReport tiny_model_grad_check(const GradCheckOptions& opts, const TinyCheckSetup& setup) {
  // AU 1 occurs twice, AU 2 once, together once: an asymmetric graph.
  const std::vector<AuSet> annotations = {{1, 2}, {1}};
  AuVocabulary vocab = build_vocabulary(annotations);
  AdjacencyMatrix adj = build_adjacency(annotations, vocab);

  ModelConfig config;
  config.backbone.in_channels = 1;
  config.backbone.width_scale = setup.width_scale;
  config.n_classes = setup.n_classes;
  // Full-scale head so the backbone and GCN gradients are not dwarfed.
  config.head_init_scale = 1.0;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < setup.n_classes; ++c) names.push_back("class" + std::to_string(c));
  MerGcnModel model = MerGcnModel::build(config, vocab, adj, names, setup.model_seed);

  Tensor seq({1, setup.t, kFrameSize, kFrameSize});
  std::mt19937_64 rng(setup.input_seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (double& v : seq.values()) v = unit(rng);

  auto params = model.parameters();
  return grad_check([&](Tape& tape) { return model.loss(tape, seq, setup.label); }, params, opts);
}

}  // namespace mergcn
