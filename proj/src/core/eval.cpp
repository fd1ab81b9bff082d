#include "core/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <random>
#include <thread>

#include "core/error.hpp"
#include "core/optim.hpp"

namespace mergcn {

using nlohmann::json;

std::string strategy_name(SplitStrategy s) { return s == SplitStrategy::Loso ? "loso" : "kfold"; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL));
}

SplitPlan loso_splits(const DatasetManifest& manifest) {
  const auto subjects = manifest.subjects();
  if (subjects.size() < 2) {
    fail(ErrorCode::InvalidArgument, "LOSO needs at least two subjects, manifest has " + std::to_string(subjects.size()));
  }
  SplitPlan plan;
  plan.strategy = SplitStrategy::Loso;
  plan.k = subjects.size();
  for (const auto& s : subjects) {
    Fold f;
    f.label = s;
    for (const auto& r : manifest.records) (r.subject == s ? f.test_ids : f.train_ids).push_back(r.id);
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

SplitPlan kfold_splits(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  const std::size_t n = manifest.records.size();
  if (k < 2 || k > n) {
    fail(ErrorCode::InvalidArgument, "k must lie in [2, " + std::to_string(n) + "], got " + std::to_string(k));
  }
  std::vector<std::vector<std::size_t>> by_class(manifest.class_names.size());
  for (std::size_t i = 0; i < n; ++i) by_class[manifest.class_index(manifest.records[i].emotion)].push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold_of(n);
  std::size_t deal = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i : members) fold_of[i] = deal++ % k;
  }
  SplitPlan plan;
  plan.strategy = SplitStrategy::KFold;
  plan.k = k;
  plan.seed = seed;
  plan.folds.resize(k);
  for (std::size_t f = 0; f < k; ++f) plan.folds[f].label = "fold" + std::to_string(f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < k; ++f) {
      (fold_of[i] == f ? plan.folds[f].test_ids : plan.folds[f].train_ids).push_back(manifest.records[i].id);
    }
  }
  return plan;
}

std::vector<std::size_t> resolve_ids(const DatasetManifest& manifest, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) index[manifest.records[i].id] = i;
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) fail(ErrorCode::Validation, "record id '" + id + "' is not in the manifest");
    out.push_back(it->second);
  }
  return out;
}

Metrics Metrics::from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  Metrics m;
  std::size_t trace = 0;
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    std::size_t row = 0;
    for (std::size_t v : confusion[i]) row += v;
    m.n_eval += row;
    trace += confusion[i][i];
    m.per_class_recall.push_back(row ? static_cast<double>(confusion[i][i]) / static_cast<double>(row) : 0.0);
  }
  m.accuracy = m.n_eval ? static_cast<double>(trace) / static_cast<double>(m.n_eval) : 0.0;
  m.confusion = std::move(confusion);
  return m;
}

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorCode::InvalidArgument, "epochs must be >= 1");
  if (!(lr > 0.0)) fail(ErrorCode::InvalidArgument, "lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorCode::InvalidArgument, "momentum must lie in [0,1)");
  if (!(width_scale > 0.0 && width_scale <= 1.0)) fail(ErrorCode::InvalidArgument, "width_scale must lie in (0,1]");
}

json train_config_to_json(const TrainConfig& c) {
  json j = {{"epochs", c.epochs},
            {"lr", c.lr},
            {"momentum", c.momentum},
            {"clip_norm", c.clip_norm},
            {"width_scale", c.width_scale},
            {"gcn_dims", c.gcn_dims},
            {"gcn_slope", c.gcn_slope},
            {"backbone_slope", c.backbone_slope},
            {"head_init_scale", c.head_init_scale},
            {"channel_affine", c.channel_affine},
            {"class_weighting", c.class_weighting},
            {"row_normalize", c.adjacency.row_normalize},
            {"seed", c.seed},
            {"variant", variant_name(c.variant)}};
  j["binarize_threshold"] = c.adjacency.binarize_threshold ? json(*c.adjacency.binarize_threshold) : json(nullptr);
  j["fixed_vocab"] = c.fixed_vocab ? json(*c.fixed_vocab) : json(nullptr);
  return j;
}

TrainResult train(const DatasetManifest& manifest, std::span<const std::size_t> train_indices,
                  const TrainConfig& config, SequenceCache& cache, const EpochCallback& on_epoch) {
  config.validate();
  if (train_indices.empty()) fail(ErrorCode::EmptySelection, "training set is empty");

  const auto annotations = manifest.annotations(train_indices);
  AuVocabulary vocab = config.fixed_vocab ? AuVocabulary(*config.fixed_vocab) : build_vocabulary(annotations);
  AdjacencyMatrix adj = build_adjacency(annotations, vocab, config.adjacency);

  ModelConfig mc;
  mc.backbone.in_channels = cache.get(train_indices.front()).dim(0);
  mc.backbone.width_scale = config.width_scale;
  mc.backbone.activation_slope = config.backbone_slope;
  mc.backbone.channel_affine = config.channel_affine;
  mc.gcn_dims = config.gcn_dims;
  mc.gcn_slope = config.gcn_slope;
  mc.n_classes = manifest.class_names.size();
  mc.variant = config.variant;
  mc.head_init_scale = config.head_init_scale;
  mc.adjacency = config.adjacency;

  TrainResult result{MerGcnModel::build(mc, std::move(vocab), std::move(adj), manifest.class_names,
                                        derive_seed(config.seed, 1)),
                     {}, 0, 0.0};
  MerGcnModel& model = result.model;
  auto params = model.parameters();

  std::vector<std::size_t> labels(manifest.records.size());
  std::vector<double> class_weight(mc.n_classes, 1.0);
  {
    std::vector<std::size_t> freq(mc.n_classes, 0);
    for (std::size_t i : train_indices) {
      labels[i] = manifest.class_index(manifest.records[i].emotion);
      ++freq[labels[i]];
    }
    if (config.class_weighting) {
      for (std::size_t c = 0; c < mc.n_classes; ++c) {
        class_weight[c] = freq[c] ? static_cast<double>(train_indices.size()) /
                                        (static_cast<double>(mc.n_classes) * static_cast<double>(freq[c]))
                                  : 0.0;
      }
    }
  }

  std::mt19937_64 order_rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
  const SgdOptions sgd{config.lr, config.momentum};
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      Tape tape;
      Var loss = model.loss(tape, cache.get(idx), labels[idx]);
      if (config.class_weighting) loss = ops::scale(loss, class_weight[labels[idx]]);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        fail(ErrorCode::Numeric, "non-finite loss at epoch " + std::to_string(epoch) + " on record '" +
                                     manifest.records[idx].id + "'");
      }
      tape.backward(loss);
      if (config.clip_norm > 0.0) {
        clip_grad_norm(params, config.clip_norm);
        result.max_post_clip_norm = std::max(result.max_post_clip_norm, global_grad_norm(params));
      }
      sgd_step(params, sgd);
      ++result.steps;
      total += value;
    }
    result.loss_history.push_back(total / static_cast<double>(order.size()));
    if (on_epoch && !on_epoch(epoch, result.loss_history.back(), model)) break;
  }
  return result;
}

Metrics evaluate(const MerGcnModel& model, const DatasetManifest& manifest, std::span<const std::size_t> indices,
                 SequenceCache& cache) {
  if (indices.empty()) fail(ErrorCode::EmptySelection, "evaluation selection is empty");
  const std::size_t k = model.n_classes();
  if (manifest.class_names.size() != k) {
    fail(ErrorCode::Mismatch, "model has " + std::to_string(k) + " classes but the manifest has " +
                                  std::to_string(manifest.class_names.size()));
  }
  std::vector<std::vector<std::size_t>> confusion(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i : indices) {
    const std::size_t truth = manifest.class_index(manifest.records.at(i).emotion);
    ++confusion[truth][model.predict(cache.get(i))];
  }
  return Metrics::from_confusion(std::move(confusion));
}

namespace {

FoldResult run_fold(const DatasetManifest& manifest, const Fold& fold, std::size_t index, const TrainConfig& base,
                    const CrossValidationOptions& options, SequenceCache& cache) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg = base;
  cfg.seed = derive_seed(base.seed, 1000 + index);
  const auto train_idx = resolve_ids(manifest, fold.train_ids);
  const auto test_idx = resolve_ids(manifest, fold.test_ids);

  FoldResult out;
  out.index = index;
  out.label = fold.label;
  out.train_ids = fold.train_ids;
  out.test_ids = fold.test_ids;
  TrainResult tr = [&] {
    try {
      return train(manifest, train_idx, cfg, cache);
    } catch (const Error& e) {
      fail(e.code(), "fold " + std::to_string(index) + " (" + fold.label + "): " + e.what());
    }
  }();
  out.loss_history = tr.loss_history;
  out.max_post_clip_norm = tr.max_post_clip_norm;
  out.adjacency_counts = tr.model.adjacency().counts;
  out.train_final = evaluate(tr.model, manifest, train_idx, cache);
  out.test = evaluate(tr.model, manifest, test_idx, cache);
  if (options.checkpoint_dir) {
    const auto path = *options.checkpoint_dir / ("fold" + std::to_string(index) + ".mert");
    json extra = {{"fold", index},
                  {"fold_label", fold.label},
                  {"train_ids", fold.train_ids},
                  {"test_ids", fold.test_ids},
                  {"train_accuracy", out.train_final.accuracy},
                  {"test_accuracy", out.test.accuracy},
                  {"train_config", train_config_to_json(cfg)},
                  {"config", options.config_echo}};
    save_checkpoint(path, tr.model, extra);
    out.checkpoint = path.string();
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace

CrossValidationResult cross_validate(const DatasetManifest& manifest, const SplitPlan& plan, const TrainConfig& config,
                                     const CrossValidationOptions& options) {
  config.validate();
  if (plan.folds.empty()) fail(ErrorCode::InvalidArgument, "split plan has no folds");
  if (options.checkpoint_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.checkpoint_dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create checkpoint directory '" + options.checkpoint_dir->string() + "'");
  }
  const auto start = std::chrono::steady_clock::now();
  SequenceCache cache(manifest);
  for (std::size_t i = 0; i < manifest.records.size(); ++i) cache.get(i);

  CrossValidationResult result;
  result.folds.resize(plan.folds.size());
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, plan.folds.size()));
  if (jobs == 1) {
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
      result.folds[f] = run_fold(manifest, plan.folds[f], f, config, options, cache);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(plan.folds.size());
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t f = next++; f < plan.folds.size(); f = next++) {
          try {
            result.folds[f] = run_fold(manifest, plan.folds[f], f, config, options, cache);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const std::size_t k = manifest.class_names.size();
  std::vector<std::vector<std::size_t>> pooled(k, std::vector<std::size_t>(k, 0));
  for (const auto& fr : result.folds) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) pooled[i][j] += fr.test.confusion[i][j];
    }
  }
  result.pooled = Metrics::from_confusion(std::move(pooled));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

json metrics_to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"n_eval", m.n_eval},
          {"confusion", m.confusion},
          {"per_class_recall", m.per_class_recall}};
}

json results_to_json(const CrossValidationResult& result, const SplitPlan& plan, const TrainConfig& config,
                     const json& config_echo) {
  json folds = json::array();
  for (const auto& f : result.folds) {
    folds.push_back({{"index", f.index},
                     {"label", f.label},
                     {"train_ids", f.train_ids},
                     {"test_ids", f.test_ids},
                     {"test", metrics_to_json(f.test)},
                     {"train_final", metrics_to_json(f.train_final)},
                     {"loss_history", f.loss_history},
                     {"max_post_clip_norm", f.max_post_clip_norm},
                     {"adjacency_counts", f.adjacency_counts},
                     {"checkpoint", f.checkpoint},
                     {"seconds", f.seconds}});
  }
  return {{"config", config_echo},
          {"train_config", train_config_to_json(config)},
          {"strategy", strategy_name(plan.strategy)},
          {"k", plan.k},
          {"split_seed", plan.seed},
          {"folds", folds},
          {"pooled", metrics_to_json(result.pooled)},
          {"timings", {{"total_seconds", result.seconds}}}};
}

}  // namespace mergcn
