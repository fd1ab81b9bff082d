#include "core/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "core/container.hpp"
#include "core/error.hpp"

namespace mergcn {

using nlohmann::json;

std::string variant_name(ModelVariant v) { return v == ModelVariant::MerGcn ? "mer-gcn" : "cnn-only"; }

ModelVariant parse_variant(const std::string& name) {
  if (name == "mer-gcn" || name == "MER_GCN") return ModelVariant::MerGcn;
  if (name == "cnn-only" || name == "CNN_ONLY") return ModelVariant::CnnOnly;
  fail(ErrorCode::InvalidArgument, "unknown model variant '" + name + "' (expected mer-gcn or cnn-only)");
}

std::vector<std::size_t> default_gcn_dims(double width_scale) {
  auto scaled = [&](double c) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::round(c * width_scale))); };
  return {scaled(1024), scaled(512)};
}

std::size_t argmax_first(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Prediction make_prediction(std::span<const double> logits, std::span<const double> au_scores) {
  Prediction p;
  p.logits.assign(logits.begin(), logits.end());
  p.probabilities = softmax(logits);
  p.au_scores.assign(au_scores.begin(), au_scores.end());
  p.class_id = argmax_first(logits);
  return p;
}

Var fuse(Var h_last, Var feature) {
  const Shape& hs = h_last.shape();
  const Shape& fs = feature.shape();
  if (hs.size() != 2 || fs.size() != 1 || hs[1] != fs[0]) {
    fail(ErrorCode::Shape, "fuse dimension mismatch: AU embeddings " + shape_str(hs) + " vs feature " + shape_str(fs));
  }
  return ops::matvec(h_last, feature);
}

MerGcnModel MerGcnModel::build(const ModelConfig& config, AuVocabulary vocab, AdjacencyMatrix adjacency,
                               std::vector<std::string> class_names, std::uint64_t seed) {
  config.backbone.validate();
  if (config.n_classes < 2) fail(ErrorCode::InvalidArgument, "model needs at least two classes");
  if (!class_names.empty() && class_names.size() != config.n_classes) {
    fail(ErrorCode::Mismatch, "class name list has " + std::to_string(class_names.size()) + " entries, model has " +
                                  std::to_string(config.n_classes) + " classes");
  }
  if (adjacency.size() != vocab.size()) {
    fail(ErrorCode::Mismatch, "adjacency is " + std::to_string(adjacency.size()) + "x" +
                                  std::to_string(adjacency.size()) + " but the vocabulary has " +
                                  std::to_string(vocab.size()) + " AUs");
  }
  MerGcnModel m;
  m.config_ = config;
  if (m.config_.gcn_dims.empty()) m.config_.gcn_dims = default_gcn_dims(config.backbone.width_scale);
  m.vocab_ = std::move(vocab);
  m.adjacency_ = std::move(adjacency);
  m.class_names_ = std::move(class_names);
  m.seed_ = seed;

  std::mt19937_64 seeds(seed);
  const std::uint64_t backbone_seed = seeds();
  const std::uint64_t gcn_seed = seeds();
  const std::uint64_t head_seed = seeds();
  m.backbone_ = BackboneModel::build(m.config_.backbone, backbone_seed);
  const std::size_t feature_dim = m.backbone_.feature_dim();

  std::size_t head_in = feature_dim;
  if (config.variant == ModelVariant::MerGcn) {
    if (m.config_.gcn_dims.back() != feature_dim) {
      fail(ErrorCode::Mismatch, "GCN output dim " + std::to_string(m.config_.gcn_dims.back()) +
                                    " must equal the backbone feature dim " + std::to_string(feature_dim));
    }
    m.gcn_ = GcnStack::build(m.vocab_.size(), m.config_.gcn_dims, config.gcn_slope, gcn_seed);
    head_in = m.vocab_.size();
  }
  std::mt19937_64 rng(head_seed);
  std::normal_distribution<double> normal(0.0, config.head_init_scale * std::sqrt(2.0 / static_cast<double>(head_in)));
  Tensor w({config.n_classes, head_in});
  for (double& v : w.values()) v = normal(rng);
  m.head_.add("head.weight", std::move(w));
  m.head_.add("head.bias", Tensor({config.n_classes}));
  return m;
}

template <typename Self>
ForwardOutput MerGcnModel::forward_impl(Self& self, Tape& tape, const Tensor& seq) {
  ForwardOutput out;
  const Var input = tape.constant(seq);
  out.feature = self.backbone_.forward(tape, input);
  Var head_in = out.feature;
  if (self.gcn_) {
    const Var h_last = gcn_stack_forward(tape, self.adjacency_, *self.gcn_);
    out.au_scores = fuse(h_last, out.feature);
    head_in = out.au_scores;
  }
  out.logits = ops::linear(head_in, tape.parameter(self.head_.at(0)), tape.parameter(self.head_.at(1)));
  return out;
}

ForwardOutput MerGcnModel::forward(Tape& tape, const Tensor& seq) { return forward_impl(*this, tape, seq); }

ForwardOutput MerGcnModel::forward(Tape& tape, const Tensor& seq) const { return forward_impl(*this, tape, seq); }

Var MerGcnModel::loss(Tape& tape, const Tensor& seq, std::size_t label) {
  if (label >= config_.n_classes) {
    fail(ErrorCode::InvalidArgument, "label " + std::to_string(label) + " out of range for " +
                                         std::to_string(config_.n_classes) + " classes");
  }
  return ops::softmax_cross_entropy(forward(tape, seq).logits, label);
}

Prediction MerGcnModel::forward_prediction(const Tensor& seq) const {
  Tape tape;
  const ForwardOutput out = forward(tape, seq);
  std::span<const double> scores;
  if (out.au_scores.valid()) scores = out.au_scores.value().values();
  return make_prediction(out.logits.value().values(), scores);
}

std::size_t MerGcnModel::predict(const Tensor& seq) const { return forward_prediction(seq).class_id; }

std::vector<Parameter*> MerGcnModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : backbone_.params()) out.push_back(&p);
  if (gcn_) {
    for (auto& p : gcn_->params()) out.push_back(&p);
  }
  for (auto& p : head_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> MerGcnModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : backbone_.params()) out.push_back(&p);
  if (gcn_) {
    for (const auto& p : gcn_->params()) out.push_back(&p);
  }
  for (const auto& p : head_) out.push_back(&p);
  return out;
}

Parameter* MerGcnModel::find_parameter(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

json model_config_to_json(const ModelConfig& c) {
  json adj = {{"row_normalize", c.adjacency.row_normalize}};
  adj["binarize_threshold"] = c.adjacency.binarize_threshold ? json(*c.adjacency.binarize_threshold) : json(nullptr);
  return {
      {"backbone",
       {{"in_channels", c.backbone.in_channels},
        {"width_scale", c.backbone.width_scale},
        {"input_h", c.backbone.input_h},
        {"input_w", c.backbone.input_w},
        {"min_t", c.backbone.min_t},
        {"activation_slope", c.backbone.activation_slope},
        {"channel_affine", c.backbone.channel_affine}}},
      {"gcn_dims", c.gcn_dims},
      {"gcn_slope", c.gcn_slope},
      {"n_classes", c.n_classes},
      {"variant", variant_name(c.variant)},
      {"head_init_scale", c.head_init_scale},
      {"adjacency", adj},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  const json& b = j.at("backbone");
  c.backbone.in_channels = b.at("in_channels").get<std::size_t>();
  c.backbone.width_scale = b.at("width_scale").get<double>();
  c.backbone.input_h = b.at("input_h").get<std::size_t>();
  c.backbone.input_w = b.at("input_w").get<std::size_t>();
  c.backbone.min_t = b.at("min_t").get<std::size_t>();
  c.backbone.activation_slope = b.at("activation_slope").get<double>();
  c.backbone.channel_affine = b.at("channel_affine").get<bool>();
  c.gcn_dims = j.at("gcn_dims").get<std::vector<std::size_t>>();
  c.gcn_slope = j.at("gcn_slope").get<double>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.head_init_scale = j.at("head_init_scale").get<double>();
  const json& adj = j.at("adjacency");
  c.adjacency.row_normalize = adj.at("row_normalize").get<bool>();
  if (!adj.at("binarize_threshold").is_null()) c.adjacency.binarize_threshold = adj.at("binarize_threshold").get<double>();
  return c;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".json");
}

namespace {

Tensor counts_tensor(std::span<const std::size_t> counts, Shape shape) {
  std::vector<double> v(counts.begin(), counts.end());
  return Tensor(std::move(shape), std::move(v));
}

std::vector<std::size_t> tensor_counts(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.values()) {
    if (!(v >= 0.0) || v != std::floor(v)) fail(ErrorCode::Parse, "checkpoint graph counts are not non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const MerGcnModel& model, const json& extra) {
  std::vector<NamedTensor> entries;
  for (const Parameter* p : model.parameters()) {
    Tensor t(p->value.shape(), std::vector<double>(p->value.values().begin(), p->value.values().end()));
    entries.push_back({p->name, std::move(t)});
  }
  const auto& adj = model.adjacency();
  const std::size_t n = adj.size();
  entries.push_back({"graph.adjacency", Tensor(adj.a.shape(), std::vector<double>(adj.a.values().begin(), adj.a.values().end()))});
  entries.push_back({"graph.counts", counts_tensor(adj.counts, {n})});
  entries.push_back({"graph.pair_counts", counts_tensor(adj.pair_counts, {n, n})});
  write_container(path, entries);

  json side = extra.is_object() ? extra : json::object();
  side["model"] = model_config_to_json(model.config());
  side["vocabulary"] = model.vocab().ids();
  side["class_names"] = model.class_names();
  side["seed"] = model.seed();
  side["init"] = {{"conv_linear", "normal(0, sqrt(2/fan_in))"},
                  {"gcn", "uniform(+-sqrt(6/(d_in+d_out)))"},
                  {"head_scale", model.config().head_init_scale},
                  {"bias", "zeros"}};
  std::ofstream f(sidecar_path(path), std::ios::trunc);
  if (!f) fail(ErrorCode::Io, "cannot write checkpoint sidecar '" + sidecar_path(path).string() + "'");
  f << side.dump(2) << '\n';
  if (!f) fail(ErrorCode::Io, "failed writing '" + sidecar_path(path).string() + "'");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto entries = read_container(path);
  std::ifstream f(sidecar_path(path));
  if (!f) fail(ErrorCode::Io, "missing checkpoint sidecar '" + sidecar_path(path).string() + "'");
  json side;
  try {
    side = json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorCode::Parse, "invalid checkpoint sidecar: " + std::string(e.what()));
  }
  try {
    const ModelConfig config = model_config_from_json(side.at("model"));
    AuVocabulary vocab(side.at("vocabulary").get<std::vector<int>>());
    const Tensor* counts = find_entry(entries, "graph.counts");
    const Tensor* pairs = find_entry(entries, "graph.pair_counts");
    if (!counts || !pairs) fail(ErrorCode::Parse, "checkpoint lacks graph counts");
    AdjacencyMatrix adj = adjacency_from_counts(tensor_counts(*counts), tensor_counts(*pairs), config.adjacency);
    auto names = side.at("class_names").get<std::vector<std::string>>();
    MerGcnModel model = MerGcnModel::build(config, std::move(vocab), std::move(adj), std::move(names),
                                           side.at("seed").get<std::uint64_t>());
    for (Parameter* p : model.parameters()) {
      const Tensor* t = find_entry(entries, p->name);
      if (!t) fail(ErrorCode::Parse, "checkpoint lacks parameter '" + p->name + "'");
      if (t->shape() != p->value.shape()) {
        fail(ErrorCode::Mismatch, "parameter '" + p->name + "' has shape " + shape_str(t->shape()) + ", expected " +
                                      shape_str(p->value.shape()));
      }
      std::copy(t->values().begin(), t->values().end(), p->value.values().begin());
      p->momentum.clear();
    }
    return {std::move(model), std::move(side)};
  } catch (const json::exception& e) {
    fail(ErrorCode::Parse, "invalid checkpoint sidecar: " + std::string(e.what()));
  }
}

}  // namespace mergcn
