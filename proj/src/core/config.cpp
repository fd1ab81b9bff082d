#include "core/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "core/error.hpp"

namespace mergcn {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorCode::InvalidArgument, "config key '" + key + "': '" + value + "' is not " + expected);
}

}  // namespace

const std::vector<std::string>& KeyValueConfig::known_keys() {
  static const std::vector<std::string> keys = {
      // dataset synthesis
      "subjects", "classes", "per", "t", "channels", "noise", "amplitude", "half_width", "subject_offset",
      "au_dropout",
      // training / evaluation
      "epochs", "lr", "momentum", "clip_norm", "width_scale", "gcn_dims", "gcn_slope", "backbone_slope",
      "head_init_scale", "channel_affine", "class_weighting", "variant", "strategy", "k", "split_seed", "jobs",
      "vocab", "row_normalize", "binarize_threshold",
      // gradient check
      "eps", "samples", "freeze_activations",
      // shared
      "seed"};
  return keys;
}

bool KeyValueConfig::is_known_key(const std::string& key) {
  const auto& keys = known_keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  if (!is_known_key(key)) fail(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
  values_[key] = value;
}

void KeyValueConfig::load_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot open config file '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::InvalidArgument, path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      set(key, trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.code(), path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, *v, "a number");
  return out;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, *v, "a non-negative integer");
  return out;
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") return true;
  if (*v == "0" || *v == "false" || *v == "no" || *v == "off") return false;
  bad_value(key, *v, "a boolean");
}

std::optional<std::vector<int>> KeyValueConfig::get_int_list(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  std::vector<int> out;
  std::stringstream ss(*v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    int x = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (ec != std::errc() || ptr != item.data() + item.size()) bad_value(key, *v, "a comma-separated integer list");
    out.push_back(x);
  }
  if (out.empty()) bad_value(key, *v, "a non-empty integer list");
  return out;
}

nlohmann::json KeyValueConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig c;
  c.epochs = kv.get_size("epochs", c.epochs);
  c.lr = kv.get_double("lr", c.lr);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.width_scale = kv.get_double("width_scale", c.width_scale);
  if (auto dims = kv.get_int_list("gcn_dims")) {
    for (int d : *dims) {
      if (d <= 0) fail(ErrorCode::InvalidArgument, "gcn_dims entries must be positive");
      c.gcn_dims.push_back(static_cast<std::size_t>(d));
    }
  }
  c.gcn_slope = kv.get_double("gcn_slope", c.gcn_slope);
  c.backbone_slope = kv.get_double("backbone_slope", c.backbone_slope);
  c.head_init_scale = kv.get_double("head_init_scale", c.head_init_scale);
  c.channel_affine = kv.get_bool("channel_affine", c.channel_affine);
  c.class_weighting = kv.get_bool("class_weighting", c.class_weighting);
  c.adjacency.row_normalize = kv.get_bool("row_normalize", false);
  if (kv.has("binarize_threshold")) c.adjacency.binarize_threshold = kv.get_double("binarize_threshold", 0.0);
  if (auto vocab = kv.get_int_list("vocab")) {
    std::vector<int> ids = *vocab;
    std::sort(ids.begin(), ids.end());
    c.fixed_vocab = ids;
  }
  c.seed = kv.get_u64("seed", c.seed);
  c.variant = parse_variant(kv.get_string("variant", variant_name(c.variant)));
  c.validate();
  return c;
}

SyntheticConfig synthetic_config_from(const KeyValueConfig& kv) {
  SyntheticConfig c = default_synthetic_config(kv.get_size("subjects", 4), kv.get_size("classes", 3),
                                               kv.get_size("per", 2), kv.get_size("t", 8), kv.get_u64("seed", 7));
  c.channels = kv.get_size("channels", c.channels);
  c.noise_std = kv.get_double("noise", c.noise_std);
  c.bump_amplitude = kv.get_double("amplitude", c.bump_amplitude);
  c.bump_half_width = kv.get_double("half_width", c.bump_half_width);
  c.subject_offset = kv.get_double("subject_offset", c.subject_offset);
  c.au_dropout = kv.get_double("au_dropout", c.au_dropout);
  c.validate();
  return c;
}

SplitPlan split_plan_from(const KeyValueConfig& kv, const DatasetManifest& manifest) {
  const std::string strategy = kv.get_string("strategy", "kfold");
  if (strategy == "loso") return loso_splits(manifest);
  if (strategy == "kfold") {
    return kfold_splits(manifest, kv.get_size("k", 5), kv.get_u64("split_seed", kv.get_u64("seed", 1)));
  }
  fail(ErrorCode::InvalidArgument, "unknown strategy '" + strategy + "' (expected loso or kfold)");
}

}  // namespace mergcn
