#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/data.hpp"
#include "core/eval.hpp"
#include "json.hpp"

namespace mergcn {

// Flat `key = value` configuration shared by every command. Later set()
// calls override earlier ones, so flags applied after a file win.
class KeyValueConfig {
 public:
  static bool is_known_key(const std::string& key);
  static const std::vector<std::string>& known_keys();

  void set(const std::string& key, const std::string& value);
  void load_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::optional<std::vector<int>> get_int_list(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }
  nlohmann::json to_json() const;

 private:
  std::map<std::string, std::string> values_;
};

TrainConfig train_config_from(const KeyValueConfig& kv);
SyntheticConfig synthetic_config_from(const KeyValueConfig& kv);
SplitPlan split_plan_from(const KeyValueConfig& kv, const DatasetManifest& manifest);

}  // namespace mergcn
