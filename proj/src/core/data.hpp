#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "core/au_graph.hpp"
#include "json.hpp"

namespace mergcn {

// Raw frame intensities in [0,255] map to [-1,1].
inline constexpr const char* kNormalization = "x/127.5-1";
inline constexpr std::size_t kFrameSize = 112;

struct SequenceRecord {
  std::string id;
  std::string frames_path;
  std::string subject;
  std::string emotion;
  AuSet aus;
  std::size_t num_frames = 0;
};

struct DatasetManifest {
  std::vector<SequenceRecord> records;
  std::vector<std::string> class_names;
  std::filesystem::path base_dir;  // relative frames_path values resolve against this
  nlohmann::json header = nlohmann::json::object();

  std::vector<std::string> subjects() const;  // sorted, unique
  std::size_t class_index(const std::string& emotion) const;
  std::optional<std::size_t> find(const std::string& id) const;
  std::vector<AuSet> annotations(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> all_indices() const;
  void validate() const;
};

// JSON Lines. An optional first line {"manifest": {...}} carries class_names
// and the normalization rule; every other line is one record.
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

Tensor normalize_frames(const Tensor& raw);

std::filesystem::path resolve_frames_path(const DatasetManifest& manifest, const SequenceRecord& record);

// Reads the record's MERT frames (C x T x 112 x 112) and normalizes them.
Tensor load_sequence(const DatasetManifest& manifest, const SequenceRecord& record);

// Thread-safe lazy cache of normalized sequences keyed by record id.
class SequenceCache {
 public:
  explicit SequenceCache(const DatasetManifest& manifest) : manifest_(&manifest) {}

  const Tensor& get(std::size_t record_index);

 private:
  const DatasetManifest* manifest_;
  std::mutex mutex_;
  std::unordered_map<std::size_t, Tensor> cache_;
};

struct PatchRegion {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 0;
};

struct SyntheticConfig {
  std::size_t n_subjects = 4;
  std::size_t n_classes = 3;
  std::size_t sequences_per_class_per_subject = 2;
  std::size_t t = 8;
  std::size_t channels = 1;
  double noise_std = 8.0;
  double bump_amplitude = 100.0;
  double bump_half_width = 0.0;  // frames; 0 picks max(2, t/2)
  double subject_offset = 10.0;  // per-subject brightness shift drawn from +-subject_offset
  double au_dropout = 0.3;       // probability of dropping one AU from a sequence
  std::vector<std::string> class_names;
  std::map<std::size_t, AuSet> au_map;        // class index -> planted AUs
  std::map<int, PatchRegion> region_map;      // AU id -> square patch
  std::uint64_t seed = 7;

  void validate() const;
};

std::vector<std::string> default_class_names();

// Seven FACS-flavoured class prototypes with disjoint AU pairs and
// non-overlapping patches; the first n_classes are used.
SyntheticConfig default_synthetic_config(std::size_t n_subjects, std::size_t n_classes, std::size_t per,
                                         std::size_t t, std::uint64_t seed);

nlohmann::json synthetic_config_to_json(const SyntheticConfig& config);

// Writes frames/<id>.mert and manifest.jsonl under out_dir.
DatasetManifest generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir);

struct CooccurrenceTable {
  std::vector<std::size_t> counts;       // N_j
  std::vector<std::size_t> pair_counts;  // N_{i and j}, row-major
};

struct CooccurrenceSummary {
  std::vector<int> au_ids;
  CooccurrenceTable overall;
  std::vector<CooccurrenceTable> per_class;
};

CooccurrenceSummary cooccurrence_summary(const DatasetManifest& manifest);

}  // namespace mergcn
