#include "core/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "core/container.hpp"
#include "core/error.hpp"

namespace mergcn {

using nlohmann::json;

std::vector<std::string> DatasetManifest::subjects() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.subject);
  return {s.begin(), s.end()};
}

std::size_t DatasetManifest::class_index(const std::string& emotion) const {
  auto it = std::find(class_names.begin(), class_names.end(), emotion);
  if (it == class_names.end()) fail(ErrorCode::Validation, "emotion '" + emotion + "' is not a known class");
  return static_cast<std::size_t>(it - class_names.begin());
}

std::optional<std::size_t> DatasetManifest::find(const std::string& id) const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].id == id) return i;
  }
  return std::nullopt;
}

std::vector<AuSet> DatasetManifest::annotations(std::span<const std::size_t> indices) const {
  std::vector<AuSet> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(records.at(i).aus);
  return out;
}

std::vector<std::size_t> DatasetManifest::all_indices() const {
  std::vector<std::size_t> out(records.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

void DatasetManifest::validate() const {
  if (class_names.empty()) fail(ErrorCode::Validation, "manifest has no classes");
  std::set<std::string> seen_classes;
  for (const auto& c : class_names) {
    if (!seen_classes.insert(c).second) fail(ErrorCode::Validation, "duplicate class name '" + c + "'");
  }
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.id.empty()) fail(ErrorCode::Validation, "record with empty id");
    if (!ids.insert(r.id).second) fail(ErrorCode::Validation, "duplicate record id '" + r.id + "'");
    if (r.aus.empty()) fail(ErrorCode::Validation, "record '" + r.id + "' has no AUs");
    for (int au : r.aus) {
      if (au <= 0) fail(ErrorCode::Validation, "record '" + r.id + "' has non-positive AU " + std::to_string(au));
    }
    if (r.num_frames == 0) fail(ErrorCode::Validation, "record '" + r.id + "' has num_frames = 0");
    if (r.subject.empty()) fail(ErrorCode::Validation, "record '" + r.id + "' has no subject");
    if (std::find(class_names.begin(), class_names.end(), r.emotion) == class_names.end()) {
      fail(ErrorCode::Validation, "record '" + r.id + "' has emotion '" + r.emotion + "' not in class_names");
    }
  }
}

namespace {

SequenceRecord parse_record(const json& j) {
  SequenceRecord r;
  r.id = j.at("id").get<std::string>();
  r.frames_path = j.at("frames_path").get<std::string>();
  r.subject = j.at("subject").get<std::string>();
  r.emotion = j.at("emotion").get<std::string>();
  for (int au : j.at("aus").get<std::vector<int>>()) r.aus.insert(au);
  const auto nf = j.at("num_frames").get<long long>();
  if (nf < 0) fail(ErrorCode::Validation, "record '" + r.id + "' has negative num_frames");
  r.num_frames = static_cast<std::size_t>(nf);
  return r;
}

json record_json(const SequenceRecord& r) {
  return {{"id", r.id},
          {"frames_path", r.frames_path},
          {"subject", r.subject},
          {"emotion", r.emotion},
          {"aus", std::vector<int>(r.aus.begin(), r.aus.end())},
          {"num_frames", r.num_frames}};
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::Io, "cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.base_dir = path.parent_path();
  bool have_header = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::Parse, path.string() + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) fail(ErrorCode::Parse, path.string() + ":" + std::to_string(line_no) + ": expected an object");
    try {
      if (j.contains("manifest")) {
        if (have_header || !m.records.empty()) {
          fail(ErrorCode::Parse, path.string() + ":" + std::to_string(line_no) + ": header must be the first line");
        }
        have_header = true;
        m.header = j.at("manifest");
        m.class_names = m.header.at("class_names").get<std::vector<std::string>>();
        continue;
      }
      m.records.push_back(parse_record(j));
    } catch (const json::exception& e) {
      fail(ErrorCode::Parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) {
    std::set<std::string> names;
    for (const auto& r : m.records) names.insert(r.emotion);
    m.class_names.assign(names.begin(), names.end());
  }
  if (m.records.empty()) fail(ErrorCode::Validation, "manifest '" + path.string() + "' has no records");
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorCode::Io, "cannot write manifest '" + path.string() + "'");
  json header = manifest.header.is_object() ? manifest.header : json::object();
  header["class_names"] = manifest.class_names;
  header["normalization"] = kNormalization;
  f << json{{"manifest", header}}.dump() << '\n';
  for (const auto& r : manifest.records) f << record_json(r).dump() << '\n';
  if (!f) fail(ErrorCode::Io, "failed writing manifest '" + path.string() + "'");
}

Tensor normalize_frames(const Tensor& raw) {
  Tensor out(raw.shape());
  const auto in = raw.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / 127.5 - 1.0;
  return out;
}

std::filesystem::path resolve_frames_path(const DatasetManifest& manifest, const SequenceRecord& record) {
  std::filesystem::path p(record.frames_path);
  if (p.is_absolute()) return p;
  return manifest.base_dir / p;
}

Tensor load_sequence(const DatasetManifest& manifest, const SequenceRecord& record) {
  const auto entries = read_container(resolve_frames_path(manifest, record));
  const Tensor* frames = find_entry(entries, "frames");
  if (!frames && entries.size() == 1) frames = &entries.front().tensor;
  if (!frames) fail(ErrorCode::Parse, "frames file of record '" + record.id + "' has no 'frames' entry");
  const Shape& s = frames->shape();
  if (s.size() != 4 || s[2] != kFrameSize || s[3] != kFrameSize) {
    fail(ErrorCode::Mismatch, "record '" + record.id + "' frames have shape " + shape_str(s) + ", expected C x T x 112 x 112");
  }
  if (s[1] != record.num_frames) {
    fail(ErrorCode::Mismatch, "record '" + record.id + "' stores T=" + std::to_string(s[1]) + " frames but num_frames=" +
                                  std::to_string(record.num_frames));
  }
  if (!frames->all_finite()) fail(ErrorCode::Numeric, "record '" + record.id + "' frames contain non-finite values");
  return normalize_frames(*frames);
}

const Tensor& SequenceCache::get(std::size_t record_index) {
  std::lock_guard lock(mutex_);
  auto it = cache_.find(record_index);
  if (it != cache_.end()) return it->second;
  Tensor t = load_sequence(*manifest_, manifest_->records.at(record_index));
  return cache_.emplace(record_index, std::move(t)).first->second;
}

void SyntheticConfig::validate() const {
  if (n_subjects == 0 || n_classes == 0 || sequences_per_class_per_subject == 0) {
    fail(ErrorCode::InvalidArgument, "synthetic dataset needs at least one subject, class and sequence");
  }
  if (t == 0 || channels == 0) fail(ErrorCode::InvalidArgument, "synthetic frames need t >= 1 and channels >= 1");
  if (class_names.size() != n_classes) fail(ErrorCode::InvalidArgument, "class_names must list every class");
  if (!(noise_std >= 0.0) || !(au_dropout >= 0.0 && au_dropout <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "noise_std must be >= 0 and au_dropout in [0,1]");
  }
  std::set<AuSet> distinct;
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto it = au_map.find(c);
    if (it == au_map.end() || it->second.empty()) {
      fail(ErrorCode::InvalidArgument, "class " + std::to_string(c) + " has no AU prototype");
    }
    if (!distinct.insert(it->second).second) {
      fail(ErrorCode::InvalidArgument, "classes must have distinct AU prototypes");
    }
    for (int au : it->second) {
      auto r = region_map.find(au);
      if (r == region_map.end()) fail(ErrorCode::InvalidArgument, "AU " + std::to_string(au) + " has no region");
      const auto& p = r->second;
      if (p.size == 0 || p.row + p.size > kFrameSize || p.col + p.size > kFrameSize) {
        fail(ErrorCode::InvalidArgument, "region of AU " + std::to_string(au) + " lies outside 112x112");
      }
    }
  }
}

std::vector<std::string> default_class_names() {
  return {"happiness", "disgust", "surprise", "repression", "others", "fear", "sadness"};
}

SyntheticConfig default_synthetic_config(std::size_t n_subjects, std::size_t n_classes, std::size_t per,
                                         std::size_t t, std::uint64_t seed) {
  static const std::vector<AuSet> kPrototypes = {{6, 12}, {9, 10}, {1, 2}, {14, 17}, {4, 7}, {20, 26}, {15, 23}};
  // One 28x28 grid cell per AU; the patch is centred in its cell and its
  // size depends on the class, so classes differ in blob size as well as place.
  static const std::map<int, std::pair<std::size_t, std::size_t>> kCells = {
      {1, {0, 0}},  {2, {0, 1}},  {4, {0, 2}},  {7, {0, 3}},  {6, {1, 0}},  {9, {1, 1}},  {10, {1, 2}},
      {12, {1, 3}}, {14, {2, 0}}, {15, {2, 1}}, {17, {2, 2}}, {20, {2, 3}}, {23, {3, 0}}, {26, {3, 1}},
  };
  static const std::vector<std::size_t> kSizes = {10, 16, 24, 12, 20, 14, 18};
  constexpr std::size_t kCell = 28;
  if (n_classes == 0 || n_classes > kPrototypes.size()) {
    fail(ErrorCode::InvalidArgument, "default synthetic prototypes cover 1.." + std::to_string(kPrototypes.size()) +
                                         " classes, got " + std::to_string(n_classes));
  }
  SyntheticConfig c;
  c.n_subjects = n_subjects;
  c.n_classes = n_classes;
  c.sequences_per_class_per_subject = per;
  c.t = t;
  c.seed = seed;
  const auto names = default_class_names();
  c.class_names.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n_classes));
  for (std::size_t k = 0; k < n_classes; ++k) {
    c.au_map[k] = kPrototypes[k];
    for (int au : kPrototypes[k]) {
      const auto [r, col] = kCells.at(au);
      const std::size_t margin = (kCell - kSizes[k]) / 2;
      c.region_map[au] = {r * kCell + margin, col * kCell + margin, kSizes[k]};
    }
  }
  return c;
}

json synthetic_config_to_json(const SyntheticConfig& c) {
  json au_map = json::object();
  for (const auto& [cls, aus] : c.au_map) au_map[std::to_string(cls)] = std::vector<int>(aus.begin(), aus.end());
  json regions = json::object();
  for (const auto& [au, p] : c.region_map) regions[std::to_string(au)] = {p.row, p.col, p.size};
  return {{"n_subjects", c.n_subjects},
          {"n_classes", c.n_classes},
          {"sequences_per_class_per_subject", c.sequences_per_class_per_subject},
          {"t", c.t},
          {"channels", c.channels},
          {"noise_std", c.noise_std},
          {"bump_amplitude", c.bump_amplitude},
          {"bump_half_width", c.bump_half_width},
          {"subject_offset", c.subject_offset},
          {"au_dropout", c.au_dropout},
          {"class_names", c.class_names},
          {"au_map", au_map},
          {"region_map", regions},
          {"seed", c.seed}};
}

DatasetManifest generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "frames", ec);
  if (ec) fail(ErrorCode::Io, "cannot create '" + (out_dir / "frames").string() + "': " + ec.message());

  DatasetManifest m;
  m.base_dir = out_dir;
  m.class_names = config.class_names;
  m.header = {{"version", 1}, {"generator", synthetic_config_to_json(config)}};

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double half_width = config.bump_half_width > 0.0
                                ? config.bump_half_width
                                : std::max(2.0, static_cast<double>(config.t) / 2.0);
  const std::size_t plane = kFrameSize * kFrameSize;

  for (std::size_t s = 0; s < config.n_subjects; ++s) {
    char subject[16];
    std::snprintf(subject, sizeof(subject), "sub%02zu", s + 1);
    const double offset = (2.0 * unit(rng) - 1.0) * config.subject_offset;
    for (std::size_t c = 0; c < config.n_classes; ++c) {
      for (std::size_t k = 0; k < config.sequences_per_class_per_subject; ++k) {
        SequenceRecord rec;
        rec.id = std::string(subject) + "_" + config.class_names[c] + "_" + std::to_string(k);
        rec.subject = subject;
        rec.emotion = config.class_names[c];
        rec.num_frames = config.t;
        rec.frames_path = "frames/" + rec.id + ".mert";
        rec.aus = config.au_map.at(c);
        if (rec.aus.size() > 1 && unit(rng) < config.au_dropout) {
          auto it = rec.aus.begin();
          std::advance(it, static_cast<std::ptrdiff_t>(static_cast<std::size_t>(unit(rng) * rec.aus.size()) % rec.aus.size()));
          rec.aus.erase(it);
        }
        const double apex = std::floor(unit(rng) * static_cast<double>(config.t));

        Tensor frames({config.channels, config.t, kFrameSize, kFrameSize});
        for (std::size_t ch = 0; ch < config.channels; ++ch) {
          for (std::size_t t = 0; t < config.t; ++t) {
            double* img = frames.data() + (ch * config.t + t) * plane;
            for (std::size_t i = 0; i < plane; ++i) img[i] = 127.5 + offset + config.noise_std * noise(rng);
            const double dt = static_cast<double>(t) - apex;
            if (std::abs(dt) >= half_width) continue;
            const double bump = config.bump_amplitude * 0.5 * (1.0 + std::cos(std::numbers::pi * dt / half_width));
            for (int au : rec.aus) {
              const PatchRegion& p = config.region_map.at(au);
              for (std::size_t r = p.row; r < p.row + p.size; ++r) {
                for (std::size_t col = p.col; col < p.col + p.size; ++col) img[r * kFrameSize + col] += bump;
              }
            }
          }
        }
        for (double& v : frames.values()) v = std::clamp(v, 0.0, 255.0);
        const NamedTensor entry{"frames", std::move(frames)};
        write_container(out_dir / rec.frames_path, std::span<const NamedTensor>(&entry, 1));
        m.records.push_back(std::move(rec));
      }
    }
  }
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

CooccurrenceSummary cooccurrence_summary(const DatasetManifest& manifest) {
  CooccurrenceSummary out;
  AuSet all;
  for (const auto& r : manifest.records) all.insert(r.aus.begin(), r.aus.end());
  out.au_ids.assign(all.begin(), all.end());
  const std::size_t n = out.au_ids.size();
  auto empty_table = [n] { return CooccurrenceTable{std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n * n, 0)}; };
  out.overall = empty_table();
  out.per_class.assign(manifest.class_names.size(), empty_table());
  auto index = [&](int au) {
    return static_cast<std::size_t>(std::lower_bound(out.au_ids.begin(), out.au_ids.end(), au) - out.au_ids.begin());
  };
  for (const auto& r : manifest.records) {
    CooccurrenceTable& cls = out.per_class[manifest.class_index(r.emotion)];
    for (int a : r.aus) {
      const std::size_t i = index(a);
      ++out.overall.counts[i];
      ++cls.counts[i];
      for (int b : r.aus) {
        const std::size_t j = index(b);
        ++out.overall.pair_counts[i * n + j];
        ++cls.pair_counts[i * n + j];
      }
    }
  }
  return out;
}

}  // namespace mergcn
