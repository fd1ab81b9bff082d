#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "core/au_graph.hpp"
#include "core/autodiff.hpp"
#include "core/data.hpp"
#include "core/eval.hpp"
#include "core/tensor.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mergcn_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline mergcn::Tensor random_tensor(mergcn::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  mergcn::Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Six-nested-loop reference cross-correlation (loops over c_out, c_in and
// output positions are folded into the index arithmetic).
inline mergcn::Tensor conv3d_oracle(const mergcn::Tensor& in, const mergcn::Tensor& k, std::array<std::size_t, 3> stride,
                                    std::array<std::size_t, 3> pad) {
  const std::size_t ci = in.dim(0), T = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t co = k.dim(0), kt = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const std::size_t ot = (T + 2 * pad[0] - kt) / stride[0] + 1;
  const std::size_t oh = (H + 2 * pad[1] - kh) / stride[1] + 1;
  const std::size_t ow = (W + 2 * pad[2] - kw) / stride[2] + 1;
  mergcn::Tensor out({co, ot, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t t = 0; t < ot; ++t)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t a = 0; a < kt; ++a)
              for (std::size_t b = 0; b < kh; ++b)
                for (std::size_t d = 0; d < kw; ++d) {
                  const long ti = long(t * stride[0] + a) - long(pad[0]);
                  const long yi = long(y * stride[1] + b) - long(pad[1]);
                  const long xi = long(x * stride[2] + d) - long(pad[2]);
                  if (ti < 0 || yi < 0 || xi < 0 || ti >= long(T) || yi >= long(H) || xi >= long(W)) continue;
                  acc += in[((c * T + ti) * H + yi) * W + xi] * k[(((o * ci + c) * kt + a) * kh + b) * kw + d];
                }
          out[((o * ot + t) * oh + y) * ow + x] = acc;
        }
  return out;
}

// Counts N_j and N_{i and j} by scanning every annotation for every AU pair.
struct PairCountOracle {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> pairs;  // n x n row-major
};

inline PairCountOracle count_pairs(const std::vector<mergcn::AuSet>& annotations, const std::vector<int>& ids) {
  const std::size_t n = ids.size();
  PairCountOracle o{std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (const auto& ann : annotations)
        if (ann.count(ids[i]) && ann.count(ids[j])) ++o.pairs[i * n + j];
  for (std::size_t j = 0; j < n; ++j)
    for (const auto& ann : annotations) o.counts[j] += ann.count(ids[j]);
  return o;
}

// Random non-empty annotation sets over AU ids 1..max_id.
inline std::vector<mergcn::AuSet> random_annotations(std::mt19937_64& rng, int max_id, std::size_t max_count) {
  std::uniform_int_distribution<std::size_t> count(1, max_count);
  std::uniform_int_distribution<int> id(1, max_id);
  std::uniform_int_distribution<int> size(1, std::min(4, max_id));
  std::vector<mergcn::AuSet> out(count(rng));
  for (auto& ann : out) {
    const int k = size(rng);
    while (static_cast<int>(ann.size()) < k) ann.insert(id(rng));
  }
  return out;
}

// In-memory manifest with random subjects, classes and AU sets (no frame files).
inline mergcn::DatasetManifest random_manifest(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n_subjects(2, 9), n_classes(2, 5), n_records(8, 60);
  mergcn::DatasetManifest m;
  const std::size_t classes = n_classes(rng), subjects = n_subjects(rng), records = n_records(rng);
  for (std::size_t c = 0; c < classes; ++c) m.class_names.push_back("c" + std::to_string(c));
  std::uniform_int_distribution<std::size_t> pick_subject(0, subjects - 1), pick_class(0, classes - 1);
  auto aus = random_annotations(rng, 10, records);
  for (std::size_t i = 0; i < records; ++i) {
    mergcn::SequenceRecord r;
    r.id = "r" + std::to_string(i);
    r.frames_path = "frames/" + r.id + ".mert";
    // Every subject gets at least one record so the subject count is exact.
    r.subject = "s" + std::to_string(i < subjects ? i : pick_subject(rng));
    r.emotion = m.class_names[pick_class(rng)];
    r.aus = aus[i % aus.size()];
    r.num_frames = 8;
    m.records.push_back(r);
  }
  m.validate();
  return m;
}

// Checks partition, disjointness, subject exclusivity (LOSO) and class
// stratification (k-fold). Returns the first violation, or "" when valid.
inline std::string plan_violation(const mergcn::DatasetManifest& m, const mergcn::SplitPlan& plan) {
  std::map<std::string, std::size_t> test_hits;
  std::map<std::string, const mergcn::SequenceRecord*> by_id;
  for (const auto& r : m.records) by_id[r.id] = &r;
  for (const auto& f : plan.folds) {
    std::set<std::string> train(f.train_ids.begin(), f.train_ids.end()), test(f.test_ids.begin(), f.test_ids.end());
    if (train.size() != f.train_ids.size() || test.size() != f.test_ids.size()) return "duplicate id inside a fold";
    if (test.empty()) return "empty test set in " + f.label;
    for (const auto& id : test)
      if (train.count(id)) return "id " + id + " is in both train and test of " + f.label;
    if (train.size() + test.size() != m.records.size()) return "fold " + f.label + " does not cover every record";
    for (const auto& id : test) {
      if (!by_id.count(id)) return "unknown id " + id;
      ++test_hits[id];
    }
    for (const auto& id : train)
      if (!by_id.count(id)) return "unknown id " + id;
  }
  for (const auto& r : m.records)
    if (test_hits[r.id] != 1) return "record " + r.id + " is tested " + std::to_string(test_hits[r.id]) + " times";
  if (plan.strategy == mergcn::SplitStrategy::Loso) {
    const auto subjects = m.subjects();
    if (plan.folds.size() != subjects.size()) return "LOSO fold count differs from subject count";
    std::set<std::string> seen;
    for (const auto& f : plan.folds) {
      std::set<std::string> subj;
      for (const auto& id : f.test_ids) subj.insert(by_id[id]->subject);
      if (subj.size() != 1) return "LOSO fold " + f.label + " mixes subjects";
      const std::string s = *subj.begin();
      if (!seen.insert(s).second) return "subject " + s + " held out twice";
      for (const auto& id : f.train_ids)
        if (by_id[id]->subject == s) return "subject " + s + " leaks into training";
      std::size_t own = 0;
      for (const auto& r : m.records) own += r.subject == s;
      if (own != f.test_ids.size()) return "LOSO fold " + f.label + " misses records of its subject";
    }
  } else {
    if (plan.folds.size() != plan.k) return "k-fold plan has the wrong fold count";
    for (const auto& cls : m.class_names) {
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& f : plan.folds) {
        std::size_t n = 0;
        for (const auto& id : f.test_ids) n += by_id[id]->emotion == cls;
        lo = std::min(lo, n);
        hi = std::max(hi, n);
      }
      if (hi - lo > 1) return "class " + cls + " test counts differ by " + std::to_string(hi - lo);
    }
  }
  return "";
}

}  // namespace testing
