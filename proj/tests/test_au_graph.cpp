#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "core/au_graph.hpp"
#include "core/error.hpp"
#include "core/gradcheck.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace mergcn;

namespace {

double entry(const AdjacencyMatrix& adj, std::size_t i, std::size_t j) { return adj.a[i * adj.size() + j]; }

std::vector<double> values(const Var& v) { return {v.value().values().begin(), v.value().values().end()}; }

struct Quiet {
  Quiet() { set_warnings_enabled(false); }
  ~Quiet() { set_warnings_enabled(true); }
};

}  // namespace

TEST_CASE("vocabulary examples") {
  std::vector<AuSet> a{{1, 2}, {4}};
  auto v = build_vocabulary(a);
  CHECK(v.ids() == std::vector<int>{1, 2, 4});
  CHECK(v.size() == 3);
  std::vector<AuSet> b{{12}, {12}, {12}};
  CHECK(build_vocabulary(b).ids() == std::vector<int>{12});
  std::vector<AuSet> c{{4, 1}, {1, 4}};
  CHECK(build_vocabulary(c).ids() == std::vector<int>{1, 4});
  CHECK(*v.index_of(4) == 2);
  CHECK(!v.index_of(3).has_value());
}

TEST_CASE("vocabulary rejects empty input") {
  std::vector<AuSet> none;
  CHECK_THROWS_AS(build_vocabulary(none), Error);
  std::vector<AuSet> empty_set{{1}, {}};
  CHECK_THROWS_AS(build_vocabulary(empty_set), Error);
  CHECK_THROWS_AS(AuVocabulary({2, 1}), Error);
  CHECK_THROWS_AS(AuVocabulary({1, 1}), Error);
}

TEST_CASE("adjacency of the three-annotation example") {
  std::vector<AuSet> ann{{1, 2}, {1}, {2, 4}};
  AuVocabulary vocab({1, 2, 4});
  auto adj = build_adjacency(ann, vocab);
  // node 0 = AU1, node 1 = AU2, node 2 = AU4; a[i][j] = P(AU_i | AU_j)
  const double want[3][3] = {{1.0, 0.5, 0.0}, {0.5, 1.0, 1.0}, {0.0, 0.5, 1.0}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(entry(adj, i, j) == want[i][j]);
  auto oracle = testing::count_pairs(ann, vocab.ids());
  CHECK(adj.counts == oracle.counts);
  CHECK(adj.pair_counts == oracle.pairs);
}

TEST_CASE("adjacency degenerate cases") {
  std::vector<AuSet> single{{1}};
  auto one = build_adjacency(single, AuVocabulary({1}));
  CHECK(one.a.shape() == Shape{1, 1});
  CHECK(entry(one, 0, 0) == 1.0);

  Quiet quiet;
  auto missing = build_adjacency(single, AuVocabulary({1, 2}));
  CHECK(entry(missing, 0, 0) == 1.0);
  CHECK(entry(missing, 0, 1) == 0.0);
  CHECK(entry(missing, 1, 1) == 0.0);
  CHECK(missing.zero_columns() == std::vector<std::size_t>{1});
}

TEST_CASE("adjacency rejects an AU missing from the vocabulary") {
  std::vector<AuSet> ann{{1}, {1, 9}};
  try {
    build_adjacency(ann, AuVocabulary({1}));
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("9") != std::string::npos);
    CHECK(msg.find("annotation 1") != std::string::npos);
  }
}

TEST_CASE("adjacency is reconstructed exactly from counts on random annotations") {
  Quiet quiet;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto ann = testing::random_annotations(rng, 10, 50);
    auto vocab = build_vocabulary(ann);
    auto adj = build_adjacency(ann, vocab);
    const std::size_t n = vocab.size();
    for (std::size_t j = 0; j < n; ++j) {
      REQUIRE(adj.counts[j] > 0);
      CHECK(entry(adj, j, j) == 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = entry(adj, i, j);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        CHECK(a == static_cast<double>(adj.pair(i, j)) / static_cast<double>(adj.counts[j]));
        CHECK(std::abs(a * adj.counts[j] - adj.pair(i, j)) < 1e-9);
      }
    }
    auto rebuilt = adjacency_from_counts(adj.counts, adj.pair_counts);
    CHECK(rebuilt.a.bitwise_equal(adj.a));
  }
}

TEST_CASE("adjacency is not symmetrized") {
  // N1 = 2, N2 = 1, N(1 and 2) = 1
  std::vector<AuSet> ann{{1, 2}, {1}};
  auto adj = build_adjacency(ann, AuVocabulary({1, 2}));
  CHECK(entry(adj, 1, 0) == 0.5);  // P(AU2 | AU1)
  CHECK(entry(adj, 0, 1) == 1.0);  // P(AU1 | AU2)
}

TEST_CASE("adjacency options are off by default and opt in") {
  std::vector<AuSet> ann{{1, 2}, {1}, {2, 4}};
  AuVocabulary vocab({1, 2, 4});
  auto row = build_adjacency(ann, vocab, {.row_normalize = true, .binarize_threshold = std::nullopt});
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += entry(row, i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto bin = build_adjacency(ann, vocab, {.binarize_threshold = 0.75});
  CHECK(entry(bin, 1, 0) == 0.0);
  CHECK(entry(bin, 1, 2) == 1.0);
}

TEST_CASE("one-hot node features form the identity") {
  for (std::size_t n : {1u, 3u, 7u}) {
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 1);
    auto x = one_hot_nodes(AuVocabulary(ids));
    CHECK(x.bitwise_equal(Tensor::identity(n)));
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0, c = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        r += x.at(i, j);
        c += x.at(j, i);
      }
      CHECK(r == 1.0);
      CHECK(c == 1.0);
    }
  }
}

TEST_CASE("adjacency export text") {
  std::vector<AuSet> ann{{1, 2}, {1}, {2, 4}};
  AuVocabulary vocab({1, 2, 4});
  CHECK(export_adjacency_text(build_adjacency(ann, vocab), vocab) == "n 3\nvocab 1 2 4\n1 0.5 0\n0.5 1 1\n0 0.5 1\n");
}

TEST_CASE("gcn layer examples") {
  std::mt19937_64 rng(12);
  Tape tape;
  auto h = testing::random_tensor({3, 4}, rng, 0.0, 2.0);
  auto same = gcn_layer_forward(tape.constant(h), tape.constant(Tensor::identity(3)), tape.constant(Tensor::identity(4)), 0.2);
  CHECK(same.value().bitwise_equal(h));

  auto hand = gcn_layer_forward(tape.constant(Tensor::identity(2)), tape.constant(Tensor::matrix({{1, 1}, {0, 1}})),
                                tape.constant(Tensor::matrix({{2}, {3}})), 0.2);
  CHECK(values(hand) == std::vector<double>{5, 3});

  auto leaky = gcn_layer_forward(tape.constant(Tensor::matrix({{1}})), tape.constant(Tensor::matrix({{1}})),
                                 tape.constant(Tensor::matrix({{-1}})), 0.2);
  CHECK(values(leaky)[0] == doctest::Approx(-0.2).epsilon(1e-15));

  try {
    gcn_layer_forward(tape.constant(Tensor({3, 4})), tape.constant(Tensor({2, 2})), tape.constant(Tensor({4, 5})), 0.2);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("n=2") != std::string::npos);
  }
}

TEST_CASE("gcn stack examples") {
  std::vector<AuSet> ann{{1}, {2}, {3}};
  AuVocabulary vocab({1, 2, 3});
  auto adj = build_adjacency(ann, vocab);
  REQUIRE(adj.a.bitwise_equal(Tensor::identity(3)));

  const std::size_t one[] = {3};
  auto stack = GcnStack::build(3, one, 0.2, 1);
  stack.weight(0).value = Tensor::identity(3);
  Tape tape;
  CHECK(gcn_stack_forward(tape, adj, stack).value().bitwise_equal(Tensor::identity(3)));

  std::vector<AuSet> five{{1, 2, 6}, {2, 7}, {6, 9}, {1, 9}};
  auto big = build_vocabulary(five);
  REQUIRE(big.size() == 5);
  const std::size_t dims[] = {1024, 512};
  auto deep = GcnStack::build(5, dims, 0.2, 2);
  CHECK(deep.depth() == 2);
  CHECK(deep.layers()[0].in_dim == 5);
  CHECK(deep.layers()[1].in_dim == 1024);
  Tape t2;
  CHECK(gcn_stack_forward(t2, build_adjacency(five, big), deep).shape() == Shape{5, 512});

  const std::size_t mismatch[] = {4};
  auto wrong = GcnStack::build(4, mismatch, 0.2, 3);
  Tape t3;
  CHECK_THROWS_AS(gcn_stack_forward(t3, adj, wrong), Error);
}

TEST_CASE("gcn weights use the uniform bound and are seed-deterministic") {
  const std::size_t dims[] = {16, 8};
  auto a = GcnStack::build(6, dims, 0.2, 9);
  auto b = GcnStack::build(6, dims, 0.2, 9);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(a.weight(l).value.bitwise_equal(b.weight(l).value));
    const auto& ls = a.layers()[l];
    const double bound = std::sqrt(6.0 / double(ls.in_dim + ls.out_dim));
    for (double w : a.weight(l).value.values()) CHECK(std::abs(w) <= bound);
  }
  CHECK(a.weight(0).name == "gcn.layer0.weight");
  CHECK(a.weight(1).name == "gcn.layer1.weight");
}

TEST_CASE("identity adjacency isolates nodes") {
  std::mt19937_64 rng(13);
  const std::size_t dims[] = {6, 5};
  auto stack = GcnStack::build(4, dims, 0.2, 4);
  auto adj = adjacency_from_counts({1, 1, 1, 1}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tape t1;
  auto base = gcn_stack_forward(t1, adj, stack).value();
  // Changing row 2 of the layer-0 weights (the input for node 2 only) leaves other rows fixed.
  for (std::size_t c = 0; c < 6; ++c) stack.weight(0).value[2 * 6 + c] += 0.5;
  Tape t2;
  auto moved = gcn_stack_forward(t2, adj, stack).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 5; ++c) {
      if (i == 2) continue;
      CHECK(moved.at(i, c) == base.at(i, c));
    }
}

TEST_CASE("graph construction and gcn are equivariant under AU relabeling") {
  Quiet quiet;
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    auto ann = testing::random_annotations(rng, 8, 30);
    auto vocab = build_vocabulary(ann);
    const std::size_t n = vocab.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    // AU at node k is renamed to the id held by node perm[k].
    std::vector<AuSet> relabeled;
    for (const auto& s : ann) {
      AuSet r;
      for (int id : s) r.insert(vocab.ids()[perm[*vocab.index_of(id)]]);
      relabeled.push_back(r);
    }
    auto adj = build_adjacency(ann, vocab);
    auto padj = build_adjacency(relabeled, build_vocabulary(relabeled));
    REQUIRE(padj.size() == n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) CHECK(entry(padj, perm[i], perm[j]) == entry(adj, i, j));

    const std::size_t dims[] = {7, 4};
    auto stack = GcnStack::build(n, dims, 0.2, 20 + trial);
    auto pstack = stack;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 7; ++c) pstack.weight(0).value[perm[i] * 7 + c] = stack.weight(0).value[i * 7 + c];
    Tape t1, t2;
    auto h = gcn_stack_forward(t1, adj, stack).value();
    auto ph = gcn_stack_forward(t2, padj, pstack).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(ph.at(perm[i], c) - h.at(i, c)) < 1e-9);
  }
}

TEST_CASE("gcn layers obey the row-sum and column-sum bound") {
  Quiet quiet;
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    auto ann = testing::random_annotations(rng, 10, 50);
    auto vocab = build_vocabulary(ann);
    auto adj = build_adjacency(ann, vocab);
    const std::size_t n = vocab.size();
    const std::size_t dims[] = {9, 6, 5};
    auto stack = GcnStack::build(n, dims, 0.2 * (trial % 5), 100 + trial);
    double row_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += std::abs(entry(adj, i, j));
      row_sum = std::max(row_sum, s);
    }
    Tape tape;
    const Var a = tape.constant(adj.a);
    Var h = tape.constant(Tensor::identity(n));
    for (std::size_t l = 0; l < stack.depth(); ++l) {
      const Tensor& w = stack.weight(l).value;
      double col_sum = 0.0;
      for (std::size_t c = 0; c < w.dim(1); ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < w.dim(0); ++r) s += std::abs(w.at(r, c));
        col_sum = std::max(col_sum, s);
      }
      double prev = 0.0;
      for (double v : h.value().values()) prev = std::max(prev, std::abs(v));
      h = gcn_layer_forward(h, a, tape.parameter(stack.weight(l)), stack.slope());
      CHECK(h.value().all_finite());
      for (double v : h.value().values()) CHECK(std::abs(v) <= row_sum * prev * col_sum * (1 + 1e-12));
    }
  }
}

TEST_CASE("gcn stack gradients match finite differences") {
  std::vector<AuSet> ann{{1, 2}, {1}, {2, 4}, {4}};
  AuVocabulary vocab({1, 2, 4});
  auto adj = build_adjacency(ann, vocab);
  const std::size_t dims[] = {5, 4};
  auto stack = GcnStack::build(3, dims, 0.2, 5);
  std::vector<Parameter*> ps{&stack.weight(0), &stack.weight(1)};
  auto r = grad_check(
      [&](Tape& t) {
        auto h = gcn_stack_forward(t, adj, stack);
        return ops::softmax_cross_entropy(ops::matvec(h, t.constant(Tensor::vector({0.3, -0.7, 1.1, 0.2}))), 1);
      },
      ps, {.samples_per_param = 12});
  CHECK(r.max_rel_error < 1e-4);
}
