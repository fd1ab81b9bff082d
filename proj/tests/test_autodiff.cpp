#include <cmath>
#include <cstring>
#include <random>

#include "core/autodiff.hpp"
#include "core/container.hpp"
#include "core/error.hpp"
#include "core/gradcheck.hpp"
#include "core/optim.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace mergcn;

namespace {

void check_close(std::span<const double> got, std::initializer_list<double> want, double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  std::size_t i = 0;
  for (double w : want) CHECK(got[i++] == doctest::Approx(w).epsilon(tol));
}

}  // namespace

TEST_CASE("tensor keeps shape and data consistent") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(shape_numel(t.shape()) == t.numel());
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor({2, 0}), Error);
  t.ensure_grad();
  CHECK(t.grad().size() == t.numel());
  CHECK(Tensor::identity(3).at(1, 1) == 1.0);
  CHECK(Tensor::identity(3).at(1, 2) == 0.0);
}

TEST_CASE("matmul examples") {
  Tape tape;
  auto r = ops::matmul(tape.constant(Tensor::identity(2)), tape.constant(Tensor::matrix({{2}, {3}})));
  check_close(r.value().values(), {2, 3});
  auto r2 = ops::matmul(tape.constant(Tensor::matrix({{1, 1}, {0, 1}})), tape.constant(Tensor::matrix({{2}, {3}})));
  check_close(r2.value().values(), {5, 3});
  std::mt19937_64 rng(1);
  auto r3 = ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(testing::random_tensor({3, 4}, rng)));
  CHECK(r3.shape() == Shape{2, 4});
  for (double v : r3.value().values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  try {
    ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3})));
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Shape);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("conv3d examples") {
  Tape tape;
  auto ones = ops::conv3d(tape.constant(Tensor({1, 4, 4, 4}, 1.0)), tape.constant(Tensor({1, 1, 3, 3, 3}, 1.0)), {});
  CHECK(ones.shape() == Shape{1, 2, 2, 2});
  for (double v : ones.value().values()) CHECK(v == 27.0);

  Conv3dGeometry stem{{1, 2, 2}, {1, 3, 3}};
  CHECK(conv3d_output_dims({8, 112, 112}, {3, 7, 7}, stem) == std::array<std::size_t, 3>{8, 56, 56});

  std::mt19937_64 rng(2);
  auto in = testing::random_tensor({1, 2, 3, 3}, rng);
  auto k = testing::random_tensor({1, 1, 2, 2, 2}, rng);
  auto out = ops::conv3d(tape.constant(in), tape.constant(k), {});
  auto oracle = testing::conv3d_oracle(in, k, {1, 1, 1}, {0, 0, 0});
  REQUIRE(out.shape() == oracle.shape());
  for (std::size_t i = 0; i < oracle.numel(); ++i) CHECK(std::abs(out.value()[i] - oracle[i]) < 1e-12);
}

TEST_CASE("conv3d rejects a non-positive output dimension naming the axis") {
  try {
    conv3d_output_dims({2, 8, 8}, {3, 3, 3}, {});
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Shape);
    CHECK(std::string(e.what()).find("T") != std::string::npos);
  }
  Tape tape;
  CHECK_THROWS_AS(ops::conv3d(tape.constant(Tensor({2, 4, 4, 4})), tape.constant(Tensor({1, 3, 1, 1, 1})), {}), Error);
}

TEST_CASE("conv3d matches the loop oracle on random small geometries") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 5), kd(1, 3), sd(1, 3), pd(0, 2), ch(1, 3);
  int checked = 0;
  while (checked < 200) {
    const std::size_t ci = ch(rng), co = ch(rng);
    const std::array<std::size_t, 3> in{dim(rng), dim(rng), dim(rng)};
    const std::array<std::size_t, 3> k{kd(rng), kd(rng), kd(rng)};
    Conv3dGeometry g{{sd(rng), sd(rng), sd(rng)}, {pd(rng), pd(rng), pd(rng)}};
    if (ci * in[0] * in[1] * in[2] > 500) continue;
    bool feasible = true;
    for (int a = 0; a < 3; ++a) feasible = feasible && in[a] + 2 * g.padding[a] >= k[a];
    if (!feasible) {
      CHECK_THROWS_AS(conv3d_output_dims(in, k, g), Error);
      continue;
    }
    auto dims = conv3d_output_dims(in, k, g);
    for (int a = 0; a < 3; ++a) CHECK(dims[a] == (in[a] + 2 * g.padding[a] - k[a]) / g.stride[a] + 1);
    auto x = testing::random_tensor({ci, in[0], in[1], in[2]}, rng);
    auto w = testing::random_tensor({co, ci, k[0], k[1], k[2]}, rng);
    Tape tape;
    auto out = ops::conv3d(tape.constant(x), tape.constant(w), g);
    auto oracle = testing::conv3d_oracle(x, w, g.stride, g.padding);
    REQUIRE(out.shape() == oracle.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < oracle.numel(); ++i) worst = std::max(worst, std::abs(out.value()[i] - oracle[i]));
    CHECK(worst < 1e-12);
    ++checked;
  }
}

TEST_CASE("leaky_relu examples") {
  Tape tape;
  check_close(ops::leaky_relu(tape.constant(Tensor::vector({1.0, 2.0})), 0.2).value().values(), {1.0, 2.0});
  check_close(ops::leaky_relu(tape.constant(Tensor::vector({-1.0})), 0.2).value().values(), {-0.2});
  check_close(ops::leaky_relu(tape.constant(Tensor::vector({-3.0, 4.0})), 0.0).value().values(), {0.0, 4.0});
  CHECK_THROWS_AS(ops::leaky_relu(tape.constant(Tensor::vector({1.0})), 1.0), Error);
}

TEST_CASE("global_avg_pool3d examples") {
  Tape tape;
  auto c = ops::global_avg_pool3d(tape.constant(Tensor({3, 2, 4, 5}, 5.0)));
  check_close(c.value().values(), {5.0, 5.0, 5.0});
  auto m = ops::global_avg_pool3d(tape.constant(Tensor({1, 2, 1, 1}, std::vector<double>{2, 4})));
  check_close(m.value().values(), {3.0});
  CHECK(ops::global_avg_pool3d(tape.constant(Tensor({512, 1, 7, 7}))).shape() == Shape{512});
}

TEST_CASE("linear examples") {
  Tape tape;
  check_close(ops::linear(tape.constant(Tensor::vector({1, 0})), tape.constant(Tensor::identity(2)),
                          tape.constant(Tensor({2})))
                  .value()
                  .values(),
              {1, 0});
  check_close(ops::linear(tape.constant(Tensor::vector({1, 2})), tape.constant(Tensor::matrix({{3, 4}})),
                          tape.constant(Tensor::vector({1})))
                  .value()
                  .values(),
              {12});
  check_close(ops::linear(tape.constant(Tensor({2})), tape.constant(Tensor::matrix({{3, 4}, {5, 6}})),
                          tape.constant(Tensor::vector({7, 8})))
                  .value()
                  .values(),
              {7, 8});
  CHECK_THROWS_AS(ops::linear(tape.constant(Tensor({3})), tape.constant(Tensor({2, 2})), tape.constant(Tensor({2}))),
                  Error);
}

TEST_CASE("softmax cross entropy examples") {
  Tape tape;
  CHECK(ops::softmax_cross_entropy(tape.constant(Tensor({7})), 3).value().item() ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));
  CHECK(ops::softmax_cross_entropy(tape.constant(Tensor::vector({1, 0})), 0).value().item() ==
        doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
  CHECK(std::abs(ops::softmax_cross_entropy(tape.constant(Tensor::vector({1, 0})), 0).value().item() - 0.313262) <
        1e-6);
  const double sat = ops::softmax_cross_entropy(tape.constant(Tensor::vector({100, 0})), 0).value().item();
  CHECK(std::isfinite(sat));
  CHECK(sat >= 0.0);
  CHECK(sat < 1e-40);
  CHECK_THROWS_AS(ops::softmax_cross_entropy(tape.constant(Tensor({3})), 3), Error);
}

TEST_CASE("softmax cross entropy is nonnegative with gradient summing to zero") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> n_dist(2, 9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = n_dist(rng);
    Tape tape;
    auto logits = tape.leaf(testing::random_tensor({n}, rng, -20.0, 20.0));
    auto loss = ops::softmax_cross_entropy(logits, trial % n);
    CHECK(loss.value().item() >= 0.0);
    tape.backward(loss);
    double s = 0.0;
    for (double g : tape.grad(logits)) s += g;
    CHECK(std::abs(s) < 1e-12);
  }
}

TEST_CASE("backward examples") {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({4, 5, 6}));
  tape.backward(ops::sum(x));
  check_close(tape.grad(x), {1, 1, 1});

  Parameter used("used", Tensor::vector({1, 2}));
  Parameter unused("unused", Tensor::vector({3, 4}));
  Tape t2;
  auto u = t2.parameter(used);
  t2.parameter(unused);
  t2.backward(ops::sum(u));
  REQUIRE(unused.value.has_grad());
  for (double g : unused.value.grad()) CHECK(g == 0.0);

  Tape t3;
  CHECK_THROWS_AS(t3.backward(t3.leaf(Tensor({2}))), Error);
}

TEST_CASE("matmul chain gradients match finite differences") {
  std::mt19937_64 rng(5);
  Parameter a("a", testing::random_tensor({3, 4}, rng));
  Parameter b("b", testing::random_tensor({4, 2}, rng));
  Parameter c("c", testing::random_tensor({2, 3}, rng));
  std::vector<Parameter*> params{&a, &b, &c};
  auto report = grad_check(
      [&](Tape& t) {
        auto abc = ops::matmul(ops::matmul(t.parameter(a), t.parameter(b)), t.parameter(c));
        return ops::sum(ops::leaky_relu(abc, 0.3));
      },
      params, {.samples_per_param = 12});
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("every differentiable op passes a finite-difference check on random inputs") {
  std::mt19937_64 rng(6);
  GradCheckOptions opts;
  opts.samples_per_param = 16;
  auto run = [&](const LossClosure& f, std::vector<Parameter*> params) {
    auto r = grad_check(f, params, opts);
    CHECK(r.max_rel_error < 1e-4);
    return r.max_rel_error;
  };

  SUBCASE("matmul") {
    Parameter a("a", testing::random_tensor({3, 2}, rng)), b("b", testing::random_tensor({2, 4}, rng));
    Tensor r = testing::random_tensor({3, 4}, rng);
    run([&](Tape& t) { return ops::sum(ops::matmul(ops::matmul(t.parameter(a), t.parameter(b)), t.constant(Tensor({4, 1}, 1.0)))); },
        {&a, &b});
    run([&](Tape& t) {
      auto y = ops::matmul(t.parameter(a), t.parameter(b));
      return ops::sum(ops::matmul(t.constant(Tensor({1, 3}, std::vector<double>{0.3, -1.2, 0.7})),
                                  ops::matmul(y, t.constant(Tensor({4, 1}, std::vector<double>{r[0], r[1], r[2], r[3]})))));
    },
        {&a, &b});
  }
  SUBCASE("matvec and add and scale") {
    Parameter m("m", testing::random_tensor({3, 4}, rng)), v("v", testing::random_tensor({4}, rng));
    Parameter c("c", testing::random_tensor({3}, rng));
    run([&](Tape& t) {
      auto y = ops::add(ops::matvec(t.parameter(m), t.parameter(v)), ops::scale(t.parameter(c), -1.7));
      return ops::softmax_cross_entropy(y, 1);
    },
        {&m, &v, &c});
  }
  SUBCASE("leaky_relu") {
    Parameter x("x", testing::random_tensor({12}, rng));
    run([&](Tape& t) { return ops::softmax_cross_entropy(ops::leaky_relu(t.parameter(x), 0.2), 4); }, {&x});
  }
  SUBCASE("global_avg_pool3d") {
    Parameter x("x", testing::random_tensor({3, 2, 3, 2}, rng));
    run([&](Tape& t) { return ops::softmax_cross_entropy(ops::global_avg_pool3d(t.parameter(x)), 2); }, {&x});
  }
  SUBCASE("linear") {
    Parameter x("x", testing::random_tensor({4}, rng)), w("w", testing::random_tensor({3, 4}, rng)),
        b("b", testing::random_tensor({3}, rng));
    run([&](Tape& t) { return ops::softmax_cross_entropy(ops::linear(t.parameter(x), t.parameter(w), t.parameter(b)), 0); },
        {&x, &w, &b});
  }
  SUBCASE("softmax_cross_entropy") {
    Parameter x("x", testing::random_tensor({5}, rng, -3, 3));
    run([&](Tape& t) { return ops::softmax_cross_entropy(t.parameter(x), 3); }, {&x});
  }
  SUBCASE("conv3d with bias, stride and padding") {
    Parameter x("x", testing::random_tensor({2, 4, 5, 5}, rng)), k("k", testing::random_tensor({3, 2, 3, 3, 3}, rng)),
        b("b", testing::random_tensor({3}, rng));
    Conv3dGeometry g{{2, 2, 1}, {1, 1, 1}};
    opts.samples_per_param = 24;
    run([&](Tape& t) {
      return ops::softmax_cross_entropy(
          ops::global_avg_pool3d(ops::conv3d(t.parameter(x), t.parameter(k), t.parameter(b), g)), 1);
    },
        {&x, &k, &b});
  }
  SUBCASE("channel_affine") {
    Parameter x("x", testing::random_tensor({3, 2, 2, 2}, rng)), gm("g", testing::random_tensor({3}, rng)),
        bt("b", testing::random_tensor({3}, rng));
    run([&](Tape& t) {
      return ops::softmax_cross_entropy(
          ops::global_avg_pool3d(ops::leaky_relu(ops::channel_affine(t.parameter(x), t.parameter(gm), t.parameter(bt)), 0.1)),
          0);
    },
        {&x, &gm, &bt});
  }
}

TEST_CASE("backward is bitwise deterministic") {
  std::mt19937_64 rng(7);
  Parameter x("x", testing::random_tensor({2, 4, 6, 6}, rng)), k("k", testing::random_tensor({4, 2, 3, 3, 3}, rng));
  auto grads = [&] {
    x.value.clear_grad();
    k.value.clear_grad();
    Tape t;
    auto y = ops::conv3d(t.parameter(x), t.parameter(k), {{1, 2, 2}, {1, 1, 1}});
    t.backward(ops::softmax_cross_entropy(ops::global_avg_pool3d(ops::leaky_relu(y, 0.0)), 2));
    std::vector<double> g(x.value.grad().begin(), x.value.grad().end());
    g.insert(g.end(), k.value.grad().begin(), k.value.grad().end());
    return g;
  };
  auto g1 = grads();
  auto g2 = grads();
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("sgd examples") {
  Parameter p("p", Tensor::scalar(1.0));
  p.value.ensure_grad()[0] = 2.0;
  std::vector<Parameter*> ps{&p};
  sgd_step(ps, {.lr = 0.1, .momentum = 0.0});
  CHECK(p.value[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(p.value.grad()[0] == 0.0);

  sgd_step(ps, {.lr = 0.1, .momentum = 0.0});
  CHECK(p.value[0] == doctest::Approx(0.8).epsilon(1e-15));

  Parameter q("q", Tensor::scalar(0.0));
  std::vector<Parameter*> qs{&q};
  q.value.ensure_grad()[0] = 1.0;
  sgd_step(qs, {.lr = 1.0, .momentum = 0.9});
  CHECK(q.value[0] == doctest::Approx(-1.0).epsilon(1e-15));
  q.value.ensure_grad()[0] = 1.0;
  sgd_step(qs, {.lr = 1.0, .momentum = 0.9});
  CHECK(q.value[0] == doctest::Approx(-2.9).epsilon(1e-15));
}

TEST_CASE("sgd without a gradient names the parameter") {
  Parameter p("stem.weight", Tensor::scalar(1.0));
  std::vector<Parameter*> ps{&p};
  try {
    sgd_step(ps, {});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stem.weight") != std::string::npos);
  }
}

TEST_CASE("gradient clipping bounds the global norm") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Parameter a("a", Tensor({5})), b("b", Tensor({3, 2}));
    for (double& g : a.value.ensure_grad()) g = std::normal_distribution<double>(0, 10)(rng);
    for (double& g : b.value.ensure_grad()) g = std::normal_distribution<double>(0, 10)(rng);
    std::vector<Parameter*> ps{&a, &b};
    const double before = global_grad_norm(ps);
    const double reported = clip_grad_norm(ps, 5.0);
    CHECK(reported == before);
    CHECK(global_grad_norm(ps) <= 5.0 + 1e-9);
  }
}

namespace {

// 0.5 * |x|^2 as a hand-recorded op whose backward is exact (or doubled when `wrong`).
Var half_square(Tape& t, Var x, bool wrong) {
  double v = 0.0;
  for (double e : x.value().values()) v += 0.5 * e * e;
  return t.record(Tensor::scalar(v), {x}, [wrong](Tape& tape, std::size_t self, std::span<const double> up) {
    auto g = tape.input_grad(self, 0);
    const Tensor& xv = tape.value(tape.input_id(self, 0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (wrong ? 2.0 : 1.0) * up[0] * xv[i];
  });
}

}  // namespace

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(9);
  Parameter x("x", testing::random_tensor({6}, rng));
  std::vector<Parameter*> ps{&x};
  auto exact = grad_check([&](Tape& t) { return half_square(t, t.parameter(x), false); }, ps, {.samples_per_param = 6});
  CHECK(exact.max_rel_error < 1e-8);
  CHECK(exact.coordinates_checked == 6);

  auto planted = grad_check([&](Tape& t) { return half_square(t, t.parameter(x), true); }, ps, {.samples_per_param = 6});
  CHECK(planted.max_rel_error > 1e-1);

  Parameter in("in", testing::random_tensor({1, 3, 4, 4}, rng)), k("k", testing::random_tensor({2, 1, 2, 2, 2}, rng));
  std::vector<Parameter*> conv_params{&in, &k};
  auto conv_loss = [&](Tape& t) {
    return ops::softmax_cross_entropy(ops::global_avg_pool3d(ops::conv3d(t.parameter(in), t.parameter(k), {})), 1);
  };
  GradCheckOptions corrupt;
  corrupt.corrupt_backward = true;
  CHECK(grad_check(conv_loss, conv_params, corrupt).max_rel_error > 1e-1);
  CHECK(grad_check(conv_loss, conv_params).max_rel_error < 1e-4);
}

TEST_CASE("grad_check rejects a non-deterministic closure") {
  Parameter x("x", Tensor::vector({0.5, -0.25}));
  std::vector<Parameter*> ps{&x};
  int calls = 0;
  auto drifting = [&](Tape& t) { return ops::scale(ops::sum(t.parameter(x)), 1.0 + 1e-3 * ++calls); };
  CHECK_THROWS_AS(grad_check(drifting, ps), Error);
}

TEST_CASE("tensor container round trip and validation") {
  std::mt19937_64 rng(10);
  std::vector<NamedTensor> entries{{"a.weight", testing::random_tensor({2, 3}, rng)},
                                   {"b", Tensor::scalar(4.0)},
                                   {"frames", testing::random_tensor({1, 2, 3, 4}, rng)}};
  auto bytes = encode_container(entries);
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MERT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  auto back = decode_container(bytes);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].tensor.bitwise_equal(entries[i].tensor));
  }
  CHECK(find_entry(back, "b")->item() == 4.0);
  CHECK(find_entry(back, "missing") == nullptr);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_container(bad_magic), Error);
  auto bad_version = bytes;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_container(bad_version), Error);
  auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(decode_container(truncated), Error);

  testing::TempDir dir("container");
  write_container(dir / "t.mert", entries);
  auto from_file = read_container(dir / "t.mert");
  CHECK(from_file[2].tensor.bitwise_equal(entries[2].tensor));
  CHECK_THROWS_AS(read_container(dir / "absent.mert"), Error);
}
