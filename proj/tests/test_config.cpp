#include <fstream>

#include "core/config.hpp"
#include "core/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace mergcn;

TEST_CASE("config files parse key = value lines with comments") {
  testing::TempDir dir("config");
  {
    std::ofstream f(dir / "run.cfg");
    f << "# training\n\nepochs = 12\n  lr=0.01   # inline comment\nvariant = cnn-only\ngcn_dims = 64, 32\n";
  }
  KeyValueConfig kv;
  kv.load_file(dir / "run.cfg");
  CHECK(kv.get_size("epochs", 0) == 12);
  CHECK(kv.get_double("lr", 0) == 0.01);
  CHECK(kv.get_string("variant", "") == "cnn-only");
  CHECK(*kv.get_int_list("gcn_dims") == std::vector<int>{64, 32});
  CHECK(!kv.get("momentum"));
  CHECK(kv.to_json().at("epochs") == "12");
}

TEST_CASE("later settings override earlier ones") {
  testing::TempDir dir("config_override");
  {
    std::ofstream f(dir / "run.cfg");
    f << "epochs = 12\nseed = 3\n";
  }
  KeyValueConfig kv;
  kv.load_file(dir / "run.cfg");
  kv.set("epochs", "4");
  CHECK(kv.get_size("epochs", 0) == 4);
  CHECK(kv.get_u64("seed", 0) == 3);
}

TEST_CASE("config errors name the key and line") {
  testing::TempDir dir("config_bad");
  {
    std::ofstream f(dir / "unknown.cfg");
    f << "epochs = 2\nbogus = 1\n";
    std::ofstream g(dir / "noeq.cfg");
    g << "epochs 2\n";
  }
  KeyValueConfig kv;
  try {
    kv.load_file(dir / "unknown.cfg");
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find(":2:") != std::string::npos);
    CHECK(msg.find("bogus") != std::string::npos);
  }
  CHECK_THROWS_AS(kv.load_file(dir / "noeq.cfg"), Error);
  CHECK_THROWS_AS(kv.load_file(dir / "absent.cfg"), Error);
  CHECK_THROWS_AS(kv.set("nope", "1"), Error);
  kv.set("lr", "fast");
  CHECK_THROWS_AS(kv.get_double("lr", 0), Error);
  kv.set("channel_affine", "maybe");
  CHECK_THROWS_AS(kv.get_bool("channel_affine", false), Error);
  kv.set("k", "-3");
  CHECK_THROWS_AS(kv.get_size("k", 0), Error);
}

TEST_CASE("train config mapping and defaults") {
  KeyValueConfig kv;
  auto d = train_config_from(kv);
  CHECK(d.epochs == 200);
  CHECK(d.lr == 1e-3);
  CHECK(d.momentum == 0.9);
  CHECK(d.clip_norm == 5.0);
  CHECK(d.variant == ModelVariant::MerGcn);
  CHECK(!d.fixed_vocab);
  kv.set("epochs", "3");
  kv.set("variant", "cnn-only");
  kv.set("vocab", "12,1,4");
  kv.set("width_scale", "0.25");
  kv.set("row_normalize", "true");
  auto c = train_config_from(kv);
  CHECK(c.epochs == 3);
  CHECK(c.variant == ModelVariant::CnnOnly);
  CHECK(*c.fixed_vocab == std::vector<int>{1, 4, 12});
  CHECK(c.width_scale == 0.25);
  CHECK(c.adjacency.row_normalize);
  kv.set("epochs", "0");
  CHECK_THROWS_AS(train_config_from(kv), Error);
}

TEST_CASE("split plan selection") {
  std::mt19937_64 rng(3);
  auto m = testing::random_manifest(rng);
  while (m.records.size() < 10) m = testing::random_manifest(rng);
  KeyValueConfig kv;
  auto def = split_plan_from(kv, m);
  CHECK(def.strategy == SplitStrategy::KFold);
  CHECK(def.folds.size() == 5);
  kv.set("strategy", "loso");
  CHECK(split_plan_from(kv, m).folds.size() == m.subjects().size());
  kv.set("strategy", "kfold");
  kv.set("k", "3");
  CHECK(split_plan_from(kv, m).folds.size() == 3);
  kv.set("strategy", "random");
  CHECK_THROWS_AS(split_plan_from(kv, m), Error);
}

TEST_CASE("synthetic config mapping") {
  KeyValueConfig kv;
  kv.set("subjects", "2");
  kv.set("classes", "4");
  kv.set("noise", "0");
  kv.set("channels", "3");
  auto c = synthetic_config_from(kv);
  CHECK(c.n_subjects == 2);
  CHECK(c.n_classes == 4);
  CHECK(c.noise_std == 0.0);
  CHECK(c.channels == 3);
  CHECK(c.class_names.size() == 4);
}
