#include "rino/config.hpp"
#include "rino/error.hpp"
#include "rino/pipeline.hpp"
#include "rino/synthetic.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace rino;

TEST(Config, DefaultsMatchReferenceSetup) {
  const RunConfig c;
  EXPECT_EQ(c.pipeline.k, 200);
  EXPECT_EQ(c.pipeline.k_q, 30);
  EXPECT_EQ(c.train.network.channels, 42);
  EXPECT_EQ(c.train.network.out_dim, 256);
  EXPECT_TRUE(c.train.objective.toggles.structural);
  EXPECT_FALSE(c.train.objective.toggles.cq_coupling);
  EXPECT_TRUE(c.cache_dir.empty());
}

TEST(Config, ParseOverridesInOrder) {
  const RunConfig c = parse_config(
      "# comment\n"
      "k = 50\n"
      "\n"
      "k_q=12   # trailing comment\n"
      "  lambda5 = 0.25\n"
      "use_contr = off\n"
      "seed = 18446744073709551615\n"
      "k = 60\n"
      "cache_dir = /tmp/a b\n");
  EXPECT_EQ(c.pipeline.k, 60);
  EXPECT_EQ(c.pipeline.k_q, 12);
  EXPECT_EQ(c.train.objective.weights.couple_q, 0.25);
  EXPECT_FALSE(c.train.objective.toggles.contrastive);
  EXPECT_EQ(c.train.seed, 18446744073709551615ull);
  EXPECT_EQ(c.cache_dir, "/tmp/a b");
}

TEST(Config, BaseIsPreservedForMissingKeys) {
  RunConfig base;
  base.train.lr = 0.5;
  const RunConfig c = parse_config("k = 7\n", base);
  EXPECT_EQ(c.train.lr, 0.5);
  EXPECT_EQ(c.pipeline.k, 7);
}

TEST(Config, FormatRoundTrips) {
  RunConfig c;
  c.pipeline.k = 33;
  c.train.objective.tau = 0.123456789012345;
  c.train.objective.toggles.pi_q = false;
  c.train.iterations = 0;
  c.cache_dir = "cache";
  const std::string text = format_config(c);
  EXPECT_EQ(format_config(parse_config(text)), text);
  // Every key appears exactly once, in config_keys order.
  std::size_t pos = 0;
  for (const auto& key : config_keys()) {
    const auto at = text.find(key + " = ", pos);
    ASSERT_NE(at, std::string::npos) << key;
    pos = at + 1;
  }
}

TEST(Config, Errors) {
  RunConfig c;
  EXPECT_THROW(set_config_value(c, "nope", "1"), UsageError);
  EXPECT_THROW(set_config_value(c, "k", "ten"), UsageError);
  EXPECT_THROW(set_config_value(c, "k", "0"), UsageError);
  EXPECT_THROW(set_config_value(c, "k", "3.5"), UsageError);
  EXPECT_THROW(set_config_value(c, "tau", "0"), UsageError);
  EXPECT_THROW(set_config_value(c, "lambda1", "-1"), UsageError);
  EXPECT_THROW(set_config_value(c, "use_pq", "maybe"), UsageError);
  EXPECT_THROW(set_config_value(c, "seed", "-3"), UsageError);
  EXPECT_NO_THROW(set_config_value(c, "lambda1", "0"));
  try {
    parse_config("k = 3\nbroken line\n");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(load_config("/nonexistent/rino.cfg"), UsageError);
}

TEST(Config, LoadFromFile) {
  test::TempDir dir("cfg");
  std::ofstream(dir / "run.cfg") << "k = 40\nk_q = 10\n";
  EXPECT_EQ(load_config(dir / "run.cfg").pipeline.k_q, 10);
  std::ofstream(dir / "bad.cfg") << "k = x\n";
  try {
    load_config(dir / "bad.cfg");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg"), std::string::npos);
  }
}

TEST(Pipeline, CacheMissHitAndCorruption) {
  test::TempDir dir("pipe");
  const Mesh m = normalize_unit_area(icosphere(2));
  BundleSource first;
  const ShapeBundle a = cached_bundle(m, 12, 6, dir.path(), &first);
  EXPECT_FALSE(first.cache_hit);
  const auto file = cache_file_for(dir.path(), m, 12, 6);
  ASSERT_TRUE(std::filesystem::exists(file));

  BundleSource second;
  const ShapeBundle b = cached_bundle(m, 12, 6, dir.path(), &second);
  EXPECT_TRUE(second.cache_hit);
  EXPECT_TRUE(b.basis.evecs == a.basis.evecs);

  // Flip a byte in the payload.
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(std::filesystem::file_size(file) / 2));
    char c = 0;
    f.read(&c, 1);
    f.seekp(static_cast<std::streamoff>(std::filesystem::file_size(file) / 2));
    c = static_cast<char>(c ^ 0x5a);
    f.write(&c, 1);
  }
  BundleSource third;
  const ShapeBundle c = cached_bundle(m, 12, 6, dir.path(), &third);
  EXPECT_FALSE(third.cache_hit);
  bool warned = false;
  for (const auto& msg : third.messages) warned |= msg.find("warning: corrupted cache") != std::string::npos;
  EXPECT_TRUE(warned);
  EXPECT_TRUE(c.basis.evecs == a.basis.evecs);
  BundleSource fourth;
  cached_bundle(m, 12, 6, dir.path(), &fourth);
  EXPECT_TRUE(fourth.cache_hit);
}

TEST(Pipeline, KeyDependsOnSizesAndGeometry) {
  const Mesh m = normalize_unit_area(icosphere(1));
  const std::filesystem::path d = "x";
  EXPECT_NE(cache_file_for(d, m, 12, 6), cache_file_for(d, m, 12, 5));
  EXPECT_NE(cache_file_for(d, m, 12, 6), cache_file_for(d, m, 11, 6));
  EXPECT_NE(cache_file_for(d, m, 12, 6), cache_file_for(d, perturb_gaussian(m, 1e-9, 1), 12, 6));
  EXPECT_EQ(cache_file_for(d, m, 12, 6), cache_file_for(d, normalize_unit_area(icosphere(1)), 12, 6));
}

TEST(Pipeline, EmptyCacheDirDisablesCaching) {
  BundleSource s;
  cached_bundle(normalize_unit_area(icosphere(1)), 8, 4, "", &s);
  EXPECT_FALSE(s.cache_hit);
}

TEST(Pipeline, LoadNormalizedMeshNamesTheFile) {
  test::TempDir dir("load");
  std::ofstream(dir / "bad.off") << "OFF\n3 1 0\n0 0 0\n1 0 0\n";
  try {
    load_normalized_mesh(dir / "bad.off");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.off"), std::string::npos);
  }
  write_mesh(icosphere(1, 3.0), dir / "ok.off");
  EXPECT_NEAR(load_normalized_mesh(dir / "ok.off").total_area(), 1.0, 1e-12);
}
