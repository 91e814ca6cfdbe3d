#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "ssda/data.hpp"

using namespace ssda;

namespace {

GeneratorConfig small_generator() {
  GeneratorConfig cfg;
  cfg.n_source = 12;
  cfg.n_target = 16;
  cfg.n_val = 6;
  return cfg;
}

std::set<std::string> ids(const SampleSet& s) {
  std::set<std::string> out;
  for (const auto& item : s.items) out.insert(item.id);
  return out;
}

SampleSet one_image_set(const LabelMap& label) {
  SampleSet s;
  s.items.push_back({"x", Image(label.height, label.width), label});
  return s;
}

}  // namespace

TEST(Generate, SameSeedIsBitIdentical) {
  const auto a = generate_benchmark(small_generator());
  const auto b = generate_benchmark(small_generator());
  ASSERT_EQ(a.source.size(), b.source.size());
  for (std::size_t i = 0; i < a.source.size(); ++i) {
    EXPECT_EQ(a.source.items[i].image, b.source.items[i].image);
    EXPECT_EQ(*a.source.items[i].label, *b.source.items[i].label);
  }
  for (std::size_t i = 0; i < a.target_pool.size(); ++i) EXPECT_EQ(a.target_pool.items[i].image, b.target_pool.items[i].image);
}

TEST(Generate, DifferentSeedsDiffer) {
  auto cfg = small_generator();
  const auto a = generate_benchmark(cfg);
  cfg.seed += 1;
  const auto b = generate_benchmark(cfg);
  EXPECT_NE(a.source.items[0].image, b.source.items[0].image);
}

TEST(Generate, LabelsAndPixelsInRange) {
  const auto bench = generate_benchmark(small_generator());
  for (const SampleSet* set : {&bench.source, &bench.target_pool, &bench.validation}) {
    for (const auto& item : set->items) {
      ASSERT_TRUE(item.label.has_value());
      EXPECT_EQ(item.image.height, 32);
      EXPECT_EQ(item.image.width, 32);
      for (auto v : item.label->values) EXPECT_LT(v, 5);
      for (float v : item.image.rgb) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
  }
}

TEST(Generate, AllClassesOccur) {
  const auto bench = generate_benchmark(small_generator());
  const auto f = class_frequencies(bench.source, 5);
  for (double v : f) EXPECT_GT(v, 0.0);
}

TEST(Generate, ZeroGapDomainsShareRenderer) {
  // With no gap, pixel statistics of both domains should agree closely;
  // with the large gap they should not.
  auto mean_rgb = [](const SampleSet& s) {
    std::array<double, 3> m{};
    std::size_t n = 0;
    for (const auto& item : s.items) {
      for (std::size_t i = 0; i < item.image.rgb.size(); ++i) m[i % 3] += item.image.rgb[i];
      n += item.image.pixels();
    }
    for (auto& v : m) v /= static_cast<double>(n);
    return m;
  };
  auto [s0, t0] = generate_domains(7, 120, 120, 32, 5, GapParams::zero());
  auto [s1, t1] = generate_domains(7, 120, 120, 32, 5, GapParams::large());
  const auto ms0 = mean_rgb(s0), mt0 = mean_rgb(t0), ms1 = mean_rgb(s1), mt1 = mean_rgb(t1);
  double zero_gap = 0, large_gap = 0;
  for (int c = 0; c < 3; ++c) {
    zero_gap = std::max(zero_gap, std::abs(ms0[c] - mt0[c]));
    large_gap = std::max(large_gap, std::abs(ms1[c] - mt1[c]));
  }
  EXPECT_LT(zero_gap, 0.02);
  EXPECT_GT(large_gap, 0.05);
}

TEST(Generate, InvalidArgumentsRejected) {
  EXPECT_THROW(generate_domains(0, 2, 2, 32, 1, GapParams::zero()), ConfigError);
}

TEST(SplitTarget, Examples) {
  const auto bench = generate_benchmark(small_generator());
  const auto& pool = bench.target_pool;
  auto [t0, u0] = split_target(pool, 0, 1);
  EXPECT_TRUE(t0.empty());
  EXPECT_EQ(u0.size(), pool.size());
  auto [tall, uall] = split_target(pool, static_cast<int>(pool.size()), 1);
  EXPECT_EQ(tall.size(), pool.size());
  EXPECT_TRUE(uall.empty());
  EXPECT_THROW(split_target(pool, static_cast<int>(pool.size()) + 1, 1), ArgumentError);
}

TEST(SplitTarget, DisjointCoverAndUnlabeledStripped) {
  const auto bench = generate_benchmark(small_generator());
  auto [t, u] = split_target(bench.target_pool, 5, 3);
  EXPECT_EQ(t.size(), 5u);
  EXPECT_EQ(t.role, Role::target_labeled);
  EXPECT_EQ(u.role, Role::target_unlabeled);
  for (const auto& item : t.items) EXPECT_TRUE(item.label.has_value());
  for (const auto& item : u.items) EXPECT_FALSE(item.label.has_value());
  auto it = ids(t), iu = ids(u);
  for (const auto& id : it) EXPECT_EQ(iu.count(id), 0u);
  std::set<std::string> all = it;
  all.insert(iu.begin(), iu.end());
  EXPECT_EQ(all, ids(bench.target_pool));
}

TEST(SplitTarget, DeterministicPerSeedAndSeedSensitive) {
  const auto bench = generate_benchmark(small_generator());
  EXPECT_EQ(ids(split_target(bench.target_pool, 8, 4).first), ids(split_target(bench.target_pool, 8, 4).first));
  EXPECT_NE(ids(split_target(bench.target_pool, 8, 4).first), ids(split_target(bench.target_pool, 8, 5).first));
}

TEST(ClassFrequencies, Examples) {
  auto f = class_frequencies(one_image_set(LabelMap(4, 4, 0)), 3);
  EXPECT_EQ(f, (std::vector<double>{1.0, 0.0, 0.0}));

  LabelMap half(2, 2, 0);
  half.at(1, 0) = half.at(1, 1) = 1;
  f = class_frequencies(one_image_set(half), 2);
  EXPECT_DOUBLE_EQ(f[0], 0.5);
  EXPECT_DOUBLE_EQ(f[1], 0.5);

  LabelMap mixed(2, 2, 0);  // 25% ignore, remainder 2:1
  mixed.at(0, 0) = kIgnoreLabel;
  mixed.at(1, 1) = 1;
  f = class_frequencies(one_image_set(mixed), 2);
  EXPECT_NEAR(f[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(f[1], 1.0 / 3.0, 1e-12);
}

TEST(ClassFrequencies, Errors) {
  EXPECT_THROW(class_frequencies(one_image_set(LabelMap(2, 2, kIgnoreLabel)), 3), EmptySetError);
  EXPECT_THROW(class_frequencies(SampleSet{}, 3), EmptySetError);
  EXPECT_THROW(class_frequencies(one_image_set(LabelMap(2, 2, 4)), 3), DataError);
}

TEST(ClassFrequencies, SumsToOne) {
  const auto bench = generate_benchmark(small_generator());
  for (const SampleSet* set : {&bench.source, &bench.target_pool}) {
    const auto f = class_frequencies(*set, 5);
    double s = 0;
    for (double v : f) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(BatchSampler, SettingsShapeTheBatch) {
  const auto bench = generate_benchmark(small_generator());
  auto [t, u] = split_target(bench.target_pool, 4, 0);
  BatchSampler ssda(Setting::ssda, &bench.source, &t, &u, {}, 1);
  auto b = ssda.next();
  EXPECT_EQ(b.source.size(), 2u);
  EXPECT_EQ(b.target_labeled.size(), 2u);
  EXPECT_EQ(b.unlabeled.size(), 2u);

  BatchSampler ssl(Setting::ssl, nullptr, &t, &u, {}, 1);
  b = ssl.next();
  EXPECT_TRUE(b.source.empty());
  EXPECT_EQ(b.target_labeled.size(), 2u);

  auto [t0, u0] = split_target(bench.target_pool, 0, 0);
  BatchSampler uda(Setting::uda, &bench.source, &t0, &u0, {3, 2, 1}, 1);
  b = uda.next();
  EXPECT_EQ(b.source.size(), 3u);
  EXPECT_TRUE(b.target_labeled.empty());
  EXPECT_EQ(b.unlabeled.size(), 1u);
}

TEST(BatchSampler, MissingSetNamesSetting) {
  const auto bench = generate_benchmark(small_generator());
  auto [t0, u0] = split_target(bench.target_pool, 0, 0);
  try {
    BatchSampler s(Setting::ssda, &bench.source, &t0, &u0, {}, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("ssda"), std::string::npos);
  }
  EXPECT_THROW(BatchSampler(Setting::uda, nullptr, &t0, &u0, {}, 1), ConfigError);
}

TEST(BatchSampler, FixedSeedGivesIdenticalSequence) {
  const auto bench = generate_benchmark(small_generator());
  auto [t, u] = split_target(bench.target_pool, 4, 0);
  BatchSampler a(Setting::ssda, &bench.source, &t, &u, {}, 9), b(Setting::ssda, &bench.source, &t, &u, {}, 9);
  for (int i = 0; i < 30; ++i) {
    auto x = a.next(), y = b.next();
    for (std::size_t k = 0; k < x.source.size(); ++k) {
      EXPECT_EQ(x.source[k].id, y.source[k].id);
      EXPECT_EQ(x.source[k].image, y.source[k].image);
    }
    for (std::size_t k = 0; k < x.unlabeled.size(); ++k) EXPECT_EQ(x.unlabeled[k].image, y.unlabeled[k].image);
  }
}

TEST(BatchSampler, FlipKeepsImageAndLabelAligned) {
  const auto bench = generate_benchmark(small_generator());
  std::map<std::string, const LabeledImage*> by_id;
  for (const auto& item : bench.source.items) by_id[item.id] = &item;
  auto [t, u] = split_target(bench.target_pool, 4, 0);
  BatchSampler s(Setting::ssda, &bench.source, &t, &u, {}, 2);
  int flipped = 0, total = 0;
  for (int i = 0; i < 200; ++i) {
    for (const auto& item : s.next().source) {
      const auto& orig = *by_id.at(item.id);
      const bool is_flipped = item.image != orig.image;
      if (is_flipped) {
        EXPECT_EQ(item.image, flip_horizontal(orig.image));
        EXPECT_EQ(*item.label, flip_horizontal(*orig.label));
        ++flipped;
      } else {
        EXPECT_EQ(*item.label, *orig.label);
      }
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(flipped) / total, 0.5, 0.1);
}

TEST(BatchSampler, UniformFrequencyOver10kBatches) {
  const auto bench = generate_benchmark(small_generator());
  auto [t, u] = split_target(bench.target_pool, 5, 0);
  BatchSampler s(Setting::ssda, &bench.source, &t, &u, {}, 3);
  std::map<std::string, int> src, tgt, unl;
  for (int i = 0; i < 10000; ++i) {
    auto b = s.next();
    for (const auto& x : b.source) ++src[x.id];
    for (const auto& x : b.target_labeled) ++tgt[x.id];
    for (const auto& x : b.unlabeled) ++unl[x.id];
  }
  auto check = [](const std::map<std::string, int>& counts, std::size_t set_size) {
    ASSERT_EQ(counts.size(), set_size);
    const double expected = 20000.0 / static_cast<double>(set_size);
    for (const auto& [id, n] : counts) {
      EXPECT_GE(n, 0.8 * expected) << id;
      EXPECT_LE(n, 1.2 * expected) << id;
    }
  };
  check(src, bench.source.size());
  check(tgt, t.size());
  check(unl, u.size());
}

TEST(BatchSampler, LabeledStreamReplacement) {
  const auto bench = generate_benchmark(small_generator());
  auto [t, u] = split_target(bench.target_pool, 4, 0);
  BatchSampler s(Setting::ssda, &bench.source, &t, &u, {}, 3);
  EXPECT_THROW(s.set_target_labeled(nullptr, 1), ConfigError);
  auto [t0, u0] = split_target(bench.target_pool, 0, 0);
  BatchSampler uda(Setting::uda, &bench.source, &t, &u0, {}, 3);
  EXPECT_EQ(uda.next().target_labeled.size(), 2u);
  uda.set_target_labeled(&t0, 1);
  EXPECT_TRUE(uda.next().target_labeled.empty());
}

TEST(Roles, RoundTrip) {
  for (Role r : {Role::source, Role::target_labeled, Role::target_unlabeled, Role::target_pseudolabeled,
                 Role::target_pool, Role::validation})
    EXPECT_EQ(parse_role(to_string(r)), r);
  for (Setting s : {Setting::ssda, Setting::uda, Setting::ssl}) EXPECT_EQ(parse_setting(to_string(s)), s);
  EXPECT_THROW(parse_setting("semi"), ConfigError);
  EXPECT_THROW(parse_role("nope"), DataError);
}

TEST(DatasetIo, RoundTripIsExact) {
  const auto dir = std::filesystem::temp_directory_path() / "ssda_test_dataset";
  std::filesystem::remove_all(dir);
  const auto cfg = small_generator();
  const auto bench = generate_benchmark(cfg);
  write_dataset(dir, bench, cfg);
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "s00000.ppm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "labels" / "s00000.pgm"));
  const auto stored = read_dataset(dir);
  EXPECT_EQ(stored.meta, cfg);
  ASSERT_EQ(stored.bench.source.size(), bench.source.size());
  ASSERT_EQ(stored.bench.target_pool.size(), bench.target_pool.size());
  ASSERT_EQ(stored.bench.validation.size(), bench.validation.size());
  for (std::size_t i = 0; i < bench.target_pool.size(); ++i) {
    EXPECT_EQ(stored.bench.target_pool.items[i].id, bench.target_pool.items[i].id);
    EXPECT_EQ(stored.bench.target_pool.items[i].image, bench.target_pool.items[i].image);
    EXPECT_EQ(*stored.bench.target_pool.items[i].label, *bench.target_pool.items[i].label);
  }
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, MissingMetaKeyIsDataError) {
  auto kv = generator_meta(small_generator());
  EXPECT_EQ(generator_from_meta(kv), small_generator());
  kv.erase("gap.gamma");
  EXPECT_THROW(generator_from_meta(kv), DataError);
}
