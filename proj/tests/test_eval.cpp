#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ssda/eval.hpp"
#include "ssda/rng.hpp"

using namespace ssda;
using Labels = std::vector<std::uint8_t>;

TEST(Accumulate, PerfectPredictionIsDiagonal) {
  ConfusionMatrix cm(3);
  accumulate(cm, Labels{0, 1, 2, 2}, Labels{0, 1, 2, 2});
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(2, 2), 2u);
  EXPECT_EQ(cm.total(), 4u);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      if (a != b) {
        EXPECT_EQ(cm.at(a, b), 0u);
      }
}

TEST(Accumulate, IgnoredGroundTruthSkipped) {
  ConfusionMatrix cm(2);
  accumulate(cm, Labels{0, 1, 1}, Labels{kIgnoreLabel, kIgnoreLabel, kIgnoreLabel});
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_EQ(cm.ignored, 3u);
}

TEST(Accumulate, HandCountedMixedCase) {
  ConfusionMatrix cm(2);
  accumulate(cm, Labels{0, 0, 1, 1}, Labels{0, 1, 1, 1});
  EXPECT_EQ(cm.counts, (std::vector<std::uint64_t>{1, 0, 1, 2}));
}

TEST(Accumulate, Errors) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(accumulate(cm, Labels{2}, Labels{0}), DataError);
  EXPECT_THROW(accumulate(cm, Labels{0}, Labels{3}), DataError);
  EXPECT_THROW(accumulate(cm, Labels{0, 1}, Labels{0}), ConfigError);
  ConfusionMatrix other(3);
  EXPECT_THROW(cm += other, IntegrityError);
}

TEST(Accumulate, OrderIndependent) {
  Rng rng(1);
  std::vector<std::vector<std::uint8_t>> preds, gts;
  for (int i = 0; i < 6; ++i) {
    std::vector<std::uint8_t> p(20), g(20);
    for (auto& v : p) v = static_cast<std::uint8_t>(rng.integer(0, 3));
    for (auto& v : g) v = rng.bernoulli(0.1) ? kIgnoreLabel : static_cast<std::uint8_t>(rng.integer(0, 3));
    preds.push_back(p);
    gts.push_back(g);
  }
  ConfusionMatrix forward(4), reverse(4), summed(4);
  for (int i = 0; i < 6; ++i) accumulate(forward, preds[i], gts[i]);
  for (int i = 5; i >= 0; --i) accumulate(reverse, preds[i], gts[i]);
  for (int i = 0; i < 6; ++i) {
    ConfusionMatrix part(4);
    accumulate(part, preds[i], gts[i]);
    summed += part;
  }
  EXPECT_EQ(forward.counts, reverse.counts);
  EXPECT_EQ(forward.counts, summed.counts);
  EXPECT_EQ(forward.ignored, summed.ignored);
}

TEST(Iou, Examples) {
  ConfusionMatrix perfect(3);
  accumulate(perfect, Labels{0, 1, 1}, Labels{0, 1, 1});
  auto r = iou(perfect);
  EXPECT_EQ(r.per_class[0], 1.0);
  EXPECT_EQ(r.per_class[1], 1.0);
  EXPECT_TRUE(std::isnan(r.per_class[2]));  // absent class excluded
  EXPECT_EQ(r.miou, 1.0);

  ConfusionMatrix disjoint(2);
  accumulate(disjoint, Labels{1, 1}, Labels{0, 1});
  EXPECT_EQ(iou(disjoint).per_class[0], 0.0);

  ConfusionMatrix mixed(2);
  accumulate(mixed, Labels{0, 0, 1, 1}, Labels{0, 1, 1, 1});
  r = iou(mixed);
  EXPECT_NEAR(r.per_class[0], 0.5, 1e-12);
  EXPECT_NEAR(r.per_class[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.miou, 0.5833, 1e-4);
}

TEST(Iou, EmptyIsEmptySetError) {
  EXPECT_THROW(iou(ConfusionMatrix(3)), EmptySetError);
}

TEST(Iou, BoundedAndPermutationEquivariant) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::uint8_t> p(50), g(50);
    for (auto& v : p) v = static_cast<std::uint8_t>(rng.integer(0, 3));
    for (auto& v : g) v = static_cast<std::uint8_t>(rng.integer(0, 3));
    ConfusionMatrix cm(4);
    accumulate(cm, p, g);
    const auto r = iou(cm);
    for (double v : r.per_class) {
      if (std::isnan(v)) continue;
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    const std::uint8_t perm[4] = {2, 0, 3, 1};
    for (auto& v : p) v = perm[v];
    for (auto& v : g) v = perm[v];
    ConfusionMatrix pm(4);
    accumulate(pm, p, g);
    const auto rp = iou(pm);
    for (int c = 0; c < 4; ++c) {
      if (std::isnan(r.per_class[c])) {
        EXPECT_TRUE(std::isnan(rp.per_class[perm[c]]));
      } else {
        EXPECT_DOUBLE_EQ(rp.per_class[perm[c]], r.per_class[c]);
      }
    }
    EXPECT_NEAR(rp.miou, r.miou, 1e-12);
  }
}

TEST(Report, FormatAndParse) {
  IouReport r{{0.5, std::numeric_limits<double>::quiet_NaN(), 2.0 / 3.0}, 0.5833333};
  const auto text = format_report(r);
  EXPECT_EQ(text, "class00=0.500000\nclass01=nan\nclass02=0.666667\nmiou=0.583333\n");
  const auto back = parse_report(text);
  ASSERT_EQ(back.per_class.size(), 3u);
  EXPECT_DOUBLE_EQ(back.per_class[0], 0.5);
  EXPECT_TRUE(std::isnan(back.per_class[1]));
  EXPECT_NEAR(back.miou, 0.583333, 1e-12);
  EXPECT_EQ(format_report(back), text);
}

TEST(Report, MalformedIsDataError) {
  EXPECT_THROW(parse_report("class00=0.5\n"), DataError);
  EXPECT_THROW(parse_report("garbage\nmiou=0.1\n"), DataError);
  EXPECT_THROW(parse_report("class01=0.5\nmiou=0.5\n"), DataError);
}

TEST(Report, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "ssda_test_report.txt").string();
  IouReport r{{0.25, 0.75}, 0.5};
  write_report(path, r);
  EXPECT_EQ(format_report(read_report(path)), format_report(r));
  std::filesystem::remove(path);
  EXPECT_THROW(read_report(path), DataError);
}
