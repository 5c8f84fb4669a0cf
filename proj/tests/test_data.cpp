#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>

#include "flatmatch/data.hpp"

using namespace flatmatch;

TEST(MakeDataset, NoiselessMoonsLieOnTheirArcs) {
  const auto d = make_dataset(DatasetKind::two_moons, 100, 0.0, 2, 3);
  ASSERT_EQ(d.size(), 100u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto p = d.point(i);
    // Upper arc: unit circle about (0, 0), y >= 0. Lower arc: unit circle
    // about (1, 0.5), y <= 0.5.
    const double cx = d.y[i] == 0 ? 0.0 : 1.0, cy = d.y[i] == 0 ? 0.0 : 0.5;
    EXPECT_NEAR(std::hypot(p[0] - cx, p[1] - cy), 1.0, 1e-9);
    if (d.y[i] == 0) {
      EXPECT_GE(p[1], -1e-12);
    } else {
      EXPECT_LE(p[1], 0.5 + 1e-12);
    }
  }
}

TEST(MakeDataset, BlobsAreBalanced) {
  const auto d = make_dataset(DatasetKind::blobs, 90, 0.3, 3, 1);
  std::map<int, int> count;
  for (int y : d.y) ++count[y];
  EXPECT_EQ(count[0], 30);
  EXPECT_EQ(count[1], 30);
  EXPECT_EQ(count[2], 30);
}

TEST(MakeDataset, ClassesBalancedWithinOne) {
  for (auto kind : {DatasetKind::two_moons, DatasetKind::rings}) {
    const auto d = make_dataset(kind, 101, 0.1, 2, 1);
    const auto ones = std::count(d.y.begin(), d.y.end(), 1);
    EXPECT_LE(std::abs(static_cast<long>(101 - ones) - static_cast<long>(ones)), 1);
  }
}

TEST(MakeDataset, RingsHaveTheirRadii) {
  const auto d = make_dataset(DatasetKind::rings, 40, 0.0, 2, 5);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto p = d.point(i);
    EXPECT_NEAR(std::hypot(p[0], p[1]), d.y[i] == 0 ? 1.0 : 0.5, 1e-12);
  }
}

TEST(MakeDataset, Errors) {
  EXPECT_THROW(make_dataset(DatasetKind::two_moons, 100, 0.1, 3, 1), ConfigError);
  EXPECT_THROW(make_dataset(DatasetKind::rings, 100, 0.1, 4, 1), ConfigError);
  EXPECT_THROW(make_dataset(DatasetKind::blobs, 5, 0.1, 3, 1), ConfigError);
  EXPECT_THROW(make_dataset(DatasetKind::blobs, 50, -1.0, 3, 1), ConfigError);
  EXPECT_NO_THROW(make_dataset(DatasetKind::blobs, 50, 0.1, 5, 1));
}

TEST(MakeDataset, BitDeterministic) {
  const auto a = make_dataset(DatasetKind::two_moons, 200, 0.1, 2, 42);
  const auto b = make_dataset(DatasetKind::two_moons, 200, 0.1, 2, 42);
  const auto c = make_dataset(DatasetKind::two_moons, 200, 0.1, 2, 43);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  EXPECT_NE(a.x, c.x);
}

TEST(ParseDatasetKind, KnownAndUnknown) {
  EXPECT_EQ(parse_dataset_kind("rings"), DatasetKind::rings);
  try {
    parse_dataset_kind("spirals");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "data.kind");
  }
}

TEST(SplitSsl, Sizes) {
  const auto full = make_dataset(DatasetKind::two_moons, 1000, 0.1, 2, 1);
  const auto ds = split_ssl(full, 2, 4, 0.2, 7);
  EXPECT_EQ(ds.labeled().size(), 8u);
  EXPECT_EQ(ds.test().size(), 200u);
  EXPECT_EQ(ds.unlabeled().size(), 792u);
}

TEST(SplitSsl, IsAPartitionWithExactBalance) {
  const auto full = make_dataset(DatasetKind::blobs, 300, 0.5, 3, 2);
  const auto ds = split_ssl(full, 3, 5, 0.25, 9);
  std::multiset<std::size_t> seen;
  for (auto s : ds.labeled().source) seen.insert(s);
  for (auto s : ds.unlabeled().source) seen.insert(s);
  for (auto s : ds.test().source) seen.insert(s);
  ASSERT_EQ(seen.size(), full.size());
  std::size_t expect = 0;
  for (auto s : seen) EXPECT_EQ(s, expect++);

  std::map<int, int> per_class;
  for (int y : ds.labeled().y) ++per_class[y];
  for (int c = 0; c < 3; ++c) EXPECT_EQ(per_class[c], 5);

  // Points keep their coordinates and labels through the split.
  for (std::size_t i = 0; i < ds.labeled().size(); ++i) {
    const auto s = ds.labeled().source[i];
    EXPECT_EQ(ds.labeled().y[i], full.y[s]);
    EXPECT_EQ(ds.labeled().point(i)[0], full.point(s)[0]);
  }
  for (std::size_t i = 0; i < ds.unlabeled().size(); ++i) {
    EXPECT_EQ(ds.oracle_unlabeled_labels()[i], full.y[ds.unlabeled().source[i]]);
  }
}

TEST(SplitSsl, InsufficientPointsIsConfigError) {
  const auto full = make_dataset(DatasetKind::two_moons, 20, 0.1, 2, 1);
  EXPECT_THROW(split_ssl(full, 2, 9, 0.2, 1), ConfigError);
  EXPECT_THROW(split_ssl(full, 2, 1, 1.0, 1), ConfigError);
}

TEST(SplitSsl, Deterministic) {
  const auto full = make_dataset(DatasetKind::two_moons, 300, 0.1, 2, 1);
  const auto a = split_ssl(full, 2, 4, 0.2, 5), b = split_ssl(full, 2, 4, 0.2, 5);
  EXPECT_EQ(a.labeled().source, b.labeled().source);
  EXPECT_EQ(a.unlabeled().source, b.unlabeled().source);
}

TEST(Augment, AllZeroSpecIsIdentity) {
  AugmentationSpec spec{0.0, 0.0, 0.0, 0};
  Rng rng(1);
  const std::vector<double> x{0.3, -0.7}, c{0.0, 0.0};
  EXPECT_EQ(augment(x, spec, Strength::weak, c, rng), x);
  EXPECT_EQ(augment(x, spec, Strength::strong, c, rng), x);
}

TEST(Augment, QuarterTurnAboutOrigin) {
  const std::vector<double> x{1.0, 0.0}, c{0.0, 0.0};
  const auto r = rotate_about(x, c, 90.0);
  EXPECT_NEAR(r[0], 0.0, 1e-12);
  EXPECT_NEAR(r[1], 1.0, 1e-12);
}

TEST(Augment, StrongRotationPreservesDistanceToCentroid) {
  AugmentationSpec spec{0.0, 0.0, 90.0, 0};
  Rng rng(3);
  const std::vector<double> x{2.0, 1.0}, c{0.5, 0.5};
  for (int i = 0; i < 100; ++i) {
    const auto r = augment(x, spec, Strength::strong, c, rng);
    EXPECT_NEAR(std::hypot(r[0] - c[0], r[1] - c[1]), std::hypot(x[0] - c[0], x[1] - c[1]), 1e-12);
  }
}

TEST(Augment, HigherDimensionsGetJitterOnly) {
  AugmentationSpec spec{0.0, 0.0, 90.0, 0};
  Rng rng(3);
  const std::vector<double> x{1.0, 2.0, 3.0}, c{0.0, 0.0, 0.0};
  EXPECT_EQ(augment(x, spec, Strength::strong, c, rng), x);
}

TEST(Augment, WeakJitterIsUnbiased) {
  AugmentationSpec spec{0.2, 0.4, 30.0, 0};
  Rng rng(11);
  const std::vector<double> x{0.5, -1.0}, c{0.0, 0.0};
  const int n = 10000;
  double m0 = 0.0, m1 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto a = augment(x, spec, Strength::weak, c, rng);
    m0 += a[0] - x[0];
    m1 += a[1] - x[1];
  }
  EXPECT_LT(std::abs(m0 / n), 3.0 * spec.weak_jitter_std / 100.0);
  EXPECT_LT(std::abs(m1 / n), 3.0 * spec.weak_jitter_std / 100.0);
}

TEST(Augment, SpecValidation) {
  EXPECT_THROW((AugmentationSpec{0.2, 0.1, 30.0, 0}.validate()), ConfigError);
  EXPECT_THROW((AugmentationSpec{-0.1, 0.1, 30.0, 0}.validate()), ConfigError);
  EXPECT_THROW((AugmentationSpec{0.1, 0.2, 181.0, 0}.validate()), ConfigError);
  EXPECT_NO_THROW((AugmentationSpec{0.0, 0.0, 180.0, 0}.validate()));
}

namespace {
SslDataset small_ds(std::size_t labels_per_class = 4) {
  return split_ssl(make_dataset(DatasetKind::two_moons, 1000, 0.1, 2, 1), 2, labels_per_class, 0.2, 1);
}
}  // namespace

TEST(BatchSampler, PaperBatchSizes) {
  const auto ds = small_ds();
  BatchSampler s(ds, 64, 7, 1);
  const auto b = s.next();
  EXPECT_EQ(b.labeled.size(), 64u);
  EXPECT_EQ(b.unlabeled.size(), 448u);
  BatchSampler eq(ds, 32, 1, 1);
  const auto e = eq.next();
  EXPECT_EQ(e.labeled.size(), e.unlabeled.size());
}

TEST(BatchSampler, EpochCoverageIsEven) {
  const auto ds = small_ds(25);  // n = 50
  BatchSampler s(ds, 64, 1, 3);
  const std::size_t steps = 20, n = ds.labeled().size();
  std::vector<int> count(n, 0);
  for (std::size_t i = 0; i < steps; ++i)
    for (auto k : s.next_labeled()) ++count[k];
  const double expected = std::ceil(static_cast<double>(steps * 64) / static_cast<double>(n));
  for (int c : count) EXPECT_LE(std::abs(c - expected), 1.0);
}

TEST(BatchSampler, ReshufflesEveryPass) {
  EpochShuffler s(10, 4);
  const auto first = s.take(10), second = s.take(10);
  EXPECT_EQ(std::set<std::size_t>(first.begin(), first.end()).size(), 10u);
  EXPECT_EQ(std::set<std::size_t>(second.begin(), second.end()).size(), 10u);
  EXPECT_NE(first, second);
}

TEST(BatchSampler, DeterministicAndStreamsIndependent) {
  const auto ds = small_ds();
  BatchSampler a(ds, 16, 7, 9), b(ds, 16, 7, 9);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(a.next().unlabeled, b.next().unlabeled);
  // Drawing unlabeled batches does not shift the labeled stream.
  BatchSampler c(ds, 16, 7, 9), d(ds, 16, 7, 9);
  for (int i = 0; i < 5; ++i) {
    c.next_unlabeled();
    EXPECT_EQ(c.next_labeled(), d.next_labeled());
  }
}

TEST(BatchSampler, Errors) {
  const auto ds = small_ds();
  EXPECT_THROW(BatchSampler(ds, 0, 7, 1), ConfigError);
  EXPECT_THROW(BatchSampler(ds, 64, 0, 1), ConfigError);
  EXPECT_THROW(EpochShuffler(0, 1), ConfigError);
}

TEST(DatasetCsv, RoundTripWithHiddenLabels) {
  const auto ds = small_ds();
  const auto path = std::filesystem::temp_directory_path() / "flatmatch_ds.csv";
  save_dataset_csv(path, ds);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "x0,x1,label,split");
  const auto back = load_dataset_csv(path);
  EXPECT_EQ(back.labeled().x, ds.labeled().x);
  EXPECT_EQ(back.labeled().y, ds.labeled().y);
  EXPECT_EQ(back.unlabeled().x, ds.unlabeled().x);
  EXPECT_EQ(back.test().y, ds.test().y);
  for (int y : back.oracle_unlabeled_labels()) EXPECT_EQ(y, -1);
  std::filesystem::remove(path);
}
