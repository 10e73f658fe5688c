#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "qcplan/analysis.hpp"
#include "qcplan/synthetic.hpp"

using namespace qcplan;

namespace {

FeatureBatch batch_of(const std::vector<std::pair<double, double>>& mag_sigma) {
  FeatureBatch b;
  for (const auto& [m, s] : mag_sigma) {
    FeatureVector z = FeatureVector::Zero(3);
    z(0) = m;
    b.features.push_back(z);
    b.labels.push_back(0);
    b.meta.push_back({s, false});
  }
  return b;
}

std::vector<double> draw(std::mt19937_64& rng, std::size_t n, double shift) {
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(std::round((detail::standard_normal(rng) + shift) * 20.0) / 20.0);
  return out;
}

}  // namespace

TEST(Histogram, EqualMagnitudesFillOneBin) {
  const auto h = magnitude_histogram(batch_of({{5, 0}, {5, 0}, {5, 0}}), {4.0, 6.0});
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].counts, std::vector<std::size_t>{3});
  EXPECT_EQ(h[0].clipped, 0u);
}

TEST(Histogram, DisjointGroupsDoNotOverlap) {
  const auto h = magnitude_histogram(batch_of({{1, 0}, {2, 0}, {7, 0.5}, {8, 0.5}}), {0, 3, 6, 9});
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].counts, (std::vector<std::size_t>{2, 0, 0}));
  EXPECT_EQ(h[1].counts, (std::vector<std::size_t>{0, 0, 2}));
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(std::min(h[0].counts[b], h[1].counts[b]), 0u);
}

TEST(Histogram, EmptyGroupIsAllZero) {
  const auto h = magnitude_histogram(batch_of({{1, 0}}), {0, 1, 2}, {0.0, 0.3});
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[1].counts, (std::vector<std::size_t>{0, 0}));
}

TEST(Histogram, OutOfRangeValuesAreClippedAndCounted) {
  const auto h = magnitude_histogram(batch_of({{0.5, 0}, {1.0, 0}, {1.5, 0}, {3.0, 0}, {9, 0}}), {1, 2, 3});
  EXPECT_EQ(h[0].counts, (std::vector<std::size_t>{3, 2}));  // 0.5 and 9 fold into the end bins
  EXPECT_EQ(h[0].clipped, 2u);
  EXPECT_EQ(std::accumulate(h[0].counts.begin(), h[0].counts.end(), std::size_t{0}), 5u);
}

TEST(Histogram, RejectsBadEdges) {
  for (const std::vector<double>& edges : {std::vector<double>{1.0}, {1.0, 1.0}, {2.0, 1.0}}) {
    try {
      magnitude_histogram(batch_of({{1, 0}}), edges);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BadEdges);
    }
  }
}

TEST(Pearson, Fixtures) {
  EXPECT_NEAR(pearson({1, 2, 3, 4}, {3, 5, 7, 9}).pearson_r, 1.0, 1e-15);
  EXPECT_NEAR(pearson({1, 2, 3, 4}, {-1, -2, -3, -4}).pearson_r, -1.0, 1e-15);
  EXPECT_NEAR(pearson({1, 2, 3, 4}, {2, 1, 4, 3}).pearson_r, 0.6, 1e-15);
}

TEST(Pearson, Preconditions) {
  try {
    pearson({1, 1, 1}, {1, 2, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateVariance);
  }
  EXPECT_THROW(pearson({1, 2}, {1, 2}), Error);
  EXPECT_THROW(pearson({1, 2, 3}, {1, 2}), Error);
}

TEST(Verification, SmallFixtureThreshold) {
  const auto r = verification_metrics({0.9, 0.8, 0.7}, {0.6, 0.4, 0.2}, {1.0 / 3.0});
  ASSERT_EQ(r.tar_at_far.size(), 1u);
  EXPECT_EQ(r.tar_at_far[0].threshold, 0.6);
  EXPECT_EQ(r.tar_at_far[0].tar, 1.0);
  EXPECT_NEAR(r.tar_at_far[0].achieved_far, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(r.auc, 1.0);
}

TEST(Verification, PerfectSeparation) {
  const auto r = verification_metrics({0.9, 0.95, 0.99, 0.91}, {0.1, 0.2, 0.3, 0.4, 0.5}, {0.2, 0.4, 1.0});
  for (const auto& p : r.tar_at_far) EXPECT_EQ(p.tar, 1.0);
  EXPECT_EQ(r.auc, 1.0);
}

TEST(Verification, UnreachableTargetRejectsEverything) {
  const auto r = verification_metrics({0.5, 0.7}, {0.9, 0.8}, {0.1});
  EXPECT_EQ(r.tar_at_far[0].tar, 0.0);
  EXPECT_EQ(r.tar_at_far[0].achieved_far, 0.0);
}

TEST(Verification, SymmetricScoresGiveHalfArea) {
  const std::vector<double> s{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(auc_threshold_sweep(s, s), 0.5);
  EXPECT_EQ(auc_mann_whitney(s, s), 0.5);
}

TEST(Verification, AucEstimatorsAgree) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = draw(rng, 10 + trial * 20, 1.0);  // coarse grid forces ties
    const auto i = draw(rng, 15 + trial * 25, 0.0);
    EXPECT_NEAR(auc_threshold_sweep(g, i), auc_mann_whitney(g, i), 1e-12);
  }
}

TEST(Verification, TarNeverRisesAsFarTightens) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = draw(rng, 300, 1.5);
    const auto i = draw(rng, 1000, 0.0);
    const auto r = verification_metrics(g, i);
    for (std::size_t k = 1; k < r.tar_at_far.size(); ++k) {
      EXPECT_LE(r.tar_at_far[k].tar, r.tar_at_far[k - 1].tar);
      EXPECT_LE(r.tar_at_far[k].achieved_far, r.tar_at_far[k].far);
    }
  }
}

TEST(Verification, EmptyInputs) {
  try {
    verification_metrics({}, {0.1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyScores);
  }
}

TEST(Identification, Fixtures) {
  FeatureBatch gallery;
  for (std::size_t c = 0; c < 3; ++c) {
    FeatureVector v = FeatureVector::Zero(3);
    v(static_cast<Eigen::Index>(c)) = 1.0;
    gallery.features.push_back(v);
    gallery.labels.push_back(c);
    gallery.meta.push_back({});
  }
  FeatureBatch probes;
  probes.features = {gallery.features[1], (FeatureVector(3) << 0.0, 0.0, 4.0).finished()};
  probes.labels = {1, 2};
  probes.meta.resize(2);
  const auto acc = identification_metrics(gallery, probes, {1, 3});
  EXPECT_EQ(acc.at(1), 1.0);
  EXPECT_EQ(acc.at(3), 1.0);

  probes.labels = {0, 0};
  EXPECT_EQ(identification_metrics(gallery, probes, {1}).at(1), 0.0);
  try {
    identification_metrics(FeatureBatch{}, probes, {1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyGallery);
  }
}

TEST(Identification, RankOfAllClassesIsPerfect) {
  SyntheticSpec s;
  s.classes = 6;
  s.n_per_class = 10;
  const SyntheticData d = generate_synthetic(s);
  FeatureBatch gallery, probes;
  for (std::size_t i = 0; i < d.batch.size(); ++i) {
    FeatureBatch& dst = i % 2 ? probes : gallery;
    dst.features.push_back(d.batch.features[i]);
    dst.labels.push_back(d.true_labels[i]);
    dst.meta.push_back(d.batch.meta[i]);
  }
  EXPECT_EQ(identification_metrics(gallery, probes, {6}).at(6), 1.0);
}

TEST(Projection, ProxyAndInPlaneSamples) {
  Eigen::MatrixXd w(3, 4);
  w << 2, 0, 0, 0,  //
      1, 1, 0, 0,   //
      0, 0, 1, 0;
  const ProxyMatrix proxies(w);
  FeatureBatch b;
  b.features = {(FeatureVector(4) << 3, -4, 0, 0).finished(), (FeatureVector(4) << 1, 2, 3, 4).finished(),
                (FeatureVector(4) << 0, 0, 1, 0).finished()};
  b.labels = {0, 1, 2};
  b.meta.resize(3);
  const auto rows = projection_export(b, proxies, {0, 1}, 10.0);
  ASSERT_EQ(rows.size(), 4u);  // two proxies + the two samples of classes 0 and 1
  EXPECT_EQ(rows[0].sample_id, "proxy:0");
  EXPECT_NEAR(rows[0].x, 2.0, 1e-15);
  EXPECT_NEAR(rows[0].y, 0.0, 1e-15);
  EXPECT_FALSE(rows[0].p_d.has_value());
  EXPECT_NEAR(std::hypot(rows[2].x, rows[2].y), 5.0, 1e-12);
  EXPECT_LE(std::hypot(rows[3].x, rows[3].y), rows[3].magnitude + 1e-12);
  ASSERT_TRUE(rows[2].p_d.has_value());
  EXPECT_GT(*rows[2].p_d, 0.0);
  EXPECT_LT(*rows[2].p_d, 1.0);
}

TEST(Projection, RandomBatchContracts) {
  std::mt19937_64 rng(3);
  Eigen::MatrixXd w(4, 16);
  for (Eigen::Index k = 0; k < 4; ++k) w.row(k) = detail::normal_vector(rng, 16).transpose();
  FeatureBatch b;
  for (int i = 0; i < 50; ++i) {
    b.features.push_back(30.0 * detail::normal_vector(rng, 16));
    b.labels.push_back(static_cast<std::size_t>(i % 4));
    b.meta.push_back({});
  }
  for (const auto& r : projection_export(b, ProxyMatrix(w), {1, 3}, 32.0)) {
    EXPECT_LE(std::hypot(r.x, r.y), r.magnitude * (1.0 + 1e-12));
  }
  EXPECT_THROW(projection_export(b, ProxyMatrix(w), {1, 1}, 32.0), Error);
}
