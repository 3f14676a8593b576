#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <set>

#include "fltac/server.hpp"
#include "test_util.hpp"

using namespace fltac;

namespace {

using Points = std::vector<std::vector<double>>;

std::vector<int> ten_ids() {
  std::vector<int> ids(10);
  for (int i = 0; i < 10; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

/// Minimum k-means objective over every partition into k non-empty groups.
double optimal_inertia(const Points& pts, std::size_t k) {
  std::vector<std::size_t> labels(pts.size());
  double best = 1e300;
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t used) {
    if (pts.size() - i < k - used) return;
    if (i == pts.size()) {
      const auto means = detail::cluster_means(pts, labels, k);
      best = std::min(best, detail::inertia_of(pts, labels, means));
      return;
    }
    // Restricted growth strings enumerate each partition once.
    for (std::size_t c = 0; c <= std::min(used, k - 1); ++c) {
      labels[i] = c;
      rec(i + 1, std::max(used, c + 1));
    }
  };
  rec(0, 0);
  return best;
}

Points blobs(Rng& rng, std::size_t per, const Points& centres, double noise) {
  Points pts;
  for (const auto& c : centres) {
    for (std::size_t i = 0; i < per; ++i) {
      std::vector<double> p = c;
      for (double& v : p) v += rng.normal(0.0, noise);
      pts.push_back(std::move(p));
    }
  }
  return pts;
}

UploadSet make_set(const Points& pts) {
  UploadSet set;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    set.entries.push_back({static_cast<int>(i), 1000 + i, 10, pts[i]});
  }
  return set;
}

AdapterShape vector_shape(std::size_t len) {
  // A 1 x len layer of rank 1 has len + 1 parameters; use d = 1, k = len - 1.
  return {{1, static_cast<std::uint32_t>(len - 1), 1}};
}

template <class T>
concept HasTaskField = requires(T e) { e.task_id; };
template <class T>
concept HasTruthField = requires(T s) { s.truth; };

}  // namespace

TEST(SelectClients, FullFractionSelectsEveryone) {
  Rng rng(1);
  EXPECT_EQ(select_clients(ten_ids(), 1.0, rng), ten_ids());
}

TEST(SelectClients, HalfSelectsFiveDistinctSorted) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = select_clients(ten_ids(), 0.5, rng);
    ASSERT_EQ(s.size(), 5u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::set<int>(s.begin(), s.end()).size(), 5u);
  }
}

TEST(SelectClients, EachClientChosenHalfTheTime) {
  Rng rng(3);
  std::vector<int> hits(10, 0);
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    for (int id : select_clients(ten_ids(), 0.5, rng)) ++hits[static_cast<std::size_t>(id)];
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / draws, 0.5, 0.03);
}

TEST(SelectClients, AtLeastOneAndValidated) {
  Rng rng(4);
  EXPECT_EQ(select_clients({7, 8, 9}, 0.01, rng).size(), 1u);
  EXPECT_THROW(select_clients(ten_ids(), 0.0, rng), ParameterError);
  EXPECT_THROW(select_clients(ten_ids(), 1.5, rng), ParameterError);
}

TEST(KMeans, KEqualsNHasZeroInertia) {
  Rng rng(5);
  Points pts;
  for (int i = 0; i < 6; ++i) pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  const auto res = kmeans(pts, 6, rng);
  EXPECT_EQ(res.inertia, 0.0);
  EXPECT_EQ(std::set<std::size_t>(res.labels.begin(), res.labels.end()).size(), 6u);
}

TEST(KMeans, SingleClusterIsTheMean) {
  Rng rng(6);
  Points pts;
  std::vector<double> mean(4, 0.0);
  for (int i = 0; i < 9; ++i) {
    std::vector<double> p(4);
    for (std::size_t j = 0; j < 4; ++j) {
      p[j] = rng.normal();
      mean[j] += p[j] / 9.0;
    }
    pts.push_back(p);
  }
  const auto res = kmeans(pts, 1, rng);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(res.centroids[0][j], mean[j], 1e-12);
}

TEST(KMeans, SeparatedBlobsReachGlobalOptimum) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Points pts = blobs(rng, 3, {{0, 0}, {10, 0}, {0, 10}}, 0.5);
    KMeansOptions opt;
    opt.restarts = 5;
    const auto res = kmeans(pts, 3, rng, opt);
    const double oracle = optimal_inertia(pts, 3);
    EXPECT_NEAR(res.inertia, oracle, 1e-9 * std::max(1.0, oracle));
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(res.labels[3 * b], res.labels[3 * b + 1]);
      EXPECT_EQ(res.labels[3 * b], res.labels[3 * b + 2]);
    }
  }
}

TEST(KMeans, InertiaTraceNonIncreasing) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Points pts;
    for (int i = 0; i < 40; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
    const auto res = kmeans(pts, 4, rng);
    for (std::size_t i = 1; i < res.trace.size(); ++i) {
      EXPECT_LE(res.trace[i], res.trace[i - 1] * (1 + 1e-12));
    }
    EXPECT_EQ(res.inertia, res.trace.back());
  }
}

TEST(KMeans, NoEmptyClustersWithDuplicates) {
  Points pts(5, std::vector<double>{1.0, 1.0});
  pts.push_back({2.0, 2.0});
  pts.push_back({3.0, 3.0});
  Rng rng(9);
  const auto res = kmeans(pts, 3, rng);
  EXPECT_EQ(std::set<std::size_t>(res.labels.begin(), res.labels.end()).size(), 3u);
  EXPECT_NEAR(res.inertia, 0.0, 1e-12);
}

TEST(KMeans, InvalidInputs) {
  Rng rng(10);
  EXPECT_THROW(kmeans({{1.0}, {2.0}}, 3, rng), InfeasibleError);
  EXPECT_THROW(kmeans({{1.0}, {2.0}}, 0, rng), ParameterError);
  EXPECT_THROW(kmeans({{1.0}, {2.0, 3.0}}, 1, rng), ShapeError);
}

TEST(KMeans, Deterministic) {
  Rng data(11);
  const Points pts = blobs(data, 5, {{0, 0}, {1, 1}}, 1.0);
  Rng a(12), b(12);
  const auto x = kmeans(pts, 2, a), y = kmeans(pts, 2, b);
  EXPECT_EQ(x.labels, y.labels);
  EXPECT_EQ(x.inertia, y.inertia);
}

TEST(Aggregate, SingletonClusterReturnsMember) {
  const Points pts{{1.5, -2.0, 0.25}};
  const UploadSet set = make_set(pts);
  Clustering c;
  c.k = 1;
  c.assignment = {{1000, 0}};
  const auto agg = aggregate(set, c, vector_shape(3));
  EXPECT_EQ(agg.global_vectors.at(0), pts[0]);
  EXPECT_EQ(flatten(agg.writebacks.at(1000)), pts[0]);
}

TEST(Aggregate, OppositeVectorsCancel) {
  const Points pts{{1.0, -3.0, 0.5}, {-1.0, 3.0, -0.5}};
  Clustering c;
  c.k = 1;
  c.assignment = {{1000, 0}, {1001, 0}};
  const auto agg = aggregate(make_set(pts), c, vector_shape(3));
  for (double v : agg.global_vectors.at(0)) EXPECT_EQ(v, 0.0);
}

TEST(Aggregate, MeanMatchesLoopOracle) {
  Rng rng(13);
  Points pts;
  for (int i = 0; i < 7; ++i) {
    std::vector<double> p(11);
    for (double& v : p) v = rng.normal(0.0, 3.0);
    pts.push_back(p);
  }
  Clustering c;
  c.k = 1;
  for (std::size_t i = 0; i < 7; ++i) c.assignment[1000 + i] = 0;
  const auto agg = aggregate(make_set(pts), c, vector_shape(11));
  for (std::size_t j = 0; j < 11; ++j) {
    double s = 0.0;
    for (const auto& p : pts) s += p[j];
    EXPECT_NEAR(agg.global_vectors.at(0)[j], s / 7.0, 1e-12);
  }
  EXPECT_EQ(agg.cluster_sizes.at(0), 7u);
}

TEST(Aggregate, IdenticalMembersAreFixedPoint) {
  const Points pts(4, std::vector<double>{0.1, 0.2, 0.3, 0.7});
  Clustering c;
  c.k = 1;
  for (std::size_t i = 0; i < 4; ++i) c.assignment[1000 + i] = 0;
  const auto agg = aggregate(make_set(pts), c, vector_shape(4));
  EXPECT_EQ(agg.global_vectors.at(0), pts[0]);
}

TEST(Aggregate, WeightedBySampleCount) {
  UploadSet set;
  set.entries.push_back({0, 1, 1, {0.0, 0.0}});
  set.entries.push_back({1, 2, 3, {4.0, 8.0}});
  Clustering c;
  c.k = 1;
  c.assignment = {{1, 0}, {2, 0}};
  const auto agg = aggregate(set, c, vector_shape(2), true);
  EXPECT_EQ(agg.global_vectors.at(0), (std::vector<double>{3.0, 6.0}));
}

TEST(Aggregate, ProtocolAndShapeErrors) {
  const Points pts{{1.0, 2.0}, {3.0, 4.0}};
  Clustering c;
  c.k = 1;
  c.assignment = {{1000, 0}};
  EXPECT_THROW(aggregate(make_set(pts), c, vector_shape(2)), ProtocolError);
  c.assignment = {{1000, 0}, {1001, 0}};
  EXPECT_THROW(aggregate(make_set(pts), c, vector_shape(3)), ShapeError);
  UploadSet dup = make_set(pts);
  dup.entries[1].handle = dup.entries[0].handle;
  EXPECT_THROW(aggregate(dup, c, vector_shape(2)), ProtocolError);
}

TEST(Server, NeverSeesTaskLabels) {
  static_assert(!HasTaskField<UploadEntry>);
  static_assert(!HasTruthField<UploadSet>);
  // Result depends only on the vectors: relabelling handles permutes nothing.
  Rng data(14);
  const Points pts = blobs(data, 4, {{0, 0, 0}, {5, 5, 5}}, 0.3);
  UploadSet a = make_set(pts), b = make_set(pts);
  for (auto& e : b.entries) e.handle = e.handle * 7919 + 3;
  Server sa({2, {}, false}, vector_shape(3)), sb({2, {}, false}, vector_shape(3));
  Rng ra(15), rb(15);
  const auto x = sa.process(a, ra), y = sb.process(b, rb);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(x.clustering.assignment.at(a.entries[i].handle),
              y.clustering.assignment.at(b.entries[i].handle));
  }
  EXPECT_EQ(x.aggregation.global_vectors, y.aggregation.global_vectors);
}

TEST(Server, FewerUploadsThanClustersShrinksK) {
  Server s({4, {}, false}, vector_shape(2));
  Rng rng(16);
  const auto r = s.process(make_set({{1.0, 2.0}, {3.0, 4.0}}), rng);
  EXPECT_EQ(r.clustering.k, 2u);
  EXPECT_EQ(s.globals().size(), 2u);
  UploadSet empty;
  EXPECT_THROW(s.process(empty, rng), ProtocolError);
  EXPECT_THROW(Server({0, {}, false}, vector_shape(2)), ConfigError);
}
