#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "fltac/data.hpp"
#include "fltac/toy_sim.hpp"

using namespace fltac;

namespace {

TaskPool pool(int task_id, std::size_t n, std::uint64_t seed) {
  TaskSpec t;
  t.task_id = task_id;
  t.sample_count = n;
  Rng rng(seed);
  return {task_id, generate_task(t, rng)};
}

}  // namespace

TEST(GenerateTask, NoiselessSinusoidIsExact) {
  TaskSpec t;
  t.sinusoid.noise_std = 0.0;
  t.sinusoid.amplitude = 1.7;
  t.sample_count = 200;
  Rng rng(1);
  const Dataset d = generate_task(t, rng);
  for (std::size_t i = 0; i < 200; ++i) {
    const double x = d.x(0, i);
    EXPECT_GE(x, -1.0);
    EXPECT_LE(x, 1.0);
    EXPECT_EQ(d.y(0, i), 1.7 * std::sin(2.0 * std::numbers::pi * x));
  }
}

TEST(GenerateTask, DefaultTaskPairHasShiftedPhaseAndHigherNoise) {
  const TaskSpec a = default_toy_task(1);
  const TaskSpec b = default_toy_task(2);
  EXPECT_EQ(a.sinusoid.phase, 0.0);
  EXPECT_EQ(b.sinusoid.phase, 0.5);
  EXPECT_GT(b.sinusoid.noise_std, a.sinusoid.noise_std);
  EXPECT_EQ(a.sinusoid.noise_std, 0.05);
  EXPECT_EQ(b.sinusoid.noise_std, 0.15);
  EXPECT_EQ(a.sinusoid.amplitude, 1.0);
}

TEST(GenerateTask, NoiseMatchesRequestedStd) {
  TaskSpec t;
  t.sinusoid.noise_std = 0.15;
  t.sample_count = 20000;
  Rng rng(2);
  const Dataset d = generate_task(t, rng);
  double s2 = 0.0;
  for (std::size_t i = 0; i < t.sample_count; ++i) {
    const double r = d.y(0, i) - std::sin(2.0 * std::numbers::pi * d.x(0, i));
    s2 += r * r;
  }
  const double n = static_cast<double>(t.sample_count);
  EXPECT_NEAR(std::sqrt(s2 / n), 0.15, 4.0 * 0.15 / std::sqrt(2.0 * n));
}

TEST(GenerateTask, TaskCodeRows) {
  TaskSpec t;
  t.task_id = 3;
  t.input_dim = 3;
  t.sample_count = 5;
  Rng rng(3);
  const Dataset d = generate_task(t, rng);
  // Two code rows: task 3 -> row 1 + (3 - 1) mod 2 = 1.
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(d.x(1, i), 1.0);
    EXPECT_EQ(d.x(2, i), 0.0);
  }
}

TEST(GenerateTask, NoiselessBlobsSitOnCentres) {
  TaskSpec t;
  t.kind = TaskKind::kGaussianBlobClassification;
  t.blobs.classes = 3;
  t.blobs.noise_std = 0.0;
  t.input_dim = 3;
  t.output_dim = 3;
  t.sample_count = 300;
  Rng rng(4);
  const Dataset d = generate_task(t, rng);
  std::vector<Matrix> centres;
  for (std::size_t c = 0; c < 3; ++c) centres.push_back(blob_center(t, c));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < t.sample_count; ++i) {
    std::size_t label = 0;
    double col_sum = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      col_sum += d.y(c, i);
      if (d.y(c, i) == 1.0) label = c;
    }
    ASSERT_EQ(col_sum, 1.0);  // one-hot
    for (std::size_t r = 0; r < 3; ++r) ASSERT_EQ(d.x(r, i), centres[label](r, 0));
    std::size_t nearest = 0;
    double best = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      double dist = 0.0;
      for (std::size_t r = 0; r < 3; ++r) dist += std::pow(d.x(r, i) - centres[c](r, 0), 2);
      if (dist < best) {
        best = dist;
        nearest = c;
      }
    }
    correct += nearest == label;
  }
  EXPECT_EQ(correct, t.sample_count);
}

TEST(GenerateTask, BlobCentresSeparatedAsConfigured) {
  TaskSpec t;
  t.kind = TaskKind::kGaussianBlobClassification;
  t.blobs.classes = 4;
  t.blobs.separation = 3.0;
  t.input_dim = 4;
  t.output_dim = 4;
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      double dist = 0.0;
      for (std::size_t r = 0; r < 4; ++r) {
        dist += std::pow(blob_center(t, a)(r, 0) - blob_center(t, b)(r, 0), 2);
      }
      EXPECT_NEAR(std::sqrt(dist), 3.0, 1e-12);
    }
  }
  TaskSpec u = t;
  u.task_id = 2;
  EXPECT_NE(blob_center(t, 0), blob_center(u, 0));  // labels rotate per task
}

TEST(TaskSpecValidation, RejectsBadSpecs) {
  TaskSpec t;
  t.sinusoid.noise_std = -1.0;
  EXPECT_THROW(validate(t), ConfigError);
  t = TaskSpec{};
  t.output_dim = 2;
  EXPECT_THROW(validate(t), ConfigError);
  t = TaskSpec{};
  t.task_id = 0;
  EXPECT_THROW(validate(t), ConfigError);
  t = TaskSpec{};
  t.kind = TaskKind::kGaussianBlobClassification;
  t.blobs.classes = 3;
  t.output_dim = 2;
  t.input_dim = 3;
  EXPECT_THROW(validate(t), ConfigError);
}

TEST(Partition, SingleClientGetsEverything) {
  const std::vector<TaskPool> pools{pool(1, 37, 1), pool(2, 11, 2)};
  PartitionOptions opt;
  opt.clients = 1;
  Rng rng(5);
  const auto shards = dirichlet_partition(pools, opt, rng);
  ASSERT_EQ(shards.size(), 2u);
  EXPECT_EQ(shards[0].size(), 37u);
  EXPECT_EQ(shards[1].size(), 11u);
  EXPECT_EQ(shards[0].client_id, 0);
}

TEST(Partition, LargeAlphaIsNearlyUniform) {
  const std::vector<TaskPool> pools{pool(1, 10000, 1), pool(2, 10000, 2)};
  PartitionOptions opt;
  opt.clients = 10;
  opt.alpha = 1e6;
  Rng rng(6);
  const auto shards = dirichlet_partition(pools, opt, rng);
  ASSERT_EQ(shards.size(), 20u);
  for (const auto& s : shards) EXPECT_NEAR(static_cast<double>(s.size()) / 10000.0, 0.1, 0.02);
}

TEST(Partition, Defaults) {
  const PartitionOptions opt;
  EXPECT_EQ(opt.clients, 10u);
  EXPECT_EQ(opt.alpha, 0.5);
  EXPECT_EQ(opt.threshold, 0.01);
  EXPECT_EQ(opt.max_redraws, 100);
}

TEST(Partition, ConservesTotalsAndNoDuplicates) {
  Rng outer(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + outer.below(20);
    const double alpha = 0.05 + 3.0 * outer.uniform();
    std::vector<TaskPool> pools;
    const std::size_t tasks = 1 + outer.below(4);
    for (std::size_t t = 0; t < tasks; ++t) {
      pools.push_back(pool(static_cast<int>(t + 1), 1 + outer.below(300), outer.next_u64()));
    }
    PartitionOptions opt;
    opt.clients = m;
    opt.alpha = alpha;
    Rng rng(outer.next_u64());
    std::vector<std::vector<double>> props;
    const auto shards = dirichlet_partition(pools, opt, rng, &props);
    std::map<int, std::size_t> totals;
    std::set<std::pair<int, int>> pairs;
    for (const auto& s : shards) {
      EXPECT_GE(s.size(), 1u);
      EXPECT_TRUE(pairs.insert({s.client_id, s.task_id}).second);
      totals[s.task_id] += s.size();
      const double p = props[static_cast<std::size_t>(s.task_id - 1)][s.client_id];
      EXPECT_GE(p, opt.threshold);
    }
    for (const auto& pl : pools) EXPECT_EQ(totals[pl.task_id], pl.data.x.cols());
  }
}

TEST(Partition, EveryShardSampleComesFromItsPool) {
  const std::vector<TaskPool> pools{pool(1, 50, 11)};
  Rng rng(8);
  const auto shards = dirichlet_partition(pools, PartitionOptions{}, rng);
  std::multiset<double> original(pools[0].data.x.values().begin(), pools[0].data.x.values().end());
  std::multiset<double> got;
  for (const auto& s : shards) got.insert(s.x.values().begin(), s.x.values().end());
  EXPECT_EQ(got, original);
}

TEST(Partition, ReproducibleBitExactly) {
  const std::vector<TaskPool> pools{pool(1, 80, 1), pool(2, 80, 1)};
  Rng a(9), b(9);
  EXPECT_EQ(dirichlet_partition(pools, PartitionOptions{}, a),
            dirichlet_partition(pools, PartitionOptions{}, b));
}

TEST(Partition, InvalidArgumentsRejected) {
  const std::vector<TaskPool> pools{pool(1, 10, 1)};
  Rng rng(10);
  PartitionOptions opt;
  opt.clients = 0;
  EXPECT_THROW(dirichlet_partition(pools, opt, rng), ParameterError);
  opt = PartitionOptions{};
  opt.alpha = 0.0;
  EXPECT_THROW(dirichlet_partition(pools, opt, rng), ParameterError);
  opt = PartitionOptions{};
  opt.threshold = 1.0;
  EXPECT_THROW(dirichlet_partition(pools, opt, rng), ParameterError);
  const std::vector<TaskPool> dup{pool(1, 10, 1), pool(1, 10, 2)};
  EXPECT_THROW(dirichlet_partition(dup, PartitionOptions{}, rng), ParameterError);
}

TEST(Partition, ExhaustedRedrawsAreInfeasible) {
  // With a threshold of 0.99 among many clients essentially every draw is
  // zeroed everywhere.
  Rng rng(11);
  EXPECT_THROW(dirichlet_proportions(50, 5.0, 0.99, rng, 100), InfeasibleError);
}

TEST(LargestRemainder, ConservesAndRespectsZeros) {
  const std::vector<double> p{0.5, 0.0, 0.25, 0.25};
  const auto c = largest_remainder(p, 7);
  EXPECT_EQ(c[0] + c[1] + c[2] + c[3], 7u);
  EXPECT_EQ(c[1], 0u);
  // Quotas 3.5, 0, 1.75, 1.75: the two spare units go to the 0.75 remainders.
  EXPECT_EQ(c[0], 3u);
  EXPECT_EQ(c[2], 2u);
  EXPECT_EQ(c[3], 2u);
  const auto tie = largest_remainder(std::vector<double>{0.5, 0.5}, 3);
  EXPECT_EQ(tie[0], 2u);  // equal remainders go to the lowest index
}

TEST(Minibatch, FullBatchIsPermutationOfShard) {
  const TaskPool p = pool(1, 20, 3);
  const Shard s{0, 1, p.data.x, p.data.y};
  Rng rng(12);
  const Rng before = rng;
  const Dataset b = minibatch(s, 20, rng);
  std::multiset<double> want(s.x.values().begin(), s.x.values().end());
  std::multiset<double> got(b.x.values().begin(), b.x.values().end());
  EXPECT_EQ(got, want);
  EXPECT_EQ(rng, before);  // full batch consumes no randomness
}

TEST(Minibatch, FixedSeedSameBatch) {
  const TaskPool p = pool(1, 30, 4);
  const Shard s{0, 1, p.data.x, p.data.y};
  Rng a(13), b(13);
  const Dataset x = minibatch(s, 7, a);
  const Dataset y = minibatch(s, 7, b);
  EXPECT_EQ(x.x, y.x);
  EXPECT_EQ(x.y, y.y);
}

TEST(Minibatch, WithoutReplacementBelowN) {
  const TaskPool p = pool(1, 30, 5);
  const Shard s{0, 1, p.data.x, p.data.y};
  Rng rng(14);
  const Dataset b = minibatch(s, 30 - 1, rng);
  std::set<double> distinct(b.x.values().begin(), b.x.values().end());
  EXPECT_EQ(distinct.size(), 29u);
  const Dataset big = minibatch(s, 64, rng);
  EXPECT_EQ(big.x.cols(), 64u);
  EXPECT_THROW(minibatch(s, 0, rng), ParameterError);
}

TEST(Minibatch, BatchMeanTracksShardMean) {
  const TaskPool p = pool(1, 100, 6);
  const Shard s{0, 1, p.data.x, p.data.y};
  double shard_mean = 0.0;
  for (double v : s.x.values()) shard_mean += v / 100.0;
  Rng rng(15);
  const int draws = 4000;
  double total = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Dataset b = minibatch(s, 10, rng);
    for (double v : b.x.values()) total += v;
  }
  // x ~ U[-1, 1] has std 1/sqrt(3); 40000 draws.
  EXPECT_NEAR(total / (draws * 10.0), shard_mean, 4.0 / std::sqrt(3.0 * draws * 10.0));
}

TEST(ShardCsv, RoundTrip) {
  const std::vector<TaskPool> pools{pool(1, 30, 1), pool(2, 30, 2)};
  PartitionOptions opt;
  opt.clients = 3;
  Rng rng(16);
  const auto shards = dirichlet_partition(pools, opt, rng);
  std::stringstream ss;
  write_shards_csv(ss, shards);
  const std::string header = ss.str().substr(0, ss.str().find('\n'));
  EXPECT_EQ(header, "client_id,task_id,x0,y0");
  EXPECT_EQ(read_shards_csv(ss), shards);
}

TEST(ShardCsv, MalformedInputRejected) {
  std::stringstream bad_header("a,b,c\n");
  EXPECT_THROW(read_shards_csv(bad_header), InputError);
  std::stringstream bad_cell("client_id,task_id,x0,y0\n0,1,abc,1\n");
  EXPECT_THROW(read_shards_csv(bad_cell), InputError);
}

TEST(MergeShards, ConcatenatesColumns) {
  const TaskPool a = pool(1, 3, 1), b = pool(2, 4, 2);
  const Shard merged = merge_shards({{5, 1, a.data.x, a.data.y}, {5, 2, b.data.x, b.data.y}}, 0);
  EXPECT_EQ(merged.size(), 7u);
  EXPECT_EQ(merged.client_id, 5);
  EXPECT_EQ(merged.x(0, 3), b.data.x(0, 0));
}
