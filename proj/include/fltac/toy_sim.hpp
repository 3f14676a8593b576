#pragma once

// Approximation error versus adapter rank for two related regression
// tasks: one shared adapter of rank r trained on both tasks, against two
// task-specific adapters of rank r/2 trained separately.
//
// The base network is frozen and random with two hidden layers; the rank
// knob is the LoRA rank on every layer (clamped to each layer's min(d, k)).
// Inputs carry a one-hot task code next to x so a single adapter can in
// principle separate the tasks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fltac/data.hpp"
#include "fltac/federation.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"

namespace fltac {

enum class SweepMode { kShared, kPerTask };

inline std::string_view to_string(SweepMode m) {
  return m == SweepMode::kShared ? "shared" : "per_task";
}

inline TaskSpec default_toy_task(int task_id) {
  TaskSpec t;
  t.task_id = task_id;
  t.kind = TaskKind::kSinusoidRegression;
  t.input_dim = 3;
  t.output_dim = 1;
  t.sample_count = 64;
  t.sinusoid.amplitude = 1.0;
  t.sinusoid.phase = task_id == 1 ? 0.0 : 0.5;
  t.sinusoid.noise_std = task_id == 1 ? 0.05 : 0.15;
  return t;
}

struct SweepConfig {
  std::vector<std::size_t> ranks{1, 2, 4, 8, 16, 32};
  std::size_t epochs = 1000;
  TaskSpec task_a = default_toy_task(1);
  TaskSpec task_b = default_toy_task(2);
  std::size_t heldout_samples = 512;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::kTanh;
  double eta = 0.04;
  double adapter_init_std = 0.2;
  std::size_t batch_size = 0;  // 0: full batch
  std::size_t repetitions = 10;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
};

inline void validate(const SweepConfig& c) {
  if (c.ranks.empty()) throw ConfigError("toy_sim: ranks must not be empty");
  if (!std::is_sorted(c.ranks.begin(), c.ranks.end())) {
    throw ConfigError("toy_sim: ranks must be sorted ascending");
  }
  if (c.ranks.front() < 1) throw ConfigError("toy_sim: ranks must be >= 1");
  if (c.repetitions < 1) throw ConfigError("toy_sim: repetitions must be >= 1");
  if (c.epochs < 1) throw ConfigError("toy_sim: epochs must be >= 1");
  if (!(c.eta > 0.0)) throw ConfigError("toy_sim: eta must be > 0");
  if (c.heldout_samples < 1) throw ConfigError("toy_sim: heldout_samples must be >= 1");
  validate(c.task_a);
  validate(c.task_b);
  if (c.task_a.input_dim != c.task_b.input_dim || c.task_a.output_dim != c.task_b.output_dim) {
    throw ConfigError("toy_sim: both tasks need the same input/output dims");
  }
  if (c.task_a.task_id == c.task_b.task_id) throw ConfigError("toy_sim: task ids must differ");
}

/// One (rank, mode, repetition) result.
struct SweepPoint {
  std::size_t rank = 0;
  SweepMode mode = SweepMode::kShared;
  std::uint64_t seed = 0;
  std::size_t adapter_rank = 0;  // per-adapter rank actually trained
  bool rank_floored = false;     // per_task with rank < 2
  double mse = 0.0;
};

struct SweepRow {
  std::size_t rank = 0;
  SweepMode mode = SweepMode::kShared;
  std::size_t adapter_rank = 0;
  bool rank_floored = false;
  double mean_mse = 0.0;
  double std_mse = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;  // ordered by (rank, mode, repetition)
  std::vector<SweepRow> rows;      // ordered by (rank, mode)
};

namespace detail {

struct ToyData {
  BaseModel model;
  Dataset train_a, train_b, test_a, test_b;
};

inline ToyData make_toy_data(const SweepConfig& c, std::uint64_t rep_seed) {
  std::vector<std::size_t> dims{c.task_a.input_dim};
  dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
  dims.push_back(c.task_a.output_dim);
  Rng model_rng(derive_seed(rep_seed, {0xBA5EULL}));
  BaseModel model = BaseModel::random(dims, c.activation, model_rng);
  const auto gen = [&](const TaskSpec& spec, std::uint64_t tag, std::size_t n) {
    TaskSpec s = spec;
    s.sample_count = n;
    Rng rng(derive_seed(rep_seed, {tag, static_cast<std::uint64_t>(spec.task_id)}));
    return generate_task(s, rng);
  };
  return ToyData{std::move(model),
                 gen(c.task_a, 0xDA7AULL, c.task_a.sample_count),
                 gen(c.task_b, 0xDA7AULL, c.task_b.sample_count),
                 gen(c.task_a, 0x7E57ULL, c.heldout_samples),
                 gen(c.task_b, 0x7E57ULL, c.heldout_samples)};
}

inline Adapter train_adapter(const BaseModel& model, const Shard& shard, std::size_t rank,
                             const SweepConfig& c, std::uint64_t seed) {
  Rng init_rng(derive_seed(seed, {0xADAULL}));
  const auto ranks = clamped_ranks(model, rank);
  Adapter adapter = init_adapter(model, ranks, init_rng, c.adapter_init_std);
  Rng batch_rng(derive_seed(seed, {0xBA7CULL}));
  const std::size_t batch = c.batch_size == 0 ? shard.size() : c.batch_size;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    const Dataset mb = minibatch(shard, batch, batch_rng);
    adapter = sgd_step(adapter, loss_and_grad(model, adapter, mb.x, mb.y, LossKind::kMse), c.eta);
  }
  return adapter;
}

inline SweepPoint run_point(const SweepConfig& c, std::size_t rank, SweepMode mode,
                            std::uint64_t rep_seed) {
  const ToyData d = make_toy_data(c, rep_seed);
  const Shard a{0, c.task_a.task_id, d.train_a.x, d.train_a.y};
  const Shard b{0, c.task_b.task_id, d.train_b.x, d.train_b.y};
  SweepPoint p;
  p.rank = rank;
  p.mode = mode;
  p.seed = rep_seed;
  const std::uint64_t train_seed = derive_seed(rep_seed, {rank, static_cast<std::uint64_t>(mode)});
  if (mode == SweepMode::kShared) {
    p.adapter_rank = rank;
    const Shard both = merge_shards({a, b}, 0);
    const Adapter v = train_adapter(d.model, both, rank, c, train_seed);
    p.mse = 0.5 * (evaluate_loss(d.model, v, d.test_a.x, d.test_a.y, LossKind::kMse) +
                   evaluate_loss(d.model, v, d.test_b.x, d.test_b.y, LossKind::kMse));
  } else {
    p.adapter_rank = std::max<std::size_t>(rank / 2, 1);
    p.rank_floored = rank < 2;
    const Adapter va = train_adapter(d.model, a, p.adapter_rank, c, derive_seed(train_seed, {1}));
    const Adapter vb = train_adapter(d.model, b, p.adapter_rank, c, derive_seed(train_seed, {2}));
    p.mse = 0.5 * (evaluate_loss(d.model, va, d.test_a.x, d.test_a.y, LossKind::kMse) +
                   evaluate_loss(d.model, vb, d.test_b.x, d.test_b.y, LossKind::kMse));
  }
  return p;
}

}  // namespace detail

/// Seed used for repetition `rep`; shared by both modes and every rank so
/// the comparison is paired.
inline std::uint64_t repetition_seed(std::uint64_t seed, std::size_t rep) {
  return derive_seed(seed, {0x5EEDULL, rep});
}

inline SweepResult run_sweep(const SweepConfig& c) {
  validate(c);
  struct Job {
    std::size_t rank;
    SweepMode mode;
    std::size_t rep;
  };
  std::vector<Job> jobs;
  for (auto r : c.ranks) {
    for (auto mode : {SweepMode::kShared, SweepMode::kPerTask}) {
      for (std::size_t rep = 0; rep < c.repetitions; ++rep) jobs.push_back({r, mode, rep});
    }
  }
  SweepResult out;
  out.points.resize(jobs.size());
  parallel_for(jobs.size(), c.threads, [&](std::size_t i) {
    out.points[i] = detail::run_point(c, jobs[i].rank, jobs[i].mode, repetition_seed(c.seed, jobs[i].rep));
  });
  for (std::size_t i = 0; i < out.points.size(); i += c.repetitions) {
    SweepRow row;
    row.rank = out.points[i].rank;
    row.mode = out.points[i].mode;
    row.adapter_rank = out.points[i].adapter_rank;
    row.rank_floored = out.points[i].rank_floored;
    double sum = 0.0;
    for (std::size_t k = 0; k < c.repetitions; ++k) sum += out.points[i + k].mse;
    row.mean_mse = sum / static_cast<double>(c.repetitions);
    double var = 0.0;
    for (std::size_t k = 0; k < c.repetitions; ++k) {
      const double d = out.points[i + k].mse - row.mean_mse;
      var += d * d;
    }
    row.std_mse = c.repetitions > 1 ? std::sqrt(var / static_cast<double>(c.repetitions - 1)) : 0.0;
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace fltac
