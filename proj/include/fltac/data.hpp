#pragma once

// Synthetic tasks and the non-IID Dirichlet split into per-client shards.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fltac/numeric.hpp"

namespace fltac {

enum class TaskKind { kSinusoidRegression, kGaussianBlobClassification };

inline std::string_view to_string(TaskKind k) {
  return k == TaskKind::kSinusoidRegression ? "sinusoid_regression"
                                            : "gaussian_blob_classification";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "sinusoid_regression") return TaskKind::kSinusoidRegression;
  if (s == "gaussian_blob_classification") return TaskKind::kGaussianBlobClassification;
  throw ParameterError("unknown task kind '" + std::string(s) + "'");
}

struct SinusoidParams {
  double phase = 0.0;
  double noise_std = 0.05;
  double amplitude = 1.0;

  friend bool operator==(const SinusoidParams&, const SinusoidParams&) = default;
};

struct BlobParams {
  std::size_t classes = 2;
  double separation = 4.0;
  double noise_std = 0.5;

  friend bool operator==(const BlobParams&, const BlobParams&) = default;
};

/// Synthetic task definition.
///
/// Sinusoid inputs: row 0 is x ~ U[-1, 1]. When input_dim > 1 the remaining
/// rows carry a constant task code, a one-hot at row
/// 1 + (task_id - 1) mod (input_dim - 1), so a shared model can tell tasks
/// apart the way task prompts do for a language model.
///
/// Blob inputs: class c is centred on simplex vertex (c + task_id) mod
/// classes scaled so neighbouring centres sit `separation` apart; tasks with
/// the same parameters therefore differ in their label assignment.
struct TaskSpec {
  int task_id = 1;
  TaskKind kind = TaskKind::kSinusoidRegression;
  SinusoidParams sinusoid;
  BlobParams blobs;
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  std::size_t sample_count = 100;

  double noise_std() const {
    return kind == TaskKind::kSinusoidRegression ? sinusoid.noise_std : blobs.noise_std;
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline void validate(const TaskSpec& spec) {
  const std::string where = "task " + std::to_string(spec.task_id) + ": ";
  if (spec.task_id < 1) throw ConfigError(where + "task_id must be >= 1");
  if (!(spec.noise_std() >= 0.0)) throw ConfigError(where + "noise_std must be >= 0");
  if (spec.input_dim < 1) throw ConfigError(where + "input_dim must be >= 1");
  if (spec.sample_count < 1) throw ConfigError(where + "sample_count must be >= 1");
  if (spec.kind == TaskKind::kSinusoidRegression) {
    if (spec.output_dim != 1) throw ConfigError(where + "sinusoid output_dim must be 1");
  } else {
    if (spec.blobs.classes < 2) throw ConfigError(where + "blob classes must be >= 2");
    if (spec.output_dim != spec.blobs.classes) {
      throw ConfigError(where + "blob output_dim must equal class count");
    }
    if (spec.input_dim < spec.blobs.classes) {
      throw ConfigError(where + "blob input_dim must be >= class count");
    }
  }
}

/// Centre of class `cls` for a blob task (column vector, input_dim rows).
inline Matrix blob_center(const TaskSpec& spec, std::size_t cls) {
  const std::size_t k = spec.blobs.classes;
  const std::size_t vertex = (cls + static_cast<std::size_t>(spec.task_id)) % k;
  Matrix c(spec.input_dim, 1);
  c(vertex, 0) = spec.blobs.separation / std::numbers::sqrt2;
  return c;
}

struct Dataset {
  Matrix x;  // input_dim x n
  Matrix y;  // output_dim x n
};

inline Dataset generate_task(const TaskSpec& spec, Rng& rng) {
  validate(spec);
  const std::size_t n = spec.sample_count;
  Dataset out{Matrix(spec.input_dim, n), Matrix(spec.output_dim, n)};
  if (spec.kind == TaskKind::kSinusoidRegression) {
    const auto& p = spec.sinusoid;
    const std::size_t code_rows = spec.input_dim - 1;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = rng.uniform(-1.0, 1.0);
      out.x(0, i) = x;
      if (code_rows > 0) {
        out.x(1 + static_cast<std::size_t>(spec.task_id - 1) % code_rows, i) = 1.0;
      }
      out.y(0, i) = p.amplitude * std::sin(2.0 * std::numbers::pi * (x + p.phase)) +
                    p.noise_std * rng.normal();
    }
  } else {
    const auto& p = spec.blobs;
    std::vector<Matrix> centers;
    for (std::size_t c = 0; c < p.classes; ++c) centers.push_back(blob_center(spec, c));
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t cls = static_cast<std::size_t>(rng.below(p.classes));
      for (std::size_t r = 0; r < spec.input_dim; ++r) {
        out.x(r, i) = centers[cls](r, 0) + p.noise_std * rng.normal();
      }
      out.y(cls, i) = 1.0;
    }
  }
  return out;
}

/// One client's samples of one task. Never empty.
struct Shard {
  int client_id = 0;
  int task_id = 0;
  Matrix x;
  Matrix y;

  std::size_t size() const { return x.cols(); }

  friend bool operator==(const Shard&, const Shard&) = default;
};

struct TaskPool {
  int task_id = 0;
  Dataset data;
};

struct PartitionOptions {
  std::size_t clients = 10;
  double alpha = 0.5;
  double threshold = 0.01;
  int max_redraws = 100;
};

/// Proportions for one task: p ~ Dir(alpha 1_m), entries below threshold
/// zeroed and the rest renormalised. Redraws if every entry was zeroed.
inline std::vector<double> dirichlet_proportions(std::size_t m, double alpha, double threshold,
                                                 Rng& rng, int max_redraws = 100) {
  for (int attempt = 0; attempt < max_redraws; ++attempt) {
    std::vector<double> g(m);
    double total = 0.0;
    for (double& v : g) {
      v = rng.gamma(alpha);
      total += v;
    }
    if (!(total > 0.0)) continue;
    double kept = 0.0;
    for (double& v : g) {
      v /= total;
      if (v < threshold) v = 0.0;
      kept += v;
    }
    if (kept > 0.0) {
      for (double& v : g) v /= kept;
      return g;
    }
  }
  throw InfeasibleError("dirichlet_partition: every client fell below the threshold after " +
                        std::to_string(max_redraws) + " draws");
}

/// Splits n items proportionally to p with largest-remainder rounding.
/// Totals are conserved exactly; zero proportions always receive zero.
inline std::vector<std::size_t> largest_remainder(std::span<const double> p, std::size_t n) {
  std::vector<std::size_t> counts(p.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double exact = p[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    if (p[i] > 0.0) rem.emplace_back(exact - std::floor(exact), i);
  }
  // Floating-point sums can overshoot by one in pathological cases.
  while (assigned > n) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  if (rem.empty() && assigned < n) {
    throw ParameterError("largest_remainder: all proportions are zero");
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % rem.size()) {
    ++counts[rem[i].second];
    ++assigned;
  }
  return counts;
}

/// Splits every task pool among `clients` clients. Each pool is shuffled
/// with the RNG and cut into contiguous blocks; (client, task) pairs with a
/// zero allocation produce no shard. Output is ordered by (client, task).
/// `proportions`, when given, receives the post-threshold p of every pool.
inline std::vector<Shard> dirichlet_partition(
    const std::vector<TaskPool>& pools, const PartitionOptions& opt, Rng& rng,
    std::vector<std::vector<double>>* proportions = nullptr) {
  if (opt.clients < 1) throw ParameterError("dirichlet_partition: need at least one client");
  if (!(opt.alpha > 0.0)) throw ParameterError("dirichlet_partition: alpha must be > 0");
  if (!(opt.threshold >= 0.0 && opt.threshold < 1.0)) {
    throw ParameterError("dirichlet_partition: threshold must be in [0, 1)");
  }
  std::set<int> seen;
  std::vector<Shard> shards;
  for (const auto& pool : pools) {
    if (!seen.insert(pool.task_id).second) {
      throw ParameterError("dirichlet_partition: duplicate task id " +
                           std::to_string(pool.task_id));
    }
    const std::size_t n = pool.data.x.cols();
    const auto p = dirichlet_proportions(opt.clients, opt.alpha, opt.threshold, rng,
                                         opt.max_redraws);
    if (proportions) proportions->push_back(p);
    const auto counts = largest_remainder(p, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::size_t offset = 0;
    for (std::size_t c = 0; c < opt.clients; ++c) {
      if (counts[c] == 0) continue;
      std::span<const std::size_t> block(order.data() + offset, counts[c]);
      offset += counts[c];
      shards.push_back({static_cast<int>(c), pool.task_id, gather_columns(pool.data.x, block),
                        gather_columns(pool.data.y, block)});
    }
  }
  std::stable_sort(shards.begin(), shards.end(), [](const Shard& a, const Shard& b) {
    return a.client_id != b.client_id ? a.client_id < b.client_id : a.task_id < b.task_id;
  });
  return shards;
}

/// Uniform minibatch. batch_size < n samples without replacement,
/// batch_size == n returns the shard in stored order, batch_size > n samples
/// with replacement.
inline Dataset minibatch(const Shard& shard, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ParameterError("minibatch: batch_size must be >= 1");
  const std::size_t n = shard.size();
  if (batch_size == n) return {shard.x, shard.y};
  std::vector<std::size_t> pick(batch_size);
  if (batch_size > n) {
    for (auto& p : pick) p = static_cast<std::size_t>(rng.below(n));
  } else {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < batch_size; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(idx[i], idx[j]);
      pick[i] = idx[i];
    }
  }
  return {gather_columns(shard.x, pick), gather_columns(shard.y, pick)};
}

/// Concatenates shards of one client into a single task-agnostic shard.
inline Shard merge_shards(const std::vector<Shard>& parts, int task_id) {
  if (parts.empty()) throw ParameterError("merge_shards: nothing to merge");
  Shard out{parts.front().client_id, task_id, Matrix(), Matrix()};
  for (const auto& s : parts) {
    out.x = hconcat(out.x, s.x);
    out.y = hconcat(out.y, s.y);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: client_id,task_id,x0..,y0..  one row per sample.
// ---------------------------------------------------------------------------

inline void write_shards_csv(std::ostream& os, const std::vector<Shard>& shards) {
  if (shards.empty()) throw InputError("write_shards_csv: no shards");
  const std::size_t in = shards.front().x.rows();
  const std::size_t out = shards.front().y.rows();
  os << "client_id,task_id";
  for (std::size_t i = 0; i < in; ++i) os << ",x" << i;
  for (std::size_t i = 0; i < out; ++i) os << ",y" << i;
  os << '\n';
  os.precision(17);
  for (const auto& s : shards) {
    if (s.x.rows() != in || s.y.rows() != out) {
      throw ShapeError("write_shards_csv: shards have differing dimensions");
    }
    for (std::size_t c = 0; c < s.size(); ++c) {
      os << s.client_id << ',' << s.task_id;
      for (std::size_t r = 0; r < in; ++r) os << ',' << s.x(r, c);
      for (std::size_t r = 0; r < out; ++r) os << ',' << s.y(r, c);
      os << '\n';
    }
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::vector<Shard> read_shards_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("read_shards_csv: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "client_id" || header[1] != "task_id") {
    throw InputError("read_shards_csv: unexpected header '" + line + "'");
  }
  std::size_t in = 0;
  std::size_t out = 0;
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (!header[i].empty() && header[i][0] == 'x') ++in;
    else if (!header[i].empty() && header[i][0] == 'y') ++out;
    else throw InputError("read_shards_csv: unexpected column '" + header[i] + "'");
  }
  std::map<std::pair<int, int>, std::vector<std::vector<double>>> rows;
  std::vector<std::pair<int, int>> order;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw InputError("read_shards_csv: row has " + std::to_string(cells.size()) +
                       " cells, header has " + std::to_string(header.size()));
    }
    std::pair<int, int> key;
    std::vector<double> values;
    try {
      key = {std::stoi(cells[0]), std::stoi(cells[1])};
      for (std::size_t i = 2; i < cells.size(); ++i) values.push_back(std::stod(cells[i]));
    } catch (const std::logic_error&) {
      throw InputError("read_shards_csv: malformed number in '" + line + "'");
    }
    auto [it, inserted] = rows.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(std::move(values));
  }
  std::vector<Shard> shards;
  for (const auto& key : order) {
    const auto& samples = rows[key];
    Shard s{key.first, key.second, Matrix(in, samples.size()), Matrix(out, samples.size())};
    for (std::size_t c = 0; c < samples.size(); ++c) {
      for (std::size_t r = 0; r < in; ++r) s.x(r, c) = samples[c][r];
      for (std::size_t r = 0; r < out; ++r) s.y(r, c) = samples[c][in + r];
    }
    shards.push_back(std::move(s));
  }
  return shards;
}

}  // namespace fltac
