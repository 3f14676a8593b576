#pragma once

// Evaluation: clustering quality against the true task labels, held-out
// losses, communication accounting and a 2-D projection of adapter vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fltac/data.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"

namespace fltac {

struct RoundRecord {
  std::size_t round = 0;
  std::map<int, double> per_task_eval_loss;
  double cluster_accuracy = 0.0;
  double purity = 0.0;
  double inertia = 0.0;
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
  std::uint64_t cumulative_bytes = 0;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

/// Rows are clusters, columns are tasks (in ascending task-id order).
struct Contingency {
  std::vector<std::vector<std::size_t>> counts;
  std::vector<int> tasks;
  std::size_t total = 0;
};

template <typename Key>
Contingency contingency(const std::map<Key, std::size_t>& assignment,
                        const std::map<Key, int>& truth, std::size_t n) {
  if (assignment.size() != truth.size()) {
    throw InputError("clustering metrics: " + std::to_string(assignment.size()) +
                     " assignments vs " + std::to_string(truth.size()) + " labels");
  }
  std::set<int> task_set;
  for (const auto& [key, task] : truth) task_set.insert(task);
  if (task_set.size() > n) {
    throw InputError("clustering metrics: " + std::to_string(task_set.size()) +
                     " distinct tasks exceed N=" + std::to_string(n));
  }
  Contingency out;
  out.tasks.assign(task_set.begin(), task_set.end());
  out.counts.assign(n, std::vector<std::size_t>(n, 0));
  for (const auto& [key, cluster] : assignment) {
    const auto it = truth.find(key);
    if (it == truth.end()) throw InputError("clustering metrics: key sets differ");
    if (cluster >= n) {
      throw InputError("clustering metrics: cluster " + std::to_string(cluster) +
                       " out of range for N=" + std::to_string(n));
    }
    const auto col = static_cast<std::size_t>(
        std::lower_bound(out.tasks.begin(), out.tasks.end(), it->second) - out.tasks.begin());
    ++out.counts[cluster][col];
    ++out.total;
  }
  return out;
}

/// Best total over all bijections rows -> columns by exhaustive search.
inline std::size_t best_matching_exhaustive(const std::vector<std::vector<std::size_t>>& w) {
  const std::size_t n = w.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t best = 0;
  do {
    std::size_t s = 0;
    for (std::size_t r = 0; r < n; ++r) s += w[r][perm[r]];
    best = std::max(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Maximum-weight bijection rows -> columns by the Hungarian method
/// (potentials formulation, O(n^3)). Returns the column of every row.
inline std::vector<std::size_t> hungarian_assignment(
    const std::vector<std::vector<std::size_t>>& w) {
  const std::size_t n = w.size();
  if (n == 0) return {};
  std::size_t wmax = 0;
  for (const auto& row : w) {
    for (auto v : row) wmax = std::max(wmax, v);
  }
  // Minimise cost = wmax - w, 1-based arrays.
  const auto cost = [&](std::size_t i, std::size_t j) {
    return static_cast<double>(wmax - w[i - 1][j - 1]);
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline std::size_t best_matching_hungarian(const std::vector<std::vector<std::size_t>>& w) {
  const auto cols = hungarian_assignment(w);
  std::size_t total = 0;
  for (std::size_t r = 0; r < cols.size(); ++r) total += w[r][cols[r]];
  return total;
}

/// Best cluster -> task assignment per row of the contingency table,
/// returned as cluster index -> task id (only clusters with members).
inline std::map<std::size_t, int> best_cluster_to_task(const Contingency& c) {
  const std::size_t n = c.counts.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> best_perm = perm;
  std::size_t best = 0;
  bool first = true;
  if (n <= 8) {
    do {
      std::size_t s = 0;
      for (std::size_t r = 0; r < n; ++r) s += c.counts[r][perm[r]];
      if (first || s > best) {
        best = s;
        best_perm = perm;
        first = false;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    best_perm = hungarian_assignment(c.counts);
  }
  std::map<std::size_t, int> out;
  for (std::size_t r = 0; r < n; ++r) {
    if (best_perm[r] < c.tasks.size()) out[r] = c.tasks[best_perm[r]];
  }
  return out;
}

/// Fraction of items whose cluster maps to their task under the best
/// cluster -> task bijection. Exhaustive for N <= 8, Hungarian above.
template <typename Key>
double cluster_accuracy(const std::map<Key, std::size_t>& assignment,
                        const std::map<Key, int>& truth, std::size_t n) {
  const auto c = contingency(assignment, truth, n);
  if (c.total == 0) return 0.0;
  const std::size_t matched =
      n <= 8 ? best_matching_exhaustive(c.counts) : best_matching_hungarian(c.counts);
  return static_cast<double>(matched) / static_cast<double>(c.total);
}

/// Sum over clusters of the majority-task count, over the total.
template <typename Key>
double purity(const std::map<Key, std::size_t>& assignment, const std::map<Key, int>& truth) {
  if (assignment.size() != truth.size()) {
    throw InputError("purity: " + std::to_string(assignment.size()) + " assignments vs " +
                     std::to_string(truth.size()) + " labels");
  }
  std::map<std::size_t, std::map<int, std::size_t>> table;
  for (const auto& [key, cluster] : assignment) {
    const auto it = truth.find(key);
    if (it == truth.end()) throw InputError("purity: key sets differ");
    ++table[cluster][it->second];
  }
  std::size_t majority = 0;
  for (const auto& [cluster, row] : table) {
    std::size_t m = 0;
    for (const auto& [task, count] : row) m = std::max(m, count);
    majority += m;
  }
  return assignment.empty() ? 0.0
                            : static_cast<double>(majority) / static_cast<double>(assignment.size());
}

/// Bytes moved in one direction: sum over selected clients of
/// (adapters per client) * (scalars per adapter) * bytes_per_scalar.
inline std::uint64_t comm_bytes(const std::vector<std::size_t>& adapters_per_client,
                                std::size_t adapter_params, std::size_t bytes_per_param = 8) {
  std::uint64_t total = 0;
  for (auto n : adapters_per_client) {
    total += static_cast<std::uint64_t>(n) * adapter_params * bytes_per_param;
  }
  return total;
}

inline double eval_task_loss(const BaseModel& model, const Adapter& adapter,
                             const Dataset& heldout, LossKind kind) {
  return evaluate_loss(model, adapter, heldout.x, heldout.y, kind);
}

// ---------------------------------------------------------------------------
// PCA projection by power iteration on the centred Gram matrix.
// ---------------------------------------------------------------------------

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

/// Leading eigenpair of a symmetric PSD matrix.
inline std::pair<double, std::vector<double>> power_iteration(const Matrix& g) {
  const std::size_t n = g.rows();
  Rng rng(0x9CA0D1ULL);
  std::vector<double> v(n);
  for (double& x : v) x = 1.0 + rng.uniform();
  const auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0) {
      for (double& e : x) e /= s;
    }
    return s;
  };
  normalize(v);
  double lambda = 0.0;
  std::vector<double> w(n);
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * v[j];
      w[i] = acc;
    }
    const double norm = normalize(w);
    if (norm == 0.0) return {0.0, v};
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v.swap(w);
    lambda = norm;
    if (diff < 1e-13) break;
  }
  return {lambda, v};
}

inline void fix_sign(std::vector<double>& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  if (!v.empty() && v[arg] < 0.0) {
    for (double& e : v) e = -e;
  }
}

}  // namespace detail

/// Top-two principal-component scores of the given vectors. Each component
/// is oriented so its largest-magnitude score is positive; a component with
/// negligible variance is returned as zeros.
inline std::vector<Point2> project_2d(const std::vector<std::vector<double>>& vectors) {
  const std::size_t n = vectors.size();
  if (n < 2) throw InputError("project_2d: need at least two vectors");
  const std::size_t dim = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != dim) throw ShapeError("project_2d: vectors have differing lengths");
  }
  std::vector<double> mean(dim, 0.0);
  for (const auto& v : vectors) {
    for (std::size_t d = 0; d < dim; ++d) mean[d] += v[d];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix centred(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < dim; ++d) centred(i, d) = vectors[i][d] - mean[d];
  }
  Matrix gram = matmul_nt(centred, centred);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += gram(i, i);

  std::vector<Point2> out(n);
  const double floor = 1e-12 * std::max(trace, std::numeric_limits<double>::min());
  auto [l1, u1] = detail::power_iteration(gram);
  if (!(l1 > floor)) return out;
  detail::fix_sign(u1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) gram(i, j) -= l1 * u1[i] * u1[j];
  }
  auto [l2, u2] = detail::power_iteration(gram);
  const bool second = l2 > floor;
  detail::fix_sign(u2);
  const double s1 = std::sqrt(l1);
  const double s2 = second ? std::sqrt(l2) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i].x = s1 * u1[i];
    out[i].y = second ? s2 * u2[i] : 0.0;
  }
  return out;
}

}  // namespace fltac
