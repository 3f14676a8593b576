#pragma once

// Server side of a round: client selection, K-means over the uploaded
// adapter vectors and per-cluster mean aggregation with write-back.
//
// Nothing in this header accepts a task label. Uploads are identified by
// opaque handles only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "fltac/client.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"

namespace fltac {

/// Uniform sample of max(1, round(fraction * m)) ids without replacement,
/// returned in ascending order.
inline std::vector<int> select_clients(std::vector<int> ids, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("select_clients: fraction must be in (0, 1]");
  }
  if (ids.empty()) return {};
  std::sort(ids.begin(), ids.end());
  const auto m = ids.size();
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(m))), 1, m);
  if (want == m) return ids;
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(m - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(want);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;          // max centroid movement (Euclidean)
  std::size_t restarts = 1;   // best-of independent k-means++ seedings
};

struct KMeansResult {
  std::size_t k = 0;
  std::vector<std::size_t> labels;  // aligned with the input points
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::vector<double> trace;  // inertia after every Lloyd iteration
  std::size_t iterations = 0;
};

namespace detail {

using Points = std::vector<std::vector<double>>;

inline std::vector<std::vector<double>> kmeanspp_seed(const Points& pts, std::size_t k,
                                                      Rng& rng) {
  const std::size_t n = pts.size();
  std::vector<std::vector<double>> centers;
  centers.push_back(pts[static_cast<std::size_t>(rng.below(n))]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(pts[i], centers[0]);
  while (centers.size() < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (target < acc) {
          pick = i;
          break;
        }
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      pick = static_cast<std::size_t>(rng.below(n));
    }
    centers.push_back(pts[pick]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(pts[i], centers.back()));
    }
  }
  return centers;
}

inline std::size_t nearest(const std::vector<double>& p,
                           const std::vector<std::vector<double>>& centers) {
  std::size_t best = 0;
  double best_d = squared_distance(p, centers[0]);
  for (std::size_t c = 1; c < centers.size(); ++c) {
    const double d = squared_distance(p, centers[c]);
    if (d < best_d) {  // strict: ties stay with the lower index
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline std::vector<std::vector<double>> cluster_means(const Points& pts,
                                                      const std::vector<std::size_t>& labels,
                                                      std::size_t k) {
  const std::size_t dim = pts.front().size();
  std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    auto& s = sums[labels[i]];
    for (std::size_t d = 0; d < dim; ++d) s[d] += pts[i][d];
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (double& v : sums[c]) v /= static_cast<double>(counts[c]);
  }
  return sums;
}

inline double inertia_of(const Points& pts, const std::vector<std::size_t>& labels,
                         const std::vector<std::vector<double>>& centers) {
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) total += squared_distance(pts[i], centers[labels[i]]);
  return total;
}

inline KMeansResult lloyd(const Points& pts, std::size_t k, Rng& rng, const KMeansOptions& opt) {
  const std::size_t n = pts.size();
  KMeansResult res;
  res.k = k;
  auto centers = kmeanspp_seed(pts, k, rng);
  std::vector<std::size_t> labels(n);
  for (std::size_t it = 0; it < std::max<std::size_t>(opt.max_iters, 1); ++it) {
    for (std::size_t i = 0; i < n; ++i) labels[i] = nearest(pts[i], centers);

    // Empty-cluster repair: hand the empty cluster the point farthest from
    // its current centroid (taken from a cluster that can spare one).
    for (;;) {
      std::vector<std::size_t> counts(k, 0);
      for (auto l : labels) ++counts[l];
      const auto empty = std::find(counts.begin(), counts.end(), 0u);
      if (empty == counts.end()) break;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[labels[i]] < 2) continue;
        const double d = squared_distance(pts[i], centers[labels[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      const auto target = static_cast<std::size_t>(empty - counts.begin());
      labels[far] = target;
      centers[target] = pts[far];
    }

    auto updated = cluster_means(pts, labels, k);
    double movement = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      movement = std::max(movement, std::sqrt(squared_distance(updated[c], centers[c])));
    }
    centers = std::move(updated);
    res.trace.push_back(inertia_of(pts, labels, centers));
    res.iterations = it + 1;
    if (movement < opt.tol) break;
  }
  res.labels = std::move(labels);
  res.centroids = std::move(centers);
  res.inertia = res.trace.back();
  return res;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. With restarts > 1 the run with
/// the lowest final inertia wins (earliest on ties).
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                           Rng& rng, const KMeansOptions& opt = {}) {
  if (k < 1) throw ParameterError("kmeans: k must be >= 1");
  if (points.size() < k) {
    throw InfeasibleError("kmeans: " + std::to_string(points.size()) +
                          " points cannot form " + std::to_string(k) + " clusters");
  }
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("kmeans: points have differing lengths");
  }
  KMeansResult best;
  for (std::size_t r = 0; r < std::max<std::size_t>(opt.restarts, 1); ++r) {
    auto res = detail::lloyd(points, k, rng, opt);
    if (r == 0 || res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Uploads, clustering, aggregation
// ---------------------------------------------------------------------------

struct UploadSet {
  std::size_t round = 0;
  std::vector<UploadEntry> entries;

  std::size_t vector_length() const {
    return entries.empty() ? 0 : entries.front().vector.size();
  }
};

inline void validate(const UploadSet& set) {
  std::set<Handle> handles;
  for (const auto& e : set.entries) {
    if (e.vector.size() != set.vector_length()) {
      throw ShapeError("upload set: vectors have differing lengths");
    }
    if (!handles.insert(e.handle).second) {
      throw ProtocolError("upload set: duplicate handle " + std::to_string(e.handle));
    }
  }
}

struct Clustering {
  std::size_t k = 0;
  std::map<Handle, std::size_t> assignment;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::vector<double> trace;
};

inline Clustering cluster_uploads(const UploadSet& set, std::size_t k, Rng& rng,
                                  const KMeansOptions& opt = {}) {
  validate(set);
  std::vector<std::vector<double>> points;
  points.reserve(set.entries.size());
  for (const auto& e : set.entries) points.push_back(e.vector);
  auto res = kmeans(points, k, rng, opt);
  Clustering out;
  out.k = k;
  for (std::size_t i = 0; i < set.entries.size(); ++i) {
    out.assignment.emplace(set.entries[i].handle, res.labels[i]);
  }
  out.centroids = std::move(res.centroids);
  out.inertia = res.inertia;
  out.trace = std::move(res.trace);
  return out;
}

struct Aggregation {
  std::map<std::size_t, Adapter> globals;         // cluster -> global adapter
  std::map<std::size_t, std::vector<double>> global_vectors;
  std::map<std::size_t, std::size_t> cluster_sizes;
  std::map<Handle, Adapter> writebacks;           // handle -> its cluster's global adapter
};

/// Per-cluster mean of member vectors (sum in upload order, then divide).
/// With `weighted`, members are weighted by their reported sample counts.
inline Aggregation aggregate(const UploadSet& set, const Clustering& clustering,
                             const AdapterShape& shape, bool weighted = false) {
  validate(set);
  const std::size_t len = set.vector_length();
  if (len != param_count(shape)) {
    throw ShapeError("aggregate: vectors of length " + std::to_string(len) +
                     " do not match adapter size " + std::to_string(param_count(shape)));
  }
  std::map<std::size_t, std::vector<double>> sums;
  std::map<std::size_t, double> mass;
  Aggregation out;
  for (const auto& e : set.entries) {
    const auto it = clustering.assignment.find(e.handle);
    if (it == clustering.assignment.end()) {
      throw ProtocolError("aggregate: handle " + std::to_string(e.handle) + " not clustered");
    }
    auto& sum = sums.try_emplace(it->second, len, 0.0).first->second;
    const double w = weighted ? static_cast<double>(e.sample_count) : 1.0;
    if (weighted) {
      for (std::size_t i = 0; i < len; ++i) sum[i] += w * e.vector[i];
    } else {
      for (std::size_t i = 0; i < len; ++i) sum[i] += e.vector[i];
    }
    mass[it->second] += w;
    ++out.cluster_sizes[it->second];
  }
  for (auto& [cluster, sum] : sums) {
    const double denom = mass[cluster];
    for (double& v : sum) v /= denom;
    out.globals.emplace(cluster, unflatten(shape, sum));
    out.global_vectors.emplace(cluster, std::move(sum));
  }
  for (const auto& [handle, cluster] : clustering.assignment) {
    out.writebacks.emplace(handle, out.globals.at(cluster));
  }
  return out;
}

struct ServerOptions {
  std::size_t clusters = 1;  // N
  KMeansOptions kmeans;
  bool weighted_aggregation = false;
};

struct ServerRoundResult {
  Clustering clustering;
  Aggregation aggregation;
};

/// Holds the global task-specific adapters across rounds.
class Server {
 public:
  Server(ServerOptions options, AdapterShape shape)
      : options_(std::move(options)), shape_(std::move(shape)) {
    if (options_.clusters < 1) throw ConfigError("server: cluster count must be >= 1");
  }

  /// Clusters one round's uploads into N groups and averages each group.
  /// When fewer vectors than N arrive, the cluster count drops to the number
  /// of vectors.
  ServerRoundResult process(const UploadSet& uploads, Rng& rng) {
    validate(uploads);
    if (uploads.entries.empty()) throw ProtocolError("server: no uploads this round");
    const std::size_t k = std::min(options_.clusters, uploads.entries.size());
    ServerRoundResult res;
    res.clustering = cluster_uploads(uploads, k, rng, options_.kmeans);
    res.aggregation = aggregate(uploads, res.clustering, shape_, options_.weighted_aggregation);
    globals_ = res.aggregation.globals;
    return res;
  }

  const std::map<std::size_t, Adapter>& globals() const { return globals_; }
  const ServerOptions& options() const { return options_; }
  const AdapterShape& adapter_shape() const { return shape_; }

 private:
  ServerOptions options_;
  AdapterShape shape_;
  std::map<std::size_t, Adapter> globals_;
};

}  // namespace fltac
