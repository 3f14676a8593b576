#pragma once

// Experiment configuration (JSON), construction of a federation from it, and
// the run / cluster-eval / toy-sweep drivers with their on-disk outputs.
//
// Output directory of a run:
//   config.json              resolved configuration
//   rounds.jsonl             one RoundRecord per line
//   server_ledger.jsonl      what the server saw and did each round
//   vectors/round_NNNN.csv   uploaded vectors (handle, client_id, samples, v...)
//   eval_ledger.csv          the only file with true task ids, plus PCA coords
//   global_adapter_<c>.bin   final cluster aggregates
//   task_adapter_<t>.bin     final adapter credited to each task
//   summary.json

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fltac/client.hpp"
#include "fltac/data.hpp"
#include "fltac/federation.hpp"
#include "fltac/metrics.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"
#include "fltac/server.hpp"
#include "fltac/toy_sim.hpp"

namespace fltac {

using Json = nlohmann::ordered_json;

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<TaskSpec> tasks;  // N = tasks.size()
  std::size_t clients = 10;     // m
  double alpha = 0.5;
  double threshold = 0.01;
  double participation = 1.0;
  std::size_t rounds = 20;  // T
  std::size_t tau = 5;
  double eta = 0.05;
  std::size_t batch_size = 32;  // 0: full batch
  std::size_t rank = 2;
  std::vector<std::size_t> hidden{32};
  Activation activation = Activation::kTanh;
  double adapter_init_std = 0.02;
  std::size_t heldout_samples = 512;
  bool weighted_aggregation = false;
  bool shared_adapter = false;
  std::size_t kmeans_restarts = 1;
  std::size_t kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;
  std::size_t bytes_per_param = 8;
  std::string output_dir = "runs";

  std::size_t task_count() const { return tasks.size(); }
  LossKind loss() const {
    return tasks.empty() || tasks.front().kind == TaskKind::kSinusoidRegression
               ? LossKind::kMse
               : LossKind::kSoftmaxCe;
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// ---------------------------------------------------------------------------
// JSON <-> config

namespace detail {

/// Typed access to one JSON object; unknown keys are rejected on finish().
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    const std::string name = where_.empty() ? key : where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected true/false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(name + ": expected a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string");
      out = v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(name + ": expected an array of non-negative integers");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) {
          throw ConfigError(name + ": expected an array of non-negative integers");
        }
        out.push_back(e.get<typename T::value_type>());
      }
    }
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) {
        throw ConfigError((where_.empty() ? "" : where_ + ": ") + "unknown field '" + key + "'");
      }
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename F>
auto reword(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ParameterError& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

}  // namespace detail

inline Json task_to_json(const TaskSpec& t) {
  Json j;
  j["task_id"] = t.task_id;
  j["kind"] = std::string(to_string(t.kind));
  j["input_dim"] = t.input_dim;
  j["output_dim"] = t.output_dim;
  j["sample_count"] = t.sample_count;
  if (t.kind == TaskKind::kSinusoidRegression) {
    j["sinusoid"] = {{"phase", t.sinusoid.phase},
                     {"noise_std", t.sinusoid.noise_std},
                     {"amplitude", t.sinusoid.amplitude}};
  } else {
    j["blobs"] = {{"classes", t.blobs.classes},
                  {"separation", t.blobs.separation},
                  {"noise_std", t.blobs.noise_std}};
  }
  return j;
}

inline TaskSpec task_from_json(const Json& j, const std::string& where) {
  detail::Fields f(j, where);
  TaskSpec t;
  f.get("task_id", t.task_id);
  std::string kind(to_string(t.kind));
  f.get("kind", kind);
  t.kind = detail::reword(where + ".kind", [&] { return task_kind_from_string(kind); });
  f.get("input_dim", t.input_dim);
  f.get("output_dim", t.output_dim);
  f.get("sample_count", t.sample_count);
  if (f.has("sinusoid")) {
    detail::Fields s(f.raw("sinusoid"), where + ".sinusoid");
    s.get("phase", t.sinusoid.phase);
    s.get("noise_std", t.sinusoid.noise_std);
    s.get("amplitude", t.sinusoid.amplitude);
    s.finish();
  }
  if (f.has("blobs")) {
    detail::Fields b(f.raw("blobs"), where + ".blobs");
    b.get("classes", t.blobs.classes);
    b.get("separation", t.blobs.separation);
    b.get("noise_std", t.blobs.noise_std);
    b.finish();
  }
  f.finish();
  return t;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["clients"] = c.clients;
  j["alpha"] = c.alpha;
  j["threshold"] = c.threshold;
  j["participation"] = c.participation;
  j["rounds"] = c.rounds;
  j["tau"] = c.tau;
  j["eta"] = c.eta;
  j["batch_size"] = c.batch_size;
  j["rank"] = c.rank;
  j["adapter_init_std"] = c.adapter_init_std;
  j["model"] = {{"hidden", c.hidden}, {"activation", std::string(to_string(c.activation))}};
  j["heldout_samples"] = c.heldout_samples;
  j["aggregation"] = {{"weighted", c.weighted_aggregation}, {"shared_adapter", c.shared_adapter}};
  j["kmeans"] = {{"restarts", c.kmeans_restarts},
                 {"max_iters", c.kmeans_max_iters},
                 {"tol", c.kmeans_tol}};
  j["bytes_per_param"] = c.bytes_per_param;
  j["output_dir"] = c.output_dir;
  Json tasks = Json::array();
  for (const auto& t : c.tasks) tasks.push_back(task_to_json(t));
  j["tasks"] = std::move(tasks);
  return j;
}

inline void validate(const ExperimentConfig& c) {
  if (c.tasks.empty()) throw ConfigError("tasks: at least one task is required");
  if (c.clients < 1) throw ConfigError("clients: must be >= 1");
  if (!(c.alpha > 0.0)) throw ConfigError("alpha: must be > 0");
  if (!(c.threshold >= 0.0 && c.threshold < 1.0)) throw ConfigError("threshold: must be in [0, 1)");
  if (!(c.participation > 0.0 && c.participation <= 1.0)) {
    throw ConfigError("participation: must be in (0, 1]");
  }
  if (c.rounds < 1) throw ConfigError("rounds: must be >= 1");
  if (c.tau < 1) throw ConfigError("tau: must be >= 1");
  if (!(c.eta > 0.0) || !std::isfinite(c.eta)) throw ConfigError("eta: must be > 0");
  if (c.rank < 1) throw ConfigError("rank: must be >= 1");
  if (!(c.adapter_init_std >= 0.0)) throw ConfigError("adapter_init_std: must be >= 0");
  for (auto h : c.hidden) {
    if (h < 1) throw ConfigError("model.hidden: layer widths must be >= 1");
  }
  if (c.heldout_samples < 1) throw ConfigError("heldout_samples: must be >= 1");
  if (c.kmeans_restarts < 1) throw ConfigError("kmeans.restarts: must be >= 1");
  if (c.kmeans_max_iters < 1) throw ConfigError("kmeans.max_iters: must be >= 1");
  if (!(c.kmeans_tol >= 0.0)) throw ConfigError("kmeans.tol: must be >= 0");
  if (c.bytes_per_param != 4 && c.bytes_per_param != 8) {
    throw ConfigError("bytes_per_param: must be 4 or 8");
  }
  std::set<int> ids;
  for (const auto& t : c.tasks) {
    validate(t);
    if (!ids.insert(t.task_id).second) {
      throw ConfigError("tasks: duplicate task_id " + std::to_string(t.task_id));
    }
    const auto& first = c.tasks.front();
    if (t.kind != first.kind) throw ConfigError("tasks: all tasks must have the same kind");
    if (t.input_dim != first.input_dim || t.output_dim != first.output_dim) {
      throw ConfigError("tasks: all tasks must share input_dim and output_dim");
    }
  }
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  detail::Fields f(j, "");
  ExperimentConfig c;
  f.get("seed", c.seed);
  f.get("clients", c.clients);
  f.get("alpha", c.alpha);
  f.get("threshold", c.threshold);
  f.get("participation", c.participation);
  f.get("rounds", c.rounds);
  f.get("tau", c.tau);
  f.get("eta", c.eta);
  f.get("batch_size", c.batch_size);
  f.get("rank", c.rank);
  f.get("adapter_init_std", c.adapter_init_std);
  if (f.has("model")) {
    detail::Fields m(f.raw("model"), "model");
    m.get("hidden", c.hidden);
    std::string act(to_string(c.activation));
    m.get("activation", act);
    c.activation = detail::reword("model.activation", [&] { return activation_from_string(act); });
    m.finish();
  }
  f.get("heldout_samples", c.heldout_samples);
  if (f.has("aggregation")) {
    detail::Fields a(f.raw("aggregation"), "aggregation");
    a.get("weighted", c.weighted_aggregation);
    a.get("shared_adapter", c.shared_adapter);
    a.finish();
  }
  if (f.has("kmeans")) {
    detail::Fields k(f.raw("kmeans"), "kmeans");
    k.get("restarts", c.kmeans_restarts);
    k.get("max_iters", c.kmeans_max_iters);
    k.get("tol", c.kmeans_tol);
    k.finish();
  }
  f.get("bytes_per_param", c.bytes_per_param);
  f.get("output_dir", c.output_dir);
  if (f.has("tasks")) {
    const Json& tasks = f.raw("tasks");
    if (!tasks.is_array()) throw ConfigError("tasks: expected an array");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      c.tasks.push_back(task_from_json(tasks[i], "tasks[" + std::to_string(i) + "]"));
    }
  }
  f.finish();
  validate(c);
  return c;
}

inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_from_json(parse_json_text(read_text_file(path), path));
}

// ---------------------------------------------------------------------------
// Construction

/// Everything derived deterministically from a config and its seed.
struct ExperimentSetup {
  BaseModel model;
  std::vector<Shard> shards;  // output of the Dirichlet split, by (client, task)
  std::vector<ClientState> clients;
  std::map<int, Dataset> heldout;
  Adapter initial;
  AdapterShape shape;
};

inline std::vector<std::size_t> layer_dims(const ExperimentConfig& c) {
  std::vector<std::size_t> dims{c.tasks.front().input_dim};
  dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
  dims.push_back(c.tasks.front().output_dim);
  return dims;
}

inline ExperimentSetup build_setup(const ExperimentConfig& c) {
  validate(c);
  Rng model_rng(derive_seed(c.seed, {0xBA5EULL}));
  BaseModel model = BaseModel::random(layer_dims(c), c.activation, model_rng);

  std::vector<TaskPool> pools;
  std::map<int, Dataset> heldout;
  for (const auto& t : c.tasks) {
    const auto id = static_cast<std::uint64_t>(t.task_id);
    Rng train_rng(derive_seed(c.seed, {0xDA7AULL, id}));
    pools.push_back({t.task_id, generate_task(t, train_rng)});
    TaskSpec h = t;
    h.sample_count = c.heldout_samples;
    Rng test_rng(derive_seed(c.seed, {0x7E57ULL, id}));
    heldout.emplace(t.task_id, generate_task(h, test_rng));
  }

  PartitionOptions popt;
  popt.clients = c.clients;
  popt.alpha = c.alpha;
  popt.threshold = c.threshold;
  Rng part_rng(derive_seed(c.seed, {0x9A27ULL}));
  std::vector<Shard> shards = dirichlet_partition(pools, popt, part_rng);

  const auto ranks = clamped_ranks(model, c.rank);
  Rng init_rng(derive_seed(c.seed, {0xADAULL}));
  Adapter initial = init_adapter(model, ranks, init_rng, c.adapter_init_std);
  AdapterShape shape = initial.shape();

  // Clients the split left without data cannot train and are not created.
  std::map<int, std::map<int, Shard>> by_client;
  for (const auto& s : shards) by_client[s.client_id].emplace(s.task_id, s);
  std::vector<ClientState> clients;
  for (auto& [id, local] : by_client) {
    if (c.shared_adapter) {
      std::vector<Shard> parts;
      for (auto& [task, s] : local) parts.push_back(s);
      std::map<int, Shard> merged;
      merged.emplace(0, merge_shards(parts, 0));
      clients.push_back(init_client(id, std::move(merged), initial));
    } else {
      clients.push_back(init_client(id, std::move(local), initial));
    }
  }
  return {std::move(model), std::move(shards), std::move(clients), std::move(heldout),
          std::move(initial), std::move(shape)};
}

inline FederationOptions federation_options(const ExperimentConfig& c, std::size_t threads) {
  FederationOptions o;
  o.seed = c.seed;
  o.participation = c.participation;
  o.train.tau = c.tau;
  o.train.eta = c.eta;
  o.train.batch_size = c.batch_size;
  o.train.loss = c.loss();
  o.bytes_per_param = c.bytes_per_param;
  o.threads = threads;
  o.shared_adapter = c.shared_adapter;
  return o;
}

inline ServerOptions server_options(const ExperimentConfig& c) {
  ServerOptions s;
  s.clusters = c.shared_adapter ? 1 : c.task_count();
  s.kmeans.restarts = c.kmeans_restarts;
  s.kmeans.max_iters = c.kmeans_max_iters;
  s.kmeans.tol = c.kmeans_tol;
  s.weighted_aggregation = c.weighted_aggregation;
  return s;
}

inline Federation make_federation(const ExperimentConfig& c, std::size_t threads = 1) {
  ExperimentSetup s = build_setup(c);
  Server server(server_options(c), s.shape);
  return Federation(std::move(s.model), std::move(s.clients), std::move(server),
                    std::move(s.heldout), s.initial, federation_options(c, threads));
}

// ---------------------------------------------------------------------------
// Output helpers

/// Text that reads back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline Json to_json(const RoundRecord& r) {
  Json losses = Json::object();
  for (const auto& [task, loss] : r.per_task_eval_loss) losses[std::to_string(task)] = loss;
  return {{"round", r.round},
          {"per_task_eval_loss", std::move(losses)},
          {"cluster_accuracy", r.cluster_accuracy},
          {"purity", r.purity},
          {"inertia", r.inertia},
          {"bytes_up", r.bytes_up},
          {"bytes_down", r.bytes_down},
          {"cumulative_bytes", r.cumulative_bytes}};
}

inline std::string round_file_name(std::size_t round) {
  std::ostringstream ss;
  ss << "round_" << std::setw(4) << std::setfill('0') << round << ".csv";
  return ss.str();
}

inline void write_vectors_csv(std::ostream& os, const UploadSet& set) {
  os << "handle,client_id,sample_count";
  const std::size_t len = set.entries.empty() ? 0 : set.entries.front().vector.size();
  for (std::size_t i = 0; i < len; ++i) os << ",v" << i;
  os << '\n';
  for (const auto& e : set.entries) {
    os << e.handle << ',' << e.client_id << ',' << e.sample_count;
    for (double v : e.vector) os << ',' << fmt_double(v);
    os << '\n';
  }
}

inline UploadSet read_vectors_csv(std::istream& is, std::size_t round, const std::string& origin) {
  UploadSet set;
  set.round = round;
  std::string line;
  if (!std::getline(is, line)) throw InputError(origin + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "handle" || header[1] != "client_id" ||
      header[2] != "sample_count") {
    throw InputError(origin + ": unexpected header");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw InputError(origin + ": ragged row");
    try {
      UploadEntry e;
      e.handle = std::stoull(cells[0]);
      e.client_id = std::stoi(cells[1]);
      e.sample_count = std::stoull(cells[2]);
      for (std::size_t i = 3; i < cells.size(); ++i) e.vector.push_back(std::stod(cells[i]));
      set.entries.push_back(std::move(e));
    } catch (const std::logic_error&) {
      throw InputError(origin + ": malformed number");
    }
  }
  return set;
}

/// Writes a file in one go: to a temporary name first, then renamed.
inline void write_file(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write " + tmp);
    os << content;
    if (!os) throw InputError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Fresh "<prefix>-YYYYmmdd-HHMMSS[-n]" directory under `root`.
inline std::filesystem::path timestamped_dir(const std::filesystem::path& root,
                                             const std::string& prefix) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  std::filesystem::path dir = root / (prefix + "-" + stamp);
  for (int n = 1; std::filesystem::exists(dir); ++n) {
    dir = root / (prefix + "-" + stamp + "-" + std::to_string(n));
  }
  return dir;
}

// ---------------------------------------------------------------------------
// cmd_run

struct RunSummary {
  std::vector<RoundRecord> records;
  std::map<int, double> final_task_loss;
  double final_cluster_accuracy = 0.0;
  double final_purity = 0.0;
  std::uint64_t cumulative_bytes = 0;

  double mean_final_loss() const {
    double s = 0.0;
    for (const auto& [t, l] : final_task_loss) s += l;
    return final_task_loss.empty() ? 0.0 : s / static_cast<double>(final_task_loss.size());
  }
};

struct RunOptions {
  std::size_t threads = 1;
  std::ostream* log = nullptr;  // one progress line per round when set
};

namespace detail {

inline Json server_ledger_line(const RoundOutput& out) {
  Json sizes = Json::object();
  Json norms = Json::object();
  for (const auto& [c, n] : out.aggregation.cluster_sizes) sizes[std::to_string(c)] = n;
  for (const auto& [c, v] : out.aggregation.global_vectors) {
    double s = 0.0;
    for (double x : v) s += x * x;
    norms[std::to_string(c)] = std::sqrt(s);
  }
  return {{"round", out.record.round},
          {"selected", out.selected},
          {"uploads", out.uploads.entries.size()},
          {"k", out.clustering.k},
          {"cluster_sizes", std::move(sizes)},
          {"inertia", out.clustering.inertia},
          {"inertia_trace", out.clustering.trace},
          {"aggregate_norms", std::move(norms)},
          {"bytes_up", out.record.bytes_up},
          {"bytes_down", out.record.bytes_down}};
}

inline void append_eval_ledger(std::ostream& os, const RoundOutput& out) {
  std::map<Handle, int> truth;
  for (const auto& t : out.truth) truth.emplace(t.handle, t.task_id);
  std::vector<std::vector<double>> vectors;
  for (const auto& e : out.uploads.entries) vectors.push_back(e.vector);
  std::vector<Point2> proj(vectors.size());
  if (vectors.size() >= 2) proj = project_2d(vectors);
  for (std::size_t i = 0; i < out.uploads.entries.size(); ++i) {
    const auto& e = out.uploads.entries[i];
    os << out.record.round << ',' << e.client_id << ',' << e.handle << ',' << truth.at(e.handle)
       << ',' << out.clustering.assignment.at(e.handle) << ',' << fmt_double(proj[i].x) << ','
       << fmt_double(proj[i].y) << '\n';
  }
}

}  // namespace detail

/// Runs every round and writes the output directory. Records already
/// produced are flushed before an error propagates.
inline RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& dir,
                                 const RunOptions& opt = {}) {
  validate(config);
  namespace fs = std::filesystem;
  fs::create_directories(dir / "vectors");
  write_file(dir / "config.json", to_json(config).dump(2) + "\n");

  Federation fed = make_federation(config, opt.threads);
  std::ofstream rounds(dir / "rounds.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream ledger(dir / "server_ledger.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream eval(dir / "eval_ledger.csv", std::ios::binary | std::ios::trunc);
  if (!rounds || !ledger || !eval) throw InputError("cannot write into " + dir.string());
  eval << "round,client_id,handle,true_task_id,cluster_id,x,y\n";

  RunSummary summary;
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    RoundOutput out = fed.run_round();
    rounds << to_json(out.record).dump() << '\n' << std::flush;
    ledger << detail::server_ledger_line(out).dump() << '\n' << std::flush;
    detail::append_eval_ledger(eval, out);
    eval.flush();
    std::ostringstream vec;
    write_vectors_csv(vec, out.uploads);
    write_file(dir / "vectors" / round_file_name(t), vec.str());
    summary.records.push_back(out.record);
    if (opt.log) {
      *opt.log << "round " << t << "/" << config.rounds << "  acc "
               << fmt_double(out.record.cluster_accuracy) << "  mean_loss ";
      double s = 0.0;
      for (const auto& [task, l] : out.record.per_task_eval_loss) s += l;
      *opt.log << s / static_cast<double>(out.record.per_task_eval_loss.size()) << '\n';
    }
  }

  for (const auto& [cluster, adapter] : fed.server().globals()) {
    std::ostringstream os;
    write_adapter(os, adapter);
    write_file(dir / ("global_adapter_" + std::to_string(cluster) + ".bin"), os.str());
  }
  for (const auto& [task, adapter] : fed.task_adapters()) {
    std::ostringstream os;
    write_adapter(os, adapter);
    write_file(dir / ("task_adapter_" + std::to_string(task) + ".bin"), os.str());
  }

  const RoundRecord& last = summary.records.back();
  summary.final_task_loss = last.per_task_eval_loss;
  summary.final_cluster_accuracy = last.cluster_accuracy;
  summary.final_purity = last.purity;
  summary.cumulative_bytes = last.cumulative_bytes;
  Json losses = Json::object();
  for (const auto& [task, l] : summary.final_task_loss) losses[std::to_string(task)] = l;
  Json s = {{"rounds", config.rounds},
            {"clients_with_data", fed.clients().size()},
            {"adapter_param_count", param_count(fed.server().adapter_shape())},
            {"final_per_task_eval_loss", std::move(losses)},
            {"final_mean_eval_loss", summary.mean_final_loss()},
            {"final_cluster_accuracy", summary.final_cluster_accuracy},
            {"final_purity", summary.final_purity},
            {"cumulative_bytes", summary.cumulative_bytes}};
  write_file(dir / "summary.json", s.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// cmd_cluster_eval

struct ClusterEvalRow {
  std::size_t round = 0;
  std::size_t k = 0;
  std::size_t uploads = 0;
  double inertia = 0.0;
  double cluster_accuracy = 0.0;
  double purity = 0.0;
};

struct ClusterEvalOptions {
  std::uint64_t seed = 0;
  std::size_t clusters = 0;  // 0: number of distinct true tasks in the ledger
  KMeansOptions kmeans;
};

/// truth ledger rows: round, client_id, handle, true_task_id, ...
inline std::map<std::size_t, std::map<Handle, int>> read_truth_ledger(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open truth ledger " + path);
  std::string line;
  if (!std::getline(is, line)) throw InputError(path + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "round" || header[2] != "handle" ||
      header[3] != "true_task_id") {
    throw InputError(path + ": unexpected header");
  }
  std::map<std::size_t, std::map<Handle, int>> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 4) throw InputError(path + ": short row");
    try {
      out[std::stoull(cells[0])][std::stoull(cells[2])] = std::stoi(cells[3]);
    } catch (const std::logic_error&) {
      throw InputError(path + ": malformed number");
    }
  }
  return out;
}

/// Re-clusters saved upload vectors round by round with the same k-means
/// stream the online run used and scores them against the truth ledger.
inline std::vector<ClusterEvalRow> cluster_eval(const std::filesystem::path& vectors_dir,
                                                const std::string& truth_path,
                                                const ClusterEvalOptions& opt) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(vectors_dir)) {
    throw InputError("not a directory: " + vectors_dir.string());
  }
  std::map<std::size_t, fs::path> files;
  for (const auto& entry : fs::directory_iterator(vectors_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() == 14 && name.starts_with("round_") && name.ends_with(".csv")) {
      try {
        files.emplace(std::stoull(name.substr(6, 4)), entry.path());
      } catch (const std::logic_error&) {
      }
    }
  }
  if (files.empty()) throw InputError("no round_NNNN.csv files in " + vectors_dir.string());
  const auto truth = read_truth_ledger(truth_path);

  std::size_t clusters = opt.clusters;
  if (clusters == 0) {
    std::set<int> tasks;
    for (const auto& [round, m] : truth) {
      for (const auto& [h, task] : m) tasks.insert(task);
    }
    clusters = std::max<std::size_t>(tasks.size(), 1);
  }

  std::vector<ClusterEvalRow> rows;
  for (const auto& [round, path] : files) {
    std::ifstream is(path);
    const UploadSet set = read_vectors_csv(is, round, path.string());
    if (set.entries.empty()) throw InputError(path.string() + ": no uploads");
    const auto it = truth.find(round);
    if (it == truth.end()) {
      throw InputError("truth ledger has no rows for round " + std::to_string(round));
    }
    const std::size_t k = std::min(clusters, set.entries.size());
    Rng rng(Federation::kmeans_seed(opt.seed, round));
    const Clustering c = cluster_uploads(set, k, rng, opt.kmeans);
    ClusterEvalRow row;
    row.round = round;
    row.k = k;
    row.uploads = set.entries.size();
    row.inertia = c.inertia;
    row.cluster_accuracy = cluster_accuracy(c.assignment, it->second, clusters);
    row.purity = purity(c.assignment, it->second);
    rows.push_back(row);
  }
  return rows;
}

inline void write_cluster_eval_csv(std::ostream& os, const std::vector<ClusterEvalRow>& rows) {
  os << "round,k,uploads,inertia,cluster_accuracy,purity\n";
  for (const auto& r : rows) {
    os << r.round << ',' << r.k << ',' << r.uploads << ',' << fmt_double(r.inertia) << ','
       << fmt_double(r.cluster_accuracy) << ',' << fmt_double(r.purity) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Toy sweep config and CSV

inline Json to_json(const SweepConfig& c) {
  return {{"seed", c.seed},
          {"ranks", c.ranks},
          {"epochs", c.epochs},
          {"repetitions", c.repetitions},
          {"eta", c.eta},
          {"adapter_init_std", c.adapter_init_std},
          {"batch_size", c.batch_size},
          {"heldout_samples", c.heldout_samples},
          {"model", {{"hidden", c.hidden}, {"activation", std::string(to_string(c.activation))}}},
          {"task_a", task_to_json(c.task_a)},
          {"task_b", task_to_json(c.task_b)}};
}

inline SweepConfig sweep_from_json(const Json& j) {
  detail::Fields f(j, "");
  SweepConfig c;
  f.get("seed", c.seed);
  f.get("ranks", c.ranks);
  f.get("epochs", c.epochs);
  f.get("repetitions", c.repetitions);
  f.get("eta", c.eta);
  f.get("adapter_init_std", c.adapter_init_std);
  f.get("batch_size", c.batch_size);
  f.get("heldout_samples", c.heldout_samples);
  if (f.has("model")) {
    detail::Fields m(f.raw("model"), "model");
    m.get("hidden", c.hidden);
    std::string act(to_string(c.activation));
    m.get("activation", act);
    c.activation = detail::reword("model.activation", [&] { return activation_from_string(act); });
    m.finish();
  }
  if (f.has("task_a")) c.task_a = task_from_json(f.raw("task_a"), "task_a");
  if (f.has("task_b")) c.task_b = task_from_json(f.raw("task_b"), "task_b");
  f.finish();
  validate(c);
  return c;
}

inline SweepConfig load_sweep_config(const std::string& path) {
  return sweep_from_json(parse_json_text(read_text_file(path), path));
}

inline void write_sweep_points_csv(std::ostream& os, const SweepResult& r) {
  os << "rank,mode,seed,mse\n";
  for (const auto& p : r.points) {
    os << p.rank << ',' << to_string(p.mode) << ',' << p.seed << ',' << fmt_double(p.mse) << '\n';
  }
}

inline void write_sweep_summary_csv(std::ostream& os, const SweepResult& r) {
  os << "rank,mode,adapter_rank,rank_floored,mean_mse,std_mse\n";
  for (const auto& row : r.rows) {
    os << row.rank << ',' << to_string(row.mode) << ',' << row.adapter_rank << ','
       << (row.rank_floored ? 1 : 0) << ',' << fmt_double(row.mean_mse) << ','
       << fmt_double(row.std_mse) << '\n';
  }
}

}  // namespace fltac
