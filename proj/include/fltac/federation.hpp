#pragma once

// Round orchestration: select -> local fine-tuning -> upload -> cluster and
// aggregate -> write back -> record metrics.
//
// The orchestrator is the only component that holds the true task labels
// (the evaluation ledger). The server receives an UploadSet and nothing
// else.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <thread>
#include <vector>

#include "fltac/client.hpp"
#include "fltac/data.hpp"
#include "fltac/metrics.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"
#include "fltac/server.hpp"

namespace fltac {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Every index is
/// processed exactly once; the first exception is rethrown after joining.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct FederationOptions {
  std::uint64_t seed = 0;
  double participation = 1.0;
  LocalTrainOptions train;
  std::size_t bytes_per_param = 8;
  std::size_t threads = 1;
  /// Every client trains one adapter on all of its data and the server
  /// averages everything into one global adapter (plain FedAvg baseline).
  bool shared_adapter = false;
};

struct RoundOutput {
  RoundRecord record;
  std::vector<int> selected;
  UploadSet uploads;
  std::vector<TruthEntry> truth;
  Clustering clustering;
  Aggregation aggregation;
  std::map<std::size_t, int> cluster_to_task;
};

class Federation {
 public:
  /// `clients` must be ordered by client id. `heldout` maps every task id
  /// to its held-out evaluation set.
  Federation(BaseModel model, std::vector<ClientState> clients, Server server,
             std::map<int, Dataset> heldout, const Adapter& initial, FederationOptions options)
      : model_(std::move(model)),
        clients_(std::move(clients)),
        server_(std::move(server)),
        heldout_(std::move(heldout)),
        options_(std::move(options)) {
    for (const auto& [task, data] : heldout_) task_adapters_.emplace(task, initial);
    for (std::size_t i = 1; i < clients_.size(); ++i) {
      if (clients_[i - 1].client_id >= clients_[i].client_id) {
        throw ConfigError("federation: clients must have strictly increasing ids");
      }
    }
  }

  const BaseModel& model() const { return model_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const Server& server() const { return server_; }
  std::size_t rounds_completed() const { return round_; }
  std::uint64_t cumulative_bytes() const { return cumulative_bytes_; }

  /// Latest global adapter credited to each task (cluster matched to the
  /// task by the evaluation ledger; the shared adapter in baseline mode).
  const std::map<int, Adapter>& task_adapters() const { return task_adapters_; }

  /// One communication round. On any exception client states, server
  /// globals and counters are left as they were.
  RoundOutput run_round() {
    const std::size_t t = round_ + 1;
    RoundOutput out;

    std::vector<int> ids;
    for (const auto& c : clients_) ids.push_back(c.client_id);
    Rng select_rng(derive_seed(options_.seed, {0x5E1EC7ULL, t}));
    out.selected = select_clients(ids, options_.participation, select_rng);

    std::vector<std::size_t> slots;
    for (int id : out.selected) slots.push_back(slot_of(id));

    std::vector<ClientState> trained(slots.size());
    parallel_for(slots.size(), options_.threads, [&](std::size_t i) {
      trained[i] = local_finetune(clients_[slots[i]], model_, options_.train, options_.seed, t);
    });

    out.uploads.round = t;
    std::vector<std::size_t> adapters_per_client;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      Rng nonce_rng(derive_seed(options_.seed,
                                {0x40CEULL, t, static_cast<std::uint64_t>(trained[i].client_id)}));
      auto up = upload(trained[i], nonce_rng);
      adapters_per_client.push_back(up.uploads.size());
      trained[i] = std::move(up.state);
      for (auto& e : up.uploads) out.uploads.entries.push_back(std::move(e));
      for (auto& e : up.truth) out.truth.push_back(e);
    }

    Server server = server_;
    Rng kmeans_rng(kmeans_seed(options_.seed, t));
    auto processed = server.process(out.uploads, kmeans_rng);
    out.clustering = std::move(processed.clustering);
    out.aggregation = std::move(processed.aggregation);

    for (auto& state : trained) state = receive(state, out.aggregation.writebacks);

    // Evaluation (simulator side only).
    std::map<Handle, int> truth;
    for (const auto& e : out.truth) truth.emplace(e.handle, e.task_id);
    const std::size_t n_clusters = server.options().clusters;
    auto task_adapters = task_adapters_;
    if (options_.shared_adapter) {
      for (auto& [task, adapter] : task_adapters) adapter = out.aggregation.globals.begin()->second;
      out.record.cluster_accuracy = 1.0;
      out.record.purity = 1.0;
    } else {
      const auto table = contingency(out.clustering.assignment, truth, n_clusters);
      out.cluster_to_task = best_cluster_to_task(table);
      for (const auto& [cluster, task] : out.cluster_to_task) {
        const auto g = out.aggregation.globals.find(cluster);
        if (g != out.aggregation.globals.end() && task_adapters.contains(task)) {
          task_adapters[task] = g->second;
        }
      }
      out.record.cluster_accuracy = cluster_accuracy(out.clustering.assignment, truth, n_clusters);
      out.record.purity = purity(out.clustering.assignment, truth);
    }
    for (const auto& [task, data] : heldout_) {
      out.record.per_task_eval_loss[task] =
          eval_task_loss(model_, task_adapters.at(task), data, options_.train.loss);
    }

    const std::size_t params = param_count(server.adapter_shape());
    out.record.round = t;
    out.record.inertia = out.clustering.inertia;
    out.record.bytes_up = comm_bytes(adapters_per_client, params, options_.bytes_per_param);
    out.record.bytes_down = comm_bytes(adapters_per_client, params, options_.bytes_per_param);
    out.record.cumulative_bytes =
        cumulative_bytes_ + out.record.bytes_up + out.record.bytes_down;

    // Commit.
    for (std::size_t i = 0; i < slots.size(); ++i) clients_[slots[i]] = std::move(trained[i]);
    server_ = std::move(server);
    task_adapters_ = std::move(task_adapters);
    cumulative_bytes_ = out.record.cumulative_bytes;
    round_ = t;
    return out;
  }

  static std::uint64_t kmeans_seed(std::uint64_t seed, std::size_t round) {
    return derive_seed(seed, {0x4B3EA25ULL, round});
  }

 private:
  std::size_t slot_of(int client_id) const {
    const auto it = std::lower_bound(
        clients_.begin(), clients_.end(), client_id,
        [](const ClientState& c, int id) { return c.client_id < id; });
    return static_cast<std::size_t>(it - clients_.begin());
  }

  BaseModel model_;
  std::vector<ClientState> clients_;
  Server server_;
  std::map<int, Dataset> heldout_;
  FederationOptions options_;
  std::map<int, Adapter> task_adapters_;
  std::size_t round_ = 0;
  std::uint64_t cumulative_bytes_ = 0;
};

}  // namespace fltac
