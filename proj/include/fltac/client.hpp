#pragma once

// Client side of a round: one adapter per local task, tau SGD steps per
// adapter on that task's shard only, upload under opaque handles.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fltac/data.hpp"
#include "fltac/model.hpp"
#include "fltac/numeric.hpp"

namespace fltac {

using Handle = std::uint64_t;

struct ClientState {
  int client_id = 0;
  std::map<int, Shard> shards;      // task_id -> local samples
  std::map<int, Adapter> adapters;  // task_id -> local adapter
  std::map<Handle, int> pending;    // handles of the last upload -> local task

  std::size_t task_count() const { return shards.size(); }

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& [task, shard] : shards) n += shard.size();
    return n;
  }

  friend bool operator==(const ClientState&, const ClientState&) = default;
};

inline ClientState init_client(int client_id, std::map<int, Shard> shards,
                               const Adapter& global_adapter) {
  if (shards.empty()) {
    throw ConfigError("client " + std::to_string(client_id) + " has no local tasks");
  }
  ClientState state;
  state.client_id = client_id;
  for (const auto& [task, shard] : shards) {
    if (shard.size() == 0) {
      throw ConfigError("client " + std::to_string(client_id) + ": empty shard for task " +
                        std::to_string(task));
    }
    state.adapters.emplace(task, global_adapter);
  }
  state.shards = std::move(shards);
  return state;
}

struct LocalTrainOptions {
  std::size_t tau = 1;
  double eta = 0.05;
  std::size_t batch_size = 32;  // 0 means full batch
  LossKind loss = LossKind::kMse;
};

/// RNG stream for one (round, client, task); independent of execution order.
inline std::uint64_t local_stream_seed(std::uint64_t seed, std::size_t round, int client_id,
                                       int task_id) {
  return derive_seed(seed, {0x10CA1ULL, round, static_cast<std::uint64_t>(client_id),
                            static_cast<std::uint64_t>(task_id)});
}

/// Runs tau SGD steps on each local adapter. Adapters never see another
/// task's data.
inline ClientState local_finetune(const ClientState& state, const BaseModel& model,
                                  const LocalTrainOptions& opt, std::uint64_t seed,
                                  std::size_t round) {
  if (opt.tau < 1) throw ParameterError("local_finetune: tau must be >= 1");
  if (!(opt.eta > 0.0)) throw ParameterError("local_finetune: eta must be > 0");
  ClientState out = state;
  for (auto& [task, adapter] : out.adapters) {
    const Shard& shard = state.shards.at(task);
    Rng rng(local_stream_seed(seed, round, state.client_id, task));
    const std::size_t batch = opt.batch_size == 0 ? shard.size() : opt.batch_size;
    for (std::size_t k = 0; k < opt.tau; ++k) {
      const Dataset mb = minibatch(shard, batch, rng);
      const GradPair g = loss_and_grad(model, adapter, mb.x, mb.y, opt.loss);
      adapter = sgd_step(adapter, g, opt.eta);
    }
  }
  return out;
}

/// What the server sees of one adapter: no task label.
struct UploadEntry {
  int client_id = 0;
  Handle handle = 0;
  std::size_t sample_count = 0;
  std::vector<double> vector;
};

/// Simulator-side record linking a handle to its true task. Never handed to
/// server code.
struct TruthEntry {
  int client_id = 0;
  Handle handle = 0;
  int task_id = 0;
};

struct UploadResult {
  ClientState state;  // with `pending` set to this upload's handles
  std::vector<UploadEntry> uploads;
  std::vector<TruthEntry> truth;
};

/// Flattens every local adapter under a fresh random nonce.
inline UploadResult upload(const ClientState& state, Rng& nonce_rng) {
  UploadResult out{state, {}, {}};
  out.state.pending.clear();
  for (const auto& [task, adapter] : state.adapters) {
    Handle h = nonce_rng.next_u64();
    while (out.state.pending.contains(h)) h = nonce_rng.next_u64();
    out.state.pending.emplace(h, task);
    out.uploads.push_back(
        {state.client_id, h, state.shards.at(task).size(), flatten(adapter)});
    out.truth.push_back({state.client_id, h, task});
  }
  return out;
}

/// Replaces each uploaded adapter with the aggregate the server assigned.
inline ClientState receive(const ClientState& state,
                           const std::map<Handle, Adapter>& assignments) {
  ClientState out = state;
  for (const auto& [handle, task] : state.pending) {
    const auto it = assignments.find(handle);
    if (it == assignments.end()) {
      throw ProtocolError("client " + std::to_string(state.client_id) +
                          ": no write-back for uploaded handle " + std::to_string(handle));
    }
    if (!(it->second.shape() == out.adapters.at(task).shape())) {
      throw ProtocolError("client " + std::to_string(state.client_id) +
                          ": write-back shape differs from local adapter");
    }
    out.adapters[task] = it->second;
  }
  out.pending.clear();
  return out;
}

}  // namespace fltac
