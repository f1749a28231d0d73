// Copyright 2026 The fp8fed Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "fp8fed/data_partition.hpp"
#include "fp8fed/fp8_codec.hpp"
#include "fp8fed/metrics_ledger.hpp"
#include "fp8fed/qat_engine.hpp"
#include "fp8fed/random.hpp"
#include "fp8fed/server_optimizer.hpp"
#include "fp8fed/wire.hpp"

namespace fp8fed {

/// uq averages uploads, uq+ runs the server optimizer, fp32-baseline is plain
/// FedAvg without quantization anywhere.
enum class Aggregation { kUq, kUqPlus, kFp32Baseline };

/// How weights travel on both links.
enum class CommMode { kQuantizedRand, kQuantizedDet, kNone };

struct FedConfig {
  double participation = 0.1;  // C
  int rounds = 300;            // T
  LocalUpdateConfig local;
  Aggregation aggregation = Aggregation::kUq;
  CommMode comm = CommMode::kQuantizedRand;
  ServerOptConfig server;
  std::uint64_t seed = 0;
  int threads = 1;
  int calibration_batch = 50;
  bool record_wall_time = false;

  bool link_quantized() const { return comm != CommMode::kNone; }

  void validate(const ModelSpec& spec, std::size_t clients) const {
    local.validate();
    server.validate();
    if (clients < 1) throw Error("need at least one client");
    if (!(participation > 0.0) || participation > 1.0) throw Error("participation must be in (0, 1]");
    if (std::lround(participation * static_cast<double>(clients)) < 1) {
      throw Error("participation * clients must round to at least one client");
    }
    if (rounds < 0) throw Error("rounds must be non-negative");
    if (threads < 1) throw Error("threads must be >= 1");
    if (calibration_batch < 1) throw Error("calibration batch must be >= 1");
    if (link_quantized() && !spec.quantized()) {
      throw Error("quantized communication needs a quantized model (qat det or rand)");
    }
    if (aggregation == Aggregation::kFp32Baseline && (spec.quantized() || link_quantized())) {
      throw Error("fp32-baseline needs qat = fp32 and comm = none");
    }
  }
};

struct RoundPlan {
  int round = 0;
  std::vector<int> active;  // ascending client ids
  std::size_t m = 0;        // total examples held by the active clients
};

struct GlobalState {
  ParamSet params;
  int round = 0;  // rounds completed
};

/// What one client receives or sends in one direction.
struct LinkPayload {
  int client = 0;
  ParamSet params;  // decoded tensors and clips
  std::uint64_t bytes = 0;
};

/// P = round(C * K) clients drawn uniformly without replacement.
inline RoundPlan sample_clients(const std::vector<ClientRecord>& clients, double participation,
                                std::uint64_t seed, int round) {
  const auto k = static_cast<std::int64_t>(clients.size());
  const std::int64_t p = std::lround(participation * static_cast<double>(k));
  if (p < 1 || p > k) throw Error("empty active set");
  RandomStream rng = RandomStream::derive(seed, static_cast<std::uint64_t>(round), 0, StreamTag::kSampling);
  std::vector<int> ids(static_cast<std::size_t>(k));
  std::iota(ids.begin(), ids.end(), 0);
  for (std::int64_t i = 0; i < p; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(k - i)));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  RoundPlan plan;
  plan.round = round;
  plan.active.assign(ids.begin(), ids.begin() + p);
  std::sort(plan.active.begin(), plan.active.end());
  for (int id : plan.active) plan.m += clients[static_cast<std::size_t>(id)].n();
  return plan;
}

namespace detail {

inline std::vector<std::uint32_t> shape_of(const Matrix& m) {
  return {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
}

/// Sends a parameter set over one link. Quantized tensors travel as real FP8
/// blobs and are decoded on the far side, which hard-resets the master
/// weights onto the grid. Everything else is carried at working precision
/// and counted as a binary32 blob; clips not already inside an FP8 header
/// cost four bytes each.
inline LinkPayload transmit(const ParamSet& src, const ModelSpec& spec, CommMode comm, RandomStream& rng) {
  LinkPayload out;
  out.params = src;
  for (auto& t : out.params.tensors) {
    if (t.quantized && comm != CommMode::kNone) {
      const ClipParam clip = wire_clip(ClipParam(t.clip));
      const std::span<const double> values(t.value.data(), static_cast<std::size_t>(t.value.size()));
      const auto q = comm == CommMode::kQuantizedRand ? q_rand(values, clip, spec.format, rng)
                                                      : q_det(values, clip, spec.format);
      const auto blob = wire::serialize(encode(q, shape_of(t.value), clip, spec.format));
      out.bytes += blob.size();
      const QuantizedTensor received = wire::deserialize(blob);
      const auto decoded = decode(received);
      std::copy(decoded.begin(), decoded.end(), t.value.data());
      t.clip = received.alpha;
    } else {
      out.bytes += wire::f32_blob_bytes(static_cast<std::size_t>(t.value.size()), 2);
      if (t.quantized && spec.quantized()) out.bytes += 4;
    }
  }
  if (spec.quantized()) out.bytes += 4 * out.params.act_clips.size();
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

/// Downlink to every active client, each with its own quantizer substream.
inline std::vector<LinkPayload> broadcast(const GlobalState& state, const RoundPlan& plan, const ModelSpec& spec,
                                          const FedConfig& cfg) {
  if (plan.active.empty()) throw Error("empty active set");
  std::vector<LinkPayload> out;
  for (int k : plan.active) {
    RandomStream rng = RandomStream::derive(cfg.seed, static_cast<std::uint64_t>(plan.round),
                                            static_cast<std::uint64_t>(k), StreamTag::kBroadcast);
    LinkPayload p = detail::transmit(state.params, spec, cfg.comm, rng);
    p.client = k;
    out.push_back(std::move(p));
  }
  return out;
}

/// Weighted federated average of tensors and clips, summed in ascending
/// client-id order. Every active client must have reported.
inline ParamSet collect_and_average(const std::vector<LinkPayload>& uploads, const RoundPlan& plan,
                                    const std::vector<ClientRecord>& clients) {
  std::vector<const LinkPayload*> by_client;
  for (int k : plan.active) {
    auto it = std::find_if(uploads.begin(), uploads.end(), [k](const LinkPayload& p) { return p.client == k; });
    if (it == uploads.end()) throw Error("straggler: client " + std::to_string(k) + " did not report");
    by_client.push_back(&*it);
  }
  if (uploads.size() != plan.active.size()) throw Error("unexpected upload from an inactive client");
  const double m = static_cast<double>(plan.m);
  ParamSet avg = by_client.front()->params;
  for (auto& t : avg.tensors) {
    t.value.setZero();
    t.clip = 0.0;
  }
  std::fill(avg.act_clips.begin(), avg.act_clips.end(), 0.0);
  for (std::size_t i = 0; i < by_client.size(); ++i) {
    const double wk = static_cast<double>(clients[static_cast<std::size_t>(plan.active[i])].n()) / m;
    const ParamSet& p = by_client[i]->params;
    for (std::size_t j = 0; j < avg.tensors.size(); ++j) {
      avg.tensors[j].value += wk * p.tensors[j].value;
      avg.tensors[j].clip += wk * p.tensors[j].clip;
    }
    for (std::size_t s = 0; s < avg.act_clips.size(); ++s) avg.act_clips[s] += wk * p.act_clips[s];
  }
  return avg;
}

struct ServerStats {
  double mse = 0.0;
  double fedavg_mse = 0.0;
};

/// UQ+ aggregation: the server optimizer picks weights and alpha per
/// quantized tensor; biases and beta are averaged.
inline ParamSet server_aggregate(const std::vector<LinkPayload>& uploads, const RoundPlan& plan,
                                 const std::vector<ClientRecord>& clients, const GlobalState& state,
                                 const ModelSpec& spec, const FedConfig& cfg, ServerStats* stats = nullptr) {
  ParamSet out = collect_and_average(uploads, plan, clients);
  ServerOptConfig scfg = cfg.server;
  scfg.link_quantized = cfg.link_quantized();
  ServerStats total;
  for (std::size_t j = 0; j < out.tensors.size(); ++j) {
    auto& t = out.tensors[j];
    if (!t.quantized || !spec.quantized()) continue;
    UploadSet up;
    for (int k : plan.active) {
      const auto& p = std::find_if(uploads.begin(), uploads.end(), [k](const LinkPayload& x) { return x.client == k; })
                          ->params.tensors[j];
      up.values.emplace_back(Eigen::Map<const Eigen::VectorXd>(p.value.data(), p.value.size()));
      up.weights.push_back(static_cast<double>(clients[static_cast<std::size_t>(k)].n()) /
                           static_cast<double>(plan.m));
      up.clips.push_back(p.clip);
    }
    RandomStream rng = RandomStream::derive(cfg.seed, static_cast<std::uint64_t>(plan.round),
                                            static_cast<std::uint64_t>(j), StreamTag::kServerOpt);
    const auto& prev = state.params.tensors[j].value;
    const Eigen::VectorXd current = Eigen::Map<const Eigen::VectorXd>(prev.data(), prev.size());
    const ServerOptResult r = server_optimize(up, spec.format, scfg, rng, &current);
    std::copy(r.w.data(), r.w.data() + r.w.size(), t.value.data());
    t.clip = r.alpha;
    total.mse += r.mse;
    total.fedavg_mse += r.fedavg_mse;
  }
  if (stats) *stats = total;
  return out;
}

/// Server initialisation: He weights, alpha = max|w| per tensor and beta
/// calibrated on one batch drawn from the pooled client data.
inline GlobalState init_state(const std::vector<ClientRecord>& clients, const ModelSpec& spec,
                              const FedConfig& cfg) {
  RandomStream rng = RandomStream::derive(cfg.seed, 0, 0, StreamTag::kInit);
  GlobalState s;
  s.params = init_params(spec, rng);
  if (spec.quantized() && spec.act_sites() > 0) {
    std::size_t total = 0;
    for (const auto& c : clients) total += c.n();
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(cfg.calibration_batch), total);
    std::vector<std::size_t> flat(total);
    std::iota(flat.begin(), flat.end(), 0);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
      std::swap(flat[i], flat[j]);
    }
    Dataset batch;
    batch.classes = clients.front().shard.classes;
    batch.features.resize(static_cast<Eigen::Index>(b), clients.front().shard.features.cols());
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t idx = flat[i];
      std::size_t c = 0;
      while (idx >= clients[c].n()) idx -= clients[c++].n();
      batch.features.row(static_cast<Eigen::Index>(i)) = clients[c].shard.features.row(static_cast<Eigen::Index>(idx));
    }
    calibrate_act_clips(s.params, spec, batch);
  }
  return s;
}

struct RoundOutcome {
  RoundEntry entry;
  RoundPlan plan;
};

/// One round: sample, broadcast, local training, uplink and aggregation.
/// Clients may run on several threads; the merge is in client-id order, so
/// the result does not depend on the thread count.
inline RoundOutcome run_round(GlobalState& state, const std::vector<ClientRecord>& clients, const ModelSpec& spec,
                              const FedConfig& cfg, const Dataset* eval_set = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const int t = state.round + 1;
  if (t > cfg.rounds) throw Error("round " + std::to_string(t) + " exceeds configured rounds");
  RoundOutcome out;
  out.plan = sample_clients(clients, cfg.participation, cfg.seed, t);
  const RoundPlan& plan = out.plan;
  const std::vector<LinkPayload> down = broadcast(state, plan, spec, cfg);

  std::vector<LinkPayload> up(plan.active.size());
  detail::parallel_for(plan.active.size(), cfg.threads, [&](std::size_t i) {
    const int k = plan.active[i];
    try {
      RandomStream train_rng = RandomStream::derive(cfg.seed, static_cast<std::uint64_t>(t),
                                                    static_cast<std::uint64_t>(k), StreamTag::kLocalTrain);
      const ParamSet trained =
          local_update(down[i].params, clients[static_cast<std::size_t>(k)].shard, spec, cfg.local, train_rng);
      RandomStream up_rng = RandomStream::derive(cfg.seed, static_cast<std::uint64_t>(t),
                                                 static_cast<std::uint64_t>(k), StreamTag::kUplink);
      up[i] = detail::transmit(trained, spec, cfg.comm, up_rng);
      up[i].client = k;
    } catch (const Error& e) {
      throw Error("client " + std::to_string(k) + ": " + e.what());
    }
  });

  RoundEntry& e = out.entry;
  e.round = t;
  for (const auto& p : down) e.downlink_bytes += p.bytes;
  for (const auto& p : up) e.uplink_bytes += p.bytes;
  if (cfg.aggregation == Aggregation::kUqPlus) {
    ServerStats stats;
    state.params = server_aggregate(up, plan, clients, state, spec, cfg, &stats);
    e.server_mse = stats.mse;
    e.fedavg_mse = stats.fedavg_mse;
  } else {
    state.params = collect_and_average(up, plan, clients);
  }
  state.round = t;
  if (eval_set != nullptr) {
    const EvalResult r = evaluate(state.params, *eval_set, spec);
    e.eval_acc = r.accuracy;
    e.eval_loss = r.loss;
  }
  if (cfg.record_wall_time) {
    e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return out;
}

struct RunResult {
  GlobalState state;
  RoundLedger ledger;
  EvalResult final_eval;
};

/// Runs cfg.rounds rounds from a fresh server state, evaluating after each.
inline RunResult run_federated(const std::vector<ClientRecord>& clients, const Dataset& eval_set,
                               const ModelSpec& spec, const FedConfig& cfg) {
  spec.validate();
  cfg.validate(spec, clients.size());
  RunResult r;
  r.state = init_state(clients, spec, cfg);
  for (int t = 1; t <= cfg.rounds; ++t) {
    record_round(r.ledger, run_round(r.state, clients, spec, cfg, &eval_set).entry);
  }
  r.final_eval = evaluate(r.state.params, eval_set, spec);
  return r;
}

}  // namespace fp8fed
