#pragma once

// Heterogeneous batch-size tuning. The slowest node class gets the candidate
// batch with the best throughput; every faster node then grows its batch
// until its per-step time comes within a 1/E band of the slow node's.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "stannis/error.hpp"
#include "stannis/profiles.hpp"

namespace stannis {

// Which edge of the +-1/E band around the slow node's step time a fast node
// grows towards.
enum class StopRule {
  // Stop as soon as fast_step >= slow_step * (1 - 1/E). Identical nodes keep
  // the slow node's batch.
  kLowerEdge,
  // Keep growing while fast_step < slow_step * (1 + 1/E), never crossing the
  // upper edge. The fast node ends up to 1/E slower than the slow node.
  kUpperEdge,
};

inline std::string_view to_string(StopRule r) {
  return r == StopRule::kLowerEdge ? "lower_edge" : "upper_edge";
}

struct TuneConfig {
  std::vector<int> candidate_batches{8, 15, 16, 25, 32, 50, 64, 128, 256, 512, 1024};
  double C = 4.0;  // update damping; larger means finer steps
  double E = 5.0;  // margin scale; band half-width is 1/E
  int max_iterations = 100;
  bool memory_cap_enforced = true;
  StopRule stop_rule = StopRule::kLowerEdge;
  MemoryModel memory{};

  void validate() const {
    if (candidate_batches.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "candidate batch list is empty");
    }
    for (std::size_t i = 0; i < candidate_batches.size(); ++i) {
      if (candidate_batches[i] < 1) {
        throw Error(ErrorCode::kNonPositive, "candidate batch sizes must be positive");
      }
      if (i > 0 && candidate_batches[i] <= candidate_batches[i - 1]) {
        throw Error(ErrorCode::kInvalidArgument, "candidate batch sizes must be strictly increasing");
      }
    }
    if (!(C >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "C must be >= 1");
    if (!(E > 1.0)) throw Error(ErrorCode::kInvalidArgument, "E must be > 1");
    if (max_iterations < 1) throw Error(ErrorCode::kInvalidArgument, "max_iterations must be >= 1");
  }
};

struct SlowNodeChoice {
  int batch_size = 0;
  double images_per_second = 0.0;
  double step_time = 0.0;
};

/// Candidate batch (<= mem_cap) with the highest throughput; ties go to the
/// smallest batch.
inline SlowNodeChoice select_slow_node_batch(const ThroughputCurve& curve, const TuneConfig& config,
                                             int mem_cap) {
  SlowNodeChoice best;
  for (int b : config.candidate_batches) {
    if (b > mem_cap) break;
    const double ips = curve.throughput_at(b);
    if (best.batch_size == 0 || ips > best.images_per_second) {
      best = {b, ips, 0.0};
    }
  }
  if (best.batch_size == 0) {
    throw Error(ErrorCode::kNoCandidate,
                fmt::format("no candidate batch size fits under the memory cap of {}", mem_cap));
  }
  best.step_time = curve.step_time(best.batch_size);
  return best;
}

struct FastNodeTune {
  int batch_size = 0;
  double step_time = 0.0;
  int iterations = 0;
  bool converged = false;
  bool capped = false;               // stopped at the memory cap
  std::vector<int> trajectory;       // batch size after each update, starting value first
};

namespace detail {

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Batch increment for one tuning iteration: b * relative_gap / C, at least 1.
inline int update_quantum(int batch, double step, double slow_step, double C) {
  const double raw = batch * (slow_step - step) / (C * slow_step);
  return std::max(1, round_half_up(raw));
}

}  // namespace detail

/// Size of the step the tuner would take from `batch`, using the absolute
/// step-time gap. Used as the resolution of a tuned batch size.
inline int update_quantum_at(const ThroughputCurve& curve, int batch, double slow_step, double C) {
  const double step = curve.step_time(batch);
  const double raw = batch * std::abs(slow_step - step) / (C * slow_step);
  return std::max(1, detail::round_half_up(raw));
}

inline FastNodeTune tune_fast_node(const ThroughputCurve& fast_curve, double slow_step_time,
                                   const TuneConfig& config, int initial_batch, int mem_cap) {
  if (!(slow_step_time > 0.0)) {
    throw Error(ErrorCode::kNonPositive, "slow step time must be positive");
  }
  if (initial_batch < 1) throw Error(ErrorCode::kNonPositive, "initial batch must be >= 1");

  FastNodeTune out;
  int b = std::min(initial_batch, mem_cap);
  out.trajectory.push_back(b);
  const double lower = slow_step_time * (1.0 - 1.0 / config.E);
  const double upper = slow_step_time * (1.0 + 1.0 / config.E);

  auto done = [&](double step) {
    return config.stop_rule == StopRule::kLowerEdge ? step >= lower : step >= upper;
  };

  double step = fast_curve.step_time(b);
  while (!done(step)) {
    if (out.iterations >= config.max_iterations) break;
    if (b >= mem_cap) {
      out.capped = true;
      break;
    }
    int next = std::min(b + detail::update_quantum(b, step, slow_step_time, config.C), mem_cap);
    if (config.stop_rule == StopRule::kUpperEdge) {
      while (next > b && fast_curve.step_time(next) > upper) --next;
      if (next == b) break;  // one more sample would cross the upper edge
    }
    b = next;
    step = fast_curve.step_time(b);
    ++out.iterations;
    out.trajectory.push_back(b);
  }

  out.batch_size = b;
  out.step_time = step;
  if (config.stop_rule == StopRule::kLowerEdge) {
    out.converged = step >= lower;
  } else {
    out.converged = step >= lower && step <= upper;
  }
  if (!out.converged && b >= mem_cap) out.capped = true;
  return out;
}

struct NodeTune {
  int batch_size = 0;
  double step_time = 0.0;
  double images_per_second = 0.0;
  bool converged = true;
  bool capped = false;
  int iterations = 0;
};

struct TuneResult {
  std::string network;
  std::map<std::string, NodeTune> per_node;
  std::string slow_node_id;
  double margin_achieved = 0.0;

  std::map<std::string, int> batch_sizes() const {
    std::map<std::string, int> out;
    for (const auto& [id, n] : per_node) out[id] = n.batch_size;
    return out;
  }

  int total_batch() const {
    int sum = 0;
    for (const auto& [id, n] : per_node) sum += n.batch_size;
    return sum;
  }
};

inline int memory_cap(const NodeProfile& node, const NetworkDescriptor& net, const TuneConfig& config) {
  if (!config.memory_cap_enforced) return std::numeric_limits<int>::max();
  return max_batch_for_memory(node, net, config.memory);
}

/// Tunes every node of the cluster for one network. The slow node is the one
/// with the lowest plateau throughput (ties: smallest node_id).
inline TuneResult tune_cluster(const ClusterSpec& cluster, const NetworkDescriptor& net,
                               const TuneConfig& config) {
  config.validate();
  net.validate();

  struct Entry {
    const NodeProfile* node;
    const ThroughputCurve* curve;
    int cap;
  };
  std::map<std::string, Entry> entries;
  for (const auto* node : cluster.nodes()) {
    try {
      entries[node->node_id] = {node, &node->curve_for(net.name), memory_cap(*node, net, config)};
    } catch (const Error& e) {
      throw Error(e.code(), "node '" + node->node_id + "': " + e.what(), node->node_id);
    }
  }

  const Entry* slow = nullptr;
  std::string slow_id;
  for (const auto& [id, e] : entries) {
    if (slow == nullptr || e.curve->saturation_throughput() < slow->curve->saturation_throughput()) {
      slow = &e;
      slow_id = id;
    }
  }

  TuneResult result;
  result.network = net.name;
  result.slow_node_id = slow_id;
  SlowNodeChoice choice;
  try {
    choice = select_slow_node_batch(*slow->curve, config, slow->cap);
  } catch (const Error& e) {
    throw Error(e.code(), "node '" + slow_id + "': " + e.what(), slow_id);
  }
  result.per_node[slow_id] = {choice.batch_size, choice.step_time, choice.images_per_second, true, false, 0};

  for (const auto& [id, e] : entries) {
    if (id == slow_id) continue;
    FastNodeTune t;
    try {
      t = tune_fast_node(*e.curve, choice.step_time, config, choice.batch_size, e.cap);
    } catch (const Error& err) {
      throw Error(err.code(), "node '" + id + "': " + err.what(), id);
    }
    result.per_node[id] = {t.batch_size, t.step_time, e.curve->throughput_at(t.batch_size),
                           t.converged, t.capped, t.iterations};
  }

  for (const auto& [id, n] : result.per_node) {
    result.margin_achieved =
        std::max(result.margin_achieved, std::abs(n.step_time - choice.step_time) / choice.step_time);
  }
  return result;
}

}  // namespace stannis
