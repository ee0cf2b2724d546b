#pragma once

// Discrete-event model of synchronous data-parallel training: per-step
// compute from the throughput curves, a ring-allreduce synchronization cost,
// straggler stalls, and a wall-power energy model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "stannis/error.hpp"
#include "stannis/partitioner.hpp"
#include "stannis/profiles.hpp"
#include "stannis/tuner.hpp"

namespace stannis {

struct SyncModel {
  double alpha_sec = 0.0;                       // fixed cost per allreduce
  double effective_bandwidth_bytes_per_sec = 1e9;
  double per_param_overhead = 1.0;              // framework overhead multiplier, >= 1

  static double ring_factor(std::size_t n_nodes) {
    return n_nodes <= 1 ? 0.0 : 2.0 * static_cast<double>(n_nodes - 1) / static_cast<double>(n_nodes);
  }

  static SyncModel from_cluster(const ClusterSpec& cluster) {
    return {cluster.link_latency_sec, cluster.link_bandwidth_bytes_per_sec, 1.0};
  }
};

inline double sync_time(const SyncModel& model, std::uint64_t param_count, std::uint32_t bytes_per_param,
                        std::size_t n_nodes) {
  if (n_nodes < 1) throw Error(ErrorCode::kInvalidArgument, "n_nodes must be >= 1");
  if (n_nodes == 1) return 0.0;
  const double payload = static_cast<double>(param_count) * bytes_per_param;
  return model.alpha_sec + SyncModel::ring_factor(n_nodes) * payload * model.per_param_overhead /
                               model.effective_bandwidth_bytes_per_sec;
}

struct EnergyModelParams {
  double host_active_watts = 0.0;
  double csd_active_watts = 0.0;
  double csd_idle_watts = 0.0;
  double baseline_ssd_idle_watts = 0.0;
  double chassis_overhead_watts = 0.0;
  int baseline_drive_count = 24;  // conventional SSDs in the host-only server

  static EnergyModelParams from_cluster(const ClusterSpec& cluster) {
    EnergyModelParams p;
    p.host_active_watts = cluster.host.active_power_watts;
    if (!cluster.csds.empty()) {
      p.csd_active_watts = cluster.csds.front().active_power_watts;
      p.csd_idle_watts = cluster.csds.front().idle_power_watts;
    }
    p.baseline_ssd_idle_watts = cluster.baseline_storage_idle_watts;
    p.chassis_overhead_watts = cluster.chassis_overhead_watts;
    return p;
  }

  // Wall power of the host-only server with its conventional drives idling.
  double baseline_watts() const {
    return chassis_overhead_watts + host_active_watts + baseline_drive_count * baseline_ssd_idle_watts;
  }

  // Wall power with `n_csds` computational drives training alongside the host.
  double config_watts(std::size_t n_csds) const {
    if (n_csds == 0) return baseline_watts();
    return chassis_overhead_watts + host_active_watts + static_cast<double>(n_csds) * csd_active_watts;
  }
};

struct EpochReport {
  std::string network;
  std::size_t n_csds = 0;
  std::map<std::string, int> batch_sizes;
  Count epoch_steps = 0;
  double round_time_sec = 0.0;
  double sync_time_sec = 0.0;
  double epoch_time_sec = 0.0;
  double images_per_second_aggregate = 0.0;
  double host_plateau_images_per_second = 0.0;
  std::map<std::string, double> per_node_effective_speed;
  std::map<std::string, double> stall_seconds_per_step;
  double speedup_vs_host = 0.0;
  double total_watts = 0.0;
  double baseline_watts = 0.0;
  double energy_per_image_joules = 0.0;
  double flops_per_watt = 0.0;
  double energy_saving_vs_baseline = 0.0;
};

inline double energy_per_image(double images_per_second, double watts) {
  if (!(images_per_second > 0.0)) throw Error(ErrorCode::kZeroThroughput, "aggregate throughput is zero");
  return watts / images_per_second;
}

inline double flops_per_watt(const NetworkDescriptor& net, double images_per_second, double watts) {
  return static_cast<double>(net.flop_count) * images_per_second / watts;
}

/// Fills the power and energy fields of a report whose throughput is known.
inline void apply_energy(EpochReport& report, const NetworkDescriptor& net, const EnergyModelParams& energy) {
  report.total_watts = energy.config_watts(report.n_csds);
  report.baseline_watts = energy.baseline_watts();
  report.energy_per_image_joules = energy_per_image(report.images_per_second_aggregate, report.total_watts);
  const double baseline_j = energy_per_image(report.host_plateau_images_per_second, report.baseline_watts);
  report.energy_saving_vs_baseline = 1.0 - report.energy_per_image_joules / baseline_j;
  report.flops_per_watt = flops_per_watt(net, report.images_per_second_aggregate, report.total_watts);
}

namespace detail {

struct SimEvent {
  double time;
  std::size_t seq;
  std::size_t node;
  bool operator>(const SimEvent& o) const { return std::tie(time, seq) > std::tie(o.time, o.seq); }
};

}  // namespace detail

inline EpochReport simulate_epoch(const ClusterSpec& cluster, const NetworkDescriptor& net,
                                  const TuneResult& tune, const PartitionPlan& plan, const SyncModel& sync,
                                  const EnergyModelParams& energy) {
  if (plan.per_node.size() != tune.per_node.size()) {
    throw Error(ErrorCode::kInconsistent, "tune and plan cover different node sets");
  }
  for (const auto& [id, n] : tune.per_node) {
    auto it = plan.per_node.find(id);
    if (it == plan.per_node.end()) throw Error(ErrorCode::kInconsistent, "node missing from plan", id);
    const auto& a = it->second;
    if (a.batch_size != n.batch_size || a.steps_per_epoch != plan.epoch_steps ||
        a.total() != static_cast<Count>(n.batch_size) * plan.epoch_steps) {
      throw Error(ErrorCode::kInconsistent, "plan assignment does not match the tuned batch size", id);
    }
  }
  if (plan.epoch_steps < 1) throw Error(ErrorCode::kInconsistent, "plan has no steps");

  std::vector<std::string> ids;
  std::vector<double> compute;
  std::size_t n_csds = 0;
  for (const auto& [id, n] : tune.per_node) {
    const NodeProfile& node = cluster.node(id);
    if (node.node_class == NodeClass::kCsd) ++n_csds;
    ids.push_back(id);
    compute.push_back(node.curve_for(net.name).step_time(n.batch_size));
  }
  const std::size_t n_nodes = ids.size();

  EpochReport r;
  r.network = net.name;
  r.n_csds = n_csds;
  r.batch_sizes = tune.batch_sizes();
  r.epoch_steps = plan.epoch_steps;
  r.sync_time_sec = sync_time(sync, net.param_count, net.bytes_per_param, n_nodes);
  r.host_plateau_images_per_second = cluster.host.curve_for(net.name).saturation_throughput();

  // Each round: every node computes its batch, the last arrival releases the
  // barrier, then the allreduce runs. No compute/communication overlap.
  std::vector<double> stall(n_nodes, 0.0);
  std::priority_queue<detail::SimEvent, std::vector<detail::SimEvent>, std::greater<>> events;
  std::size_t seq = 0;
  double clock = 0.0;
  double last_round = 0.0;
  for (Count step = 0; step < plan.epoch_steps; ++step) {
    const double start = clock;
    for (std::size_t i = 0; i < n_nodes; ++i) events.push({start + compute[i], seq++, i});
    std::vector<double> arrival(n_nodes, 0.0);
    double barrier = start;
    while (!events.empty()) {
      const auto ev = events.top();
      events.pop();
      arrival[ev.node] = ev.time;
      barrier = ev.time;
    }
    for (std::size_t i = 0; i < n_nodes; ++i) stall[i] += barrier - arrival[i];
    clock = barrier + r.sync_time_sec;
    last_round = clock - start;
  }
  r.epoch_time_sec = clock;
  r.round_time_sec = last_round;

  const double steps = static_cast<double>(plan.epoch_steps);
  double images = 0.0;
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const int b = tune.per_node.at(ids[i]).batch_size;
    images += static_cast<double>(b) * steps;
    r.stall_seconds_per_step[ids[i]] = stall[i] / steps;
    r.per_node_effective_speed[ids[i]] = static_cast<double>(b) * steps / r.epoch_time_sec;
  }
  if (n_nodes == 1) {
    // A lone node never waits or synchronizes: its speed is its curve value.
    const auto& only = tune.per_node.begin()->second;
    r.images_per_second_aggregate = cluster.node(ids[0]).curve_for(net.name).throughput_at(only.batch_size);
    r.per_node_effective_speed[ids[0]] = r.images_per_second_aggregate;
  } else {
    r.images_per_second_aggregate = images / r.epoch_time_sec;
  }
  r.speedup_vs_host = r.images_per_second_aggregate / r.host_plateau_images_per_second;
  apply_energy(r, net, energy);
  return r;
}

// Parameters shared by every stage of a simulated configuration.
struct SimParams {
  TuneConfig tune;
  SyncModel sync;
  EnergyModelParams energy;
  Count public_total = 72000;
  Count private_per_csd = 500;

  static SimParams from_cluster(const ClusterSpec& cluster) {
    SimParams p;
    p.sync = SyncModel::from_cluster(cluster);
    p.energy = EnergyModelParams::from_cluster(cluster);
    return p;
  }
};

struct ParamInfo {
  std::string name;
  double lo;
  double hi;
  std::function<double&(SimParams&)> ref;
};

/// Named scalar parameters of the sync and energy models, with the bounds
/// calibration searches within.
inline const std::vector<ParamInfo>& model_params() {
  static const std::vector<ParamInfo> params = {
      {"sync.alpha_sec", 0.0, 10.0, [](SimParams& p) -> double& { return p.sync.alpha_sec; }},
      {"sync.bandwidth_bytes_per_sec", 1e3, 1e12,
       [](SimParams& p) -> double& { return p.sync.effective_bandwidth_bytes_per_sec; }},
      {"sync.per_param_overhead", 1.0, 100.0, [](SimParams& p) -> double& { return p.sync.per_param_overhead; }},
      {"energy.host_active_watts", 0.0, 2000.0, [](SimParams& p) -> double& { return p.energy.host_active_watts; }},
      {"energy.csd_active_watts", 0.0, 100.0, [](SimParams& p) -> double& { return p.energy.csd_active_watts; }},
      {"energy.csd_idle_watts", 0.0, 100.0, [](SimParams& p) -> double& { return p.energy.csd_idle_watts; }},
      {"energy.baseline_ssd_idle_watts", 0.0, 100.0,
       [](SimParams& p) -> double& { return p.energy.baseline_ssd_idle_watts; }},
      {"energy.chassis_overhead_watts", 0.0, 2000.0,
       [](SimParams& p) -> double& { return p.energy.chassis_overhead_watts; }},
  };
  return params;
}

inline const ParamInfo& find_model_param(const std::string& name) {
  for (const auto& p : model_params()) {
    if (p.name == name) return p;
  }
  throw Error(ErrorCode::kUnknownKey, "unknown model parameter '" + name + "'", name);
}

inline DatasetSpec default_dataset(const ClusterSpec& cluster, const SimParams& params) {
  DatasetSpec d;
  d.public_total = params.public_total;
  for (const auto& c : cluster.csds) d.private_per_node[c.node_id] = params.private_per_csd;
  return d;
}

/// tune -> partition -> simulate for the host plus the first `n_csds` CSDs.
inline EpochReport run_configuration(const ClusterSpec& cluster, const NetworkDescriptor& net, std::size_t n_csds,
                                     const SimParams& params) {
  const ClusterSpec sub = cluster.with_csd_count(n_csds);
  const TuneResult tune = tune_cluster(sub, net, params.tune);
  const PartitionPlan plan = balance_epoch(tune, default_dataset(sub, params));
  return simulate_epoch(sub, net, tune, plan, params.sync, params.energy);
}

inline std::vector<std::pair<std::size_t, EpochReport>> speedup_curve(const ClusterSpec& cluster,
                                                                      const NetworkDescriptor& net,
                                                                      const std::vector<std::size_t>& node_counts,
                                                                      const SimParams& params) {
  if (!std::is_sorted(node_counts.begin(), node_counts.end())) {
    throw Error(ErrorCode::kInvalidArgument, "node counts must be sorted ascending");
  }
  std::vector<std::pair<std::size_t, EpochReport>> out;
  out.reserve(node_counts.size());
  for (std::size_t n : node_counts) out.emplace_back(n, run_configuration(cluster, net, n, params));
  return out;
}

// ---------------------------------------------------------------------------
// Calibration

enum class Metric { kImagesPerSecond, kSpeedup, kJoulesPerImage, kFlopsPerWatt, kEnergySaving };

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::kImagesPerSecond: return "img_per_sec";
    case Metric::kSpeedup: return "speedup";
    case Metric::kJoulesPerImage: return "j_per_img";
    case Metric::kFlopsPerWatt: return "flops_per_watt";
    case Metric::kEnergySaving: return "energy_saving";
  }
  return "unknown";
}

inline Metric metric_from_string(const std::string& s) {
  for (Metric m : {Metric::kImagesPerSecond, Metric::kSpeedup, Metric::kJoulesPerImage, Metric::kFlopsPerWatt,
                   Metric::kEnergySaving}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown metric '" + s + "'");
}

inline double metric_value(const EpochReport& r, Metric m) {
  switch (m) {
    case Metric::kImagesPerSecond: return r.images_per_second_aggregate;
    case Metric::kSpeedup: return r.speedup_vs_host;
    case Metric::kJoulesPerImage: return r.energy_per_image_joules;
    case Metric::kFlopsPerWatt: return r.flops_per_watt;
    case Metric::kEnergySaving: return r.energy_saving_vs_baseline;
  }
  return 0.0;
}

struct CalibrationTarget {
  std::string network;
  std::size_t n_csds = 0;
  Metric metric = Metric::kSpeedup;
  double value = 0.0;
};

struct CalibrationOptions {
  int max_sweeps = 50;
  int line_search_iterations = 80;
  double tolerance = 1e-14;
  std::uint64_t seed = 0;
  double residual_ceiling = 0.05;
};

struct Residual {
  CalibrationTarget target;
  double simulated = 0.0;
  double relative = 0.0;  // (simulated - target) / target
};

struct CalibrationResult {
  std::map<std::string, double> params;
  std::vector<Residual> residuals;
  double max_abs_relative_residual = 0.0;
  bool above_ceiling = false;
  int sweeps = 0;
  double objective = 0.0;
};

/// Least-squares fit of named model parameters to observed metrics by
/// bounded coordinate descent with golden-section line searches. Coordinate
/// order per sweep is drawn from `options.seed`.
inline CalibrationResult calibrate(const ClusterSpec& cluster, const std::map<std::string, NetworkDescriptor>& networks,
                                   const std::vector<CalibrationTarget>& targets,
                                   const std::vector<std::string>& free_params, SimParams& params,
                                   const CalibrationOptions& options = {}) {
  if (targets.size() < free_params.size()) {
    throw Error(ErrorCode::kUnderdetermined,
                fmt::format("{} targets cannot determine {} free parameters", targets.size(), free_params.size()));
  }
  std::vector<const ParamInfo*> infos;
  for (const auto& name : free_params) infos.push_back(&find_model_param(name));
  for (const auto& t : targets) {
    if (!networks.contains(t.network)) {
      throw Error(ErrorCode::kInvalidArgument, "calibration target names unknown network '" + t.network + "'");
    }
    if (t.value == 0.0) throw Error(ErrorCode::kInvalidArgument, "calibration target value must be non-zero");
  }

  // Throughput depends only on the sync model; energy is cheap to reapply.
  using PerfKey = std::tuple<std::string, std::size_t, double, double, double>;
  std::map<PerfKey, EpochReport> perf_cache;
  auto report_for = [&](const CalibrationTarget& t, const SimParams& p) {
    const PerfKey key{t.network, t.n_csds, p.sync.alpha_sec, p.sync.effective_bandwidth_bytes_per_sec,
                      p.sync.per_param_overhead};
    auto it = perf_cache.find(key);
    if (it == perf_cache.end()) {
      it = perf_cache.emplace(key, run_configuration(cluster, networks.at(t.network), t.n_csds, p)).first;
    }
    EpochReport r = it->second;
    apply_energy(r, networks.at(t.network), p.energy);
    return r;
  };
  auto objective = [&](const SimParams& p) {
    double sum = 0.0;
    for (const auto& t : targets) {
      const double rel = (metric_value(report_for(t, p), t.metric) - t.value) / t.value;
      sum += rel * rel;
    }
    return sum;
  };

  CalibrationResult result;
  double best = objective(params);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(infos.size());
  std::iota(order.begin(), order.end(), 0);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;

  for (int sweep = 0; sweep < options.max_sweeps && !infos.empty(); ++sweep) {
    ++result.sweeps;
    std::shuffle(order.begin(), order.end(), rng);
    const double before = best;
    for (std::size_t k : order) {
      const ParamInfo& info = *infos[k];
      SimParams trial = params;
      auto eval_at = [&](double x) {
        info.ref(trial) = x;
        return objective(trial);
      };
      double a = info.lo;
      double b = info.hi;
      double c = b - inv_phi * (b - a);
      double d = a + inv_phi * (b - a);
      double fc = eval_at(c);
      double fd = eval_at(d);
      for (int it = 0; it < options.line_search_iterations; ++it) {
        if (fc < fd) {
          b = d;
          d = c;
          fd = fc;
          c = b - inv_phi * (b - a);
          fc = eval_at(c);
        } else {
          a = c;
          c = d;
          fc = fd;
          d = a + inv_phi * (b - a);
          fd = eval_at(d);
        }
      }
      const double x = fc < fd ? c : d;
      const double fx = eval_at(x);
      if (fx < best) {
        best = fx;
        info.ref(params) = x;
      }
    }
    if (before - best <= options.tolerance * (1.0 + best)) break;
  }

  result.objective = best;
  for (const auto* info : infos) result.params[info->name] = info->ref(params);
  for (const auto& t : targets) {
    const double sim = metric_value(report_for(t, params), t.metric);
    const double rel = (sim - t.value) / t.value;
    result.residuals.push_back({t, sim, rel});
    result.max_abs_relative_residual = std::max(result.max_abs_relative_residual, std::abs(rel));
  }
  result.above_ceiling = result.max_abs_relative_residual > options.residual_ceiling;
  return result;
}

struct CalibrationStage {
  std::string name;
  std::vector<std::string> free_params;
  std::vector<CalibrationTarget> targets;
};

/// Runs stages in order, each starting from the parameters the previous
/// stage left in `params`.
inline std::vector<CalibrationResult> calibrate_stages(const ClusterSpec& cluster,
                                                       const std::map<std::string, NetworkDescriptor>& networks,
                                                       const std::vector<CalibrationStage>& stages, SimParams& params,
                                                       const CalibrationOptions& options = {}) {
  std::vector<CalibrationResult> out;
  for (const auto& st : stages) out.push_back(calibrate(cluster, networks, st.targets, st.free_params, params, options));
  return out;
}

}  // namespace stannis
