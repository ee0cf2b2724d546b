#pragma once

// JSON and CSV schemas for everything the pipeline reads or writes.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "stannis/error.hpp"
#include "stannis/minitrain.hpp"
#include "stannis/partitioner.hpp"
#include "stannis/profiles.hpp"
#include "stannis/simengine.hpp"
#include "stannis/tuner.hpp"

namespace stannis::io {

using nlohmann::json;
// Insertion-ordered documents keep emitted files in schema order.
using ojson = nlohmann::ordered_json;

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read '" + path + "'", path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path + "'", path);
  out << content;
  if (!out) throw Error(ErrorCode::kIo, "write to '" + path + "' failed", path);
}

inline ojson parse_json(const std::string& text, const std::string& source) {
  try {
    return ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, e.what(), source);
  }
}

inline ojson load_json(const std::string& path) { return parse_json(read_file(path), path); }

inline std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

// Runs `fn`, converting JSON access failures into schema errors.
template <typename Fn>
auto with_schema(const std::string& what, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, what + ": " + e.what(), what);
  }
}

// ---------------------------------------------------------------------------
// Networks and clusters

inline NetworkDescriptor network_from_json(const ojson& j) {
  return with_schema("network", [&] {
    NetworkDescriptor n;
    n.name = j.at("name").get<std::string>();
    n.param_count = j.at("param_count").get<std::uint64_t>();
    n.flop_count = j.at("flop_count").get<std::uint64_t>();
    n.mac_count = j.at("mac_count").get<std::uint64_t>();
    n.bytes_per_param = j.at("bytes_per_param").get<std::uint32_t>();
    n.activation_bytes_per_sample = j.at("activation_bytes_per_sample").get<std::uint64_t>();
    n.validate();
    return n;
  });
}

inline ojson to_json(const NetworkDescriptor& n) {
  return ojson{{"name", n.name},
               {"param_count", n.param_count},
               {"flop_count", n.flop_count},
               {"mac_count", n.mac_count},
               {"bytes_per_param", n.bytes_per_param},
               {"activation_bytes_per_sample", n.activation_bytes_per_sample}};
}

inline NodeProfile node_from_json(const ojson& j) {
  return with_schema("node", [&] {
    NodeProfile n;
    n.node_id = j.at("node_id").get<std::string>();
    const auto cls = j.at("class").get<std::string>();
    if (cls == "host") {
      n.node_class = NodeClass::kHost;
    } else if (cls == "csd") {
      n.node_class = NodeClass::kCsd;
    } else {
      throw Error(ErrorCode::kParse, "node class must be 'host' or 'csd'", n.node_id);
    }
    n.dram_bytes = j.at("dram_bytes").get<std::uint64_t>();
    n.active_power_watts = j.at("active_power_watts").get<double>();
    n.idle_power_watts = j.at("idle_power_watts").get<double>();
    if (j.contains("curves")) {
      for (const auto& [net, pts] : j.at("curves").items()) {
        std::vector<CurveSample> samples;
        for (const auto& p : pts) samples.push_back({p.at(0).get<int>(), p.at(1).get<double>()});
        try {
          n.curves[net] = fit_curve(std::move(samples));
        } catch (const Error& e) {
          throw Error(e.code(), fmt::format("curve '{}': {}", net, e.what()), n.node_id);
        }
      }
    }
    n.validate();
    return n;
  });
}

inline ojson to_json(const NodeProfile& n) {
  ojson curves = ojson::object();
  for (const auto& [net, c] : n.curves) {
    ojson pts = ojson::array();
    for (const auto& s : c.samples()) pts.push_back(ojson::array({s.batch_size, s.images_per_second}));
    curves[net] = pts;
  }
  return ojson{{"node_id", n.node_id},
               {"class", std::string(to_string(n.node_class))},
               {"dram_bytes", n.dram_bytes},
               {"active_power_watts", n.active_power_watts},
               {"idle_power_watts", n.idle_power_watts},
               {"curves", curves}};
}

inline ClusterSpec cluster_from_json(const ojson& j) {
  return with_schema("cluster", [&] {
    ClusterSpec c;
    c.host = node_from_json(j.at("host"));
    if (c.host.node_class != NodeClass::kHost) {
      throw Error(ErrorCode::kParse, "the 'host' node must have class 'host'", c.host.node_id);
    }
    for (const auto& n : j.at("csds")) {
      c.csds.push_back(node_from_json(n));
      if (c.csds.back().node_class != NodeClass::kCsd) {
        throw Error(ErrorCode::kParse, "entries of 'csds' must have class 'csd'", c.csds.back().node_id);
      }
    }
    c.link_bandwidth_bytes_per_sec = j.at("link").at("bandwidth_bytes_per_sec").get<double>();
    c.link_latency_sec = j.at("link").at("latency_sec").get<double>();
    c.baseline_storage_idle_watts = j.at("baseline_storage_idle_watts").get<double>();
    c.chassis_overhead_watts = j.value("chassis_overhead_watts", 0.0);
    c.validate();
    return c;
  });
}

inline ojson to_json(const ClusterSpec& c) {
  ojson csds = ojson::array();
  for (const auto& n : c.csds) csds.push_back(to_json(n));
  return ojson{{"host", to_json(c.host)},
               {"csds", csds},
               {"link", {{"bandwidth_bytes_per_sec", c.link_bandwidth_bytes_per_sec}, {"latency_sec", c.link_latency_sec}}},
               {"baseline_storage_idle_watts", c.baseline_storage_idle_watts},
               {"chassis_overhead_watts", c.chassis_overhead_watts}};
}

// ---------------------------------------------------------------------------
// Tuning

inline ojson to_json(const TuneResult& t) {
  ojson per_node = ojson::object();
  for (const auto& [id, n] : t.per_node) {
    per_node[id] = ojson{{"batch", n.batch_size},
                         {"step_time_sec", n.step_time},
                         {"img_per_sec", n.images_per_second},
                         {"converged", n.converged},
                         {"capped", n.capped},
                         {"iterations", n.iterations}};
  }
  return ojson{{"network", t.network},
               {"slow_node", t.slow_node_id},
               {"margin_achieved", t.margin_achieved},
               {"per_node", per_node}};
}

inline TuneResult tune_from_json(const ojson& j) {
  return with_schema("tune result", [&] {
    TuneResult t;
    t.network = j.value("network", std::string{});
    t.slow_node_id = j.at("slow_node").get<std::string>();
    t.margin_achieved = j.at("margin_achieved").get<double>();
    for (const auto& [id, n] : j.at("per_node").items()) {
      NodeTune nt;
      nt.batch_size = n.at("batch").get<int>();
      nt.step_time = n.at("step_time_sec").get<double>();
      nt.images_per_second = n.at("img_per_sec").get<double>();
      nt.converged = n.value("converged", true);
      nt.capped = n.value("capped", false);
      nt.iterations = n.value("iterations", 0);
      t.per_node[id] = nt;
    }
    return t;
  });
}

inline ojson to_json(const TuneConfig& c) {
  return ojson{{"candidate_batches", c.candidate_batches},
               {"C", c.C},
               {"E", c.E},
               {"max_iterations", c.max_iterations},
               {"memory_cap_enforced", c.memory_cap_enforced},
               {"stop_rule", std::string(to_string(c.stop_rule))},
               {"memory_state_copies", c.memory.state_copies}};
}

// ---------------------------------------------------------------------------
// Partitioning

inline DatasetSpec dataset_from_json(const ojson& j) {
  return with_schema("dataset", [&] {
    DatasetSpec d;
    d.public_total = j.at("public_total").get<Count>();
    if (j.contains("private_per_node")) {
      for (const auto& [id, n] : j.at("private_per_node").items()) d.private_per_node[id] = n.get<Count>();
    }
    d.validate();
    return d;
  });
}

inline ojson to_json(const DatasetSpec& d) {
  ojson priv = ojson::object();
  for (const auto& [id, n] : d.private_per_node) priv[id] = n;
  return ojson{{"public_total", d.public_total}, {"private_per_node", priv}};
}

inline ojson to_json(const PartitionPlan& p) {
  ojson per_node = ojson::object();
  for (const auto& [id, a] : p.per_node) {
    per_node[id] = ojson{{"batch", a.batch_size},
                         {"steps", a.steps_per_epoch},
                         {"private_owner", a.private_owner},
                         {"private", ojson::array({a.private_ids.lo, a.private_ids.hi})},
                         {"public", ojson::array({a.public_ids.lo, a.public_ids.hi})},
                         {"duplicated", a.duplicated_private}};
  }
  return ojson{{"epoch_steps", p.epoch_steps}, {"per_node", per_node}};
}

inline PartitionPlan plan_from_json(const ojson& j) {
  return with_schema("partition plan", [&] {
    PartitionPlan p;
    p.epoch_steps = j.at("epoch_steps").get<Count>();
    for (const auto& [id, n] : j.at("per_node").items()) {
      NodeAssignment a;
      a.batch_size = n.at("batch").get<int>();
      a.steps_per_epoch = n.value("steps", p.epoch_steps);
      a.private_owner = n.value("private_owner", std::string{});
      a.private_ids = {n.at("private").at(0).get<Count>(), n.at("private").at(1).get<Count>()};
      a.public_ids = {n.at("public").at(0).get<Count>(), n.at("public").at(1).get<Count>()};
      a.duplicated_private = n.at("duplicated").get<Count>();
      p.per_node[id] = a;
    }
    return p;
  });
}

// ---------------------------------------------------------------------------
// Simulation

inline ojson to_json(const SyncModel& s) {
  return ojson{{"alpha_sec", s.alpha_sec},
               {"bandwidth_bytes_per_sec", s.effective_bandwidth_bytes_per_sec},
               {"per_param_overhead", s.per_param_overhead}};
}

inline ojson to_json(const EnergyModelParams& e) {
  return ojson{{"host_active_watts", e.host_active_watts},
               {"csd_active_watts", e.csd_active_watts},
               {"csd_idle_watts", e.csd_idle_watts},
               {"baseline_ssd_idle_watts", e.baseline_ssd_idle_watts},
               {"chassis_overhead_watts", e.chassis_overhead_watts},
               {"baseline_drive_count", e.baseline_drive_count}};
}

inline ojson to_json(const EpochReport& r) {
  ojson batches = ojson::object();
  for (const auto& [id, b] : r.batch_sizes) batches[id] = b;
  ojson speed = ojson::object();
  for (const auto& [id, v] : r.per_node_effective_speed) speed[id] = v;
  ojson stall = ojson::object();
  for (const auto& [id, v] : r.stall_seconds_per_step) stall[id] = v;
  return ojson{{"config", {{"network", r.network}, {"n_csds", r.n_csds}, {"node_count", r.batch_sizes.size()},
                           {"batch_sizes", batches}}},
               {"epoch_steps", r.epoch_steps},
               {"round_time_sec", r.round_time_sec},
               {"sync_time_sec", r.sync_time_sec},
               {"epoch_time_sec", r.epoch_time_sec},
               {"img_per_sec", r.images_per_second_aggregate},
               {"host_plateau_img_per_sec", r.host_plateau_images_per_second},
               {"speedup_vs_host", r.speedup_vs_host},
               {"per_node_effective_speed", speed},
               {"stall_seconds_per_step", stall},
               {"total_watts", r.total_watts},
               {"baseline_watts", r.baseline_watts},
               {"energy_per_image_joules", r.energy_per_image_joules},
               {"flops_per_watt", r.flops_per_watt},
               {"energy_saving_vs_baseline", r.energy_saving_vs_baseline}};
}

inline constexpr std::string_view kSweepCsvHeader = "network,n_csds,img_per_sec,speedup,j_per_img,saving_pct,flops_per_watt,csd_img_per_sec";

// Mean effective speed of the CSDs in a report, 0 without CSDs.
inline double mean_csd_speed(const EpochReport& r, const ClusterSpec& cluster) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [id, v] : r.per_node_effective_speed) {
    if (cluster.node(id).node_class == NodeClass::kCsd) {
      sum += v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

inline std::string sweep_csv_row(const EpochReport& r, const ClusterSpec& cluster) {
  return fmt::format("{},{},{},{},{},{},{},{}\n", r.network, r.n_csds, r.images_per_second_aggregate,
                     r.speedup_vs_host, r.energy_per_image_joules, 100.0 * r.energy_saving_vs_baseline,
                     r.flops_per_watt, mean_csd_speed(r, cluster));
}

struct SweepRow {
  std::string network;
  std::size_t n_csds = 0;
  double img_per_sec = 0.0;
  double speedup = 0.0;
  double j_per_img = 0.0;
  double saving_pct = 0.0;
  double flops_per_watt = 0.0;
  double csd_img_per_sec = 0.0;
  std::string raw;  // original line, for pass-through output
};

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text, const std::string& source) {
  std::vector<SweepRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const std::string where = fmt::format("{}:{}", source, line_no);
    if (!header) {
      if (t != kSweepCsvHeader) throw Error(ErrorCode::kParse, "not a sweep CSV (header mismatch)", where);
      header = true;
      continue;
    }
    const auto f = detail::split(t, ',');
    if (f.size() != 8) throw Error(ErrorCode::kParse, "sweep rows have 8 fields", where);
    SweepRow r;
    r.network = f[0];
    const long long n = detail::parse_integer(f[1], where);
    if (n < 0) throw Error(ErrorCode::kParse, "n_csds must be >= 0", where);
    r.n_csds = static_cast<std::size_t>(n);
    r.img_per_sec = detail::parse_real(f[2], where);
    r.speedup = detail::parse_real(f[3], where);
    r.j_per_img = detail::parse_real(f[4], where);
    r.saving_pct = detail::parse_real(f[5], where);
    r.flops_per_watt = detail::parse_real(f[6], where);
    r.csd_img_per_sec = detail::parse_real(f[7], where);
    r.raw = t;
    rows.push_back(std::move(r));
  }
  if (!header) throw Error(ErrorCode::kParse, "empty sweep CSV", source);
  return rows;
}

// ---------------------------------------------------------------------------
// Calibration

inline ojson to_json(const CalibrationResult& r) {
  ojson params = ojson::object();
  for (const auto& [k, v] : r.params) params[k] = v;
  ojson residuals = ojson::array();
  for (const auto& res : r.residuals) {
    residuals.push_back(ojson{{"network", res.target.network},
                              {"n_csds", res.target.n_csds},
                              {"metric", std::string(to_string(res.target.metric))},
                              {"target", res.target.value},
                              {"simulated", res.simulated},
                              {"relative_residual", res.relative}});
  }
  return ojson{{"params", params},
               {"residuals", residuals},
               {"max_abs_relative_residual", r.max_abs_relative_residual},
               {"above_ceiling", r.above_ceiling},
               {"sweeps", r.sweeps},
               {"objective", r.objective}};
}

inline CalibrationTarget target_from_json(const ojson& j) {
  return with_schema("calibration target", [&] {
    CalibrationTarget t;
    t.network = j.at("network").get<std::string>();
    t.n_csds = j.at("n_csds").get<std::size_t>();
    t.metric = metric_from_string(j.at("metric").get<std::string>());
    t.value = j.at("value").get<double>();
    return t;
  });
}

/// Accepts either {"stages": [...]} or a single stage object; each stage is
/// {name?, free: [...], targets: [...]}.
inline std::vector<CalibrationStage> stages_from_json(const ojson& j) {
  return with_schema("calibration targets", [&] {
    std::vector<CalibrationStage> out;
    const ojson list = j.contains("stages") ? j.at("stages") : ojson::array({j});
    for (const auto& st : list) {
      CalibrationStage stage;
      stage.name = st.value("name", fmt::format("stage{}", out.size()));
      stage.free_params = st.at("free").get<std::vector<std::string>>();
      for (const auto& t : st.at("targets")) stage.targets.push_back(target_from_json(t));
      out.push_back(std::move(stage));
    }
    if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "no calibration stages", "stages");
    return out;
  });
}

/// Applies the "params" object of a calibration file to `params`.
inline void apply_calibration(const ojson& calibration, SimParams& params) {
  with_schema("calibration file", [&] {
    for (const auto& [k, v] : calibration.at("params").items()) find_model_param(k).ref(params) = v.get<double>();
    return 0;
  });
}

// ---------------------------------------------------------------------------
// Benchmarks

inline ojson to_json(const std::vector<BenchmarkRecord>& records) {
  ojson out = ojson::array();
  for (const auto& r : records) {
    out.push_back(ojson{{"node_id", r.node_id},
                        {"network", r.network},
                        {"batch_size", r.batch_size},
                        {"images_per_sec", r.images_per_second}});
  }
  return out;
}

}  // namespace stannis::io
