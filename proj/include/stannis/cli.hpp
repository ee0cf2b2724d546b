#pragma once

// Command-line front end. `run` takes the argument vector (without argv[0])
// and two streams, so tests drive it in-process.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "stannis/error.hpp"
#include "stannis/io.hpp"
#include "stannis/minitrain.hpp"
#include "stannis/partitioner.hpp"
#include "stannis/profiles.hpp"
#include "stannis/simengine.hpp"
#include "stannis/tuner.hpp"
#include "stannis/verify.hpp"

namespace stannis::cli {

using io::ojson;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitUnknownSubcommand = 64;
inline constexpr int kExitInputIo = 66;
inline constexpr int kExitOutputIo = 73;

inline constexpr std::string_view kToolVersion = "1.0.0";

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"bench-import", "tune",      "partition",    "simulate",
                                                 "sweep",        "calibrate", "verify-train", "report"};
  return names;
}

// Raised for failures writing artifacts; input failures use Error(kIo).
class OutputError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Override namespace

struct Settings {
  SimParams sim;
  minitrain::ParityConfig train;
  CalibrationOptions calibration;
  std::uint64_t seed = 2020;
};

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(Settings&, const std::string&)> set;
  std::function<ojson(const Settings&)> get;
};

namespace detail {

inline double to_real(const std::string& v, const std::string& key) {
  double x = 0.0;
  try {
    std::size_t used = 0;
    x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("'{}' expects a number, got '{}'", key, v), key);
  }
  if (!std::isfinite(x)) throw Error(ErrorCode::kNonFinite, fmt::format("'{}' must be finite", key), key);
  return x;
}

inline long long to_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("'{}' expects an integer, got '{}'", key, v), key);
  }
}

inline long long to_positive(const std::string& v, const std::string& key) {
  const long long x = to_int(v, key);
  if (x < 1) throw Error(ErrorCode::kNonPositive, fmt::format("'{}' must be >= 1", key), key);
  return x;
}

inline long long to_non_negative(const std::string& v, const std::string& key) {
  const long long x = to_int(v, key);
  if (x < 0) throw Error(ErrorCode::kInvalidArgument, fmt::format("'{}' must be >= 0", key), key);
  return x;
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorCode::kInvalidArgument, fmt::format("'{}' expects true or false, got '{}'", key, v), key);
}

inline std::vector<long long> to_int_list(const std::string& v, const std::string& key) {
  std::string s = v;
  if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<long long> out;
  for (const auto& part : stannis::detail::split(s, ',')) out.push_back(to_positive(stannis::detail::trim(part), key));
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, fmt::format("'{}' expects a non-empty list", key), key);
  return out;
}

template <typename T>
std::vector<T> cast_list(const std::vector<long long>& v) {
  return std::vector<T>(v.begin(), v.end());
}

// Renders a config value back into the textual form the setters accept.
inline std::string value_text(const ojson& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) out += (out.empty() ? "" : ",") + e.dump();
    return out;
  }
  return v.dump();
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using detail::to_bool;
  using detail::to_int_list;
  using detail::to_non_negative;
  using detail::to_positive;
  using detail::to_real;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"tuner.C", "update damping of the batch-size search (>= 1)",
                 [](Settings& s, const std::string& v) { s.sim.tune.C = to_real(v, "tuner.C"); },
                 [](const Settings& s) { return ojson(s.sim.tune.C); }});
    k.push_back({"tuner.E", "margin scale, the tolerance band is 1/E (> 1)",
                 [](Settings& s, const std::string& v) { s.sim.tune.E = to_real(v, "tuner.E"); },
                 [](const Settings& s) { return ojson(s.sim.tune.E); }});
    k.push_back({"tuner.max_iterations", "iteration cap per fast node",
                 [](Settings& s, const std::string& v) {
                   s.sim.tune.max_iterations = static_cast<int>(to_positive(v, "tuner.max_iterations"));
                 },
                 [](const Settings& s) { return ojson(s.sim.tune.max_iterations); }});
    k.push_back({"tuner.memory_cap_enforced", "bound batches by node DRAM (true/false)",
                 [](Settings& s, const std::string& v) {
                   s.sim.tune.memory_cap_enforced = to_bool(v, "tuner.memory_cap_enforced");
                 },
                 [](const Settings& s) { return ojson(s.sim.tune.memory_cap_enforced); }});
    k.push_back({"tuner.stop_rule", "lower_edge or upper_edge",
                 [](Settings& s, const std::string& v) {
                   if (v == "lower_edge") {
                     s.sim.tune.stop_rule = StopRule::kLowerEdge;
                   } else if (v == "upper_edge") {
                     s.sim.tune.stop_rule = StopRule::kUpperEdge;
                   } else {
                     throw Error(ErrorCode::kInvalidArgument, "tuner.stop_rule must be lower_edge or upper_edge",
                                 "tuner.stop_rule");
                   }
                 },
                 [](const Settings& s) { return ojson(std::string(to_string(s.sim.tune.stop_rule))); }});
    k.push_back({"tuner.candidate_batches", "comma-separated slow-node batch candidates",
                 [](Settings& s, const std::string& v) {
                   s.sim.tune.candidate_batches = detail::cast_list<int>(to_int_list(v, "tuner.candidate_batches"));
                 },
                 [](const Settings& s) { return ojson(s.sim.tune.candidate_batches); }});
    k.push_back({"memory.state_copies", "copies of the parameters held in DRAM",
                 [](Settings& s, const std::string& v) {
                   s.sim.tune.memory.state_copies =
                       static_cast<std::uint32_t>(to_positive(v, "memory.state_copies"));
                 },
                 [](const Settings& s) { return ojson(s.sim.tune.memory.state_copies); }});
    for (const auto& p : model_params()) {
      const std::string name = p.name;
      const auto ref = p.ref;
      k.push_back({name, fmt::format("model parameter, search range [{}, {}]", p.lo, p.hi),
                   [name, ref](Settings& s, const std::string& v) {
                     const double x = to_real(v, name);
                     if (x < 0.0) throw Error(ErrorCode::kInvalidArgument, name + " must be >= 0", name);
                     ref(s.sim) = x;
                   },
                   [ref](const Settings& s) {
                     Settings copy = s;
                     return ojson(ref(copy.sim));
                   }});
    }
    k.push_back({"energy.baseline_drive_count", "drives in the storage-only baseline server",
                 [](Settings& s, const std::string& v) {
                   s.sim.energy.baseline_drive_count =
                       static_cast<int>(to_non_negative(v, "energy.baseline_drive_count"));
                 },
                 [](const Settings& s) { return ojson(s.sim.energy.baseline_drive_count); }});
    k.push_back({"data.public_total", "public samples in the default dataset",
                 [](Settings& s, const std::string& v) {
                   s.sim.public_total = to_non_negative(v, "data.public_total");
                 },
                 [](const Settings& s) { return ojson(s.sim.public_total); }});
    k.push_back({"data.private_per_csd", "private samples per CSD in the default dataset",
                 [](Settings& s, const std::string& v) {
                   s.sim.private_per_csd = to_non_negative(v, "data.private_per_csd");
                 },
                 [](const Settings& s) { return ojson(s.sim.private_per_csd); }});
    k.push_back({"train.steps", "training steps",
                 [](Settings& s, const std::string& v) {
                   s.train.steps = static_cast<std::size_t>(to_positive(v, "train.steps"));
                 },
                 [](const Settings& s) { return ojson(s.train.steps); }});
    k.push_back({"train.input_dim", "input features of the synthetic task",
                 [](Settings& s, const std::string& v) {
                   s.train.input_dim = static_cast<std::size_t>(to_positive(v, "train.input_dim"));
                 },
                 [](const Settings& s) { return ojson(s.train.input_dim); }});
    k.push_back({"train.hidden", "comma-separated hidden layer widths",
                 [](Settings& s, const std::string& v) {
                   s.train.hidden = detail::cast_list<std::size_t>(to_int_list(v, "train.hidden"));
                 },
                 [](const Settings& s) { return ojson(s.train.hidden); }});
    k.push_back({"train.activation", "relu or tanh",
                 [](Settings& s, const std::string& v) {
                   if (v == "relu") {
                     s.train.activation = minitrain::Activation::kRelu;
                   } else if (v == "tanh") {
                     s.train.activation = minitrain::Activation::kTanh;
                   } else {
                     throw Error(ErrorCode::kInvalidArgument, "train.activation must be relu or tanh",
                                 "train.activation");
                   }
                 },
                 [](const Settings& s) { return ojson(std::string(to_string(s.train.activation))); }});
    k.push_back({"train.separation", "distance between the two class means",
                 [](Settings& s, const std::string& v) { s.train.separation = to_real(v, "train.separation"); },
                 [](const Settings& s) { return ojson(s.train.separation); }});
    k.push_back({"train.worker_batches", "comma-separated per-worker batches; the first worker has no private data",
                 [](Settings& s, const std::string& v) {
                   s.train.worker_batches = detail::cast_list<std::size_t>(to_int_list(v, "train.worker_batches"));
                 },
                 [](const Settings& s) { return ojson(s.train.worker_batches); }});
    k.push_back({"train.public_samples", "public samples in the training pool",
                 [](Settings& s, const std::string& v) {
                   s.train.public_samples = static_cast<std::size_t>(to_non_negative(v, "train.public_samples"));
                 },
                 [](const Settings& s) { return ojson(s.train.public_samples); }});
    k.push_back({"train.private_per_worker", "private samples per worker after the first",
                 [](Settings& s, const std::string& v) {
                   s.train.private_per_worker =
                       static_cast<std::size_t>(to_non_negative(v, "train.private_per_worker"));
                 },
                 [](const Settings& s) { return ojson(s.train.private_per_worker); }});
    k.push_back({"train.holdout_samples", "held-out evaluation samples",
                 [](Settings& s, const std::string& v) {
                   s.train.holdout_samples = static_cast<std::size_t>(to_positive(v, "train.holdout_samples"));
                 },
                 [](const Settings& s) { return ojson(s.train.holdout_samples); }});
    k.push_back({"train.base_lr", "base learning rate",
                 [](Settings& s, const std::string& v) { s.train.schedule.base_lr = to_real(v, "train.base_lr"); },
                 [](const Settings& s) { return ojson(s.train.schedule.base_lr); }});
    k.push_back({"train.scale_factor", "learning-rate multiplier after warmup",
                 [](Settings& s, const std::string& v) {
                   s.train.schedule.scale_factor = to_real(v, "train.scale_factor");
                 },
                 [](const Settings& s) { return ojson(s.train.schedule.scale_factor); }});
    k.push_back({"train.warmup_steps", "linear warmup length",
                 [](Settings& s, const std::string& v) {
                   s.train.schedule.warmup_steps = static_cast<std::size_t>(to_non_negative(v, "train.warmup_steps"));
                 },
                 [](const Settings& s) { return ojson(s.train.schedule.warmup_steps); }});
    k.push_back({"train.lr_mode", "constant, linear_scaled or warmup_then_scaled",
                 [](Settings& s, const std::string& v) {
                   using minitrain::LrMode;
                   for (LrMode m : {LrMode::kConstant, LrMode::kLinearScaled, LrMode::kWarmupThenScaled}) {
                     if (to_string(m) == v) {
                       s.train.schedule.mode = m;
                       return;
                     }
                   }
                   throw Error(ErrorCode::kInvalidArgument, "unknown train.lr_mode '" + v + "'", "train.lr_mode");
                 },
                 [](const Settings& s) { return ojson(std::string(to_string(s.train.schedule.mode))); }});
    k.push_back({"train.averaging", "weighted or uniform gradient averaging",
                 [](Settings& s, const std::string& v) {
                   if (v == "weighted") {
                     s.train.averaging = minitrain::Averaging::kWeighted;
                   } else if (v == "uniform") {
                     s.train.averaging = minitrain::Averaging::kUniform;
                   } else {
                     throw Error(ErrorCode::kInvalidArgument, "train.averaging must be weighted or uniform",
                                 "train.averaging");
                   }
                 },
                 [](const Settings& s) { return ojson(std::string(to_string(s.train.averaging))); }});
    k.push_back({"train.loss_tolerance", "relative final-loss tolerance for the parity check",
                 [](Settings& s, const std::string& v) {
                   s.train.loss_tolerance = to_real(v, "train.loss_tolerance");
                 },
                 [](const Settings& s) { return ojson(s.train.loss_tolerance); }});
    k.push_back({"calibration.max_sweeps", "coordinate-descent sweeps",
                 [](Settings& s, const std::string& v) {
                   s.calibration.max_sweeps = static_cast<int>(to_positive(v, "calibration.max_sweeps"));
                 },
                 [](const Settings& s) { return ojson(s.calibration.max_sweeps); }});
    k.push_back({"calibration.line_search_iterations", "golden-section iterations per coordinate",
                 [](Settings& s, const std::string& v) {
                   s.calibration.line_search_iterations =
                       static_cast<int>(to_positive(v, "calibration.line_search_iterations"));
                 },
                 [](const Settings& s) { return ojson(s.calibration.line_search_iterations); }});
    k.push_back({"calibration.tolerance", "relative objective improvement that ends the search",
                 [](Settings& s, const std::string& v) {
                   s.calibration.tolerance = to_real(v, "calibration.tolerance");
                 },
                 [](const Settings& s) { return ojson(s.calibration.tolerance); }});
    k.push_back({"calibration.residual_ceiling", "largest acceptable relative residual",
                 [](Settings& s, const std::string& v) {
                   s.calibration.residual_ceiling = to_real(v, "calibration.residual_ceiling");
                 },
                 [](const Settings& s) { return ojson(s.calibration.residual_ceiling); }});
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.key == key) return k;
  }
  throw Error(ErrorCode::kUnknownKey, "unknown override key '" + key + "'", key);
}

inline void apply_override(Settings& s, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::kInvalidArgument, "override must look like key=value", assignment);
  }
  find_config_key(assignment.substr(0, eq)).set(s, assignment.substr(eq + 1));
}

inline ojson effective_config(const Settings& s) {
  ojson out = ojson::object();
  for (const auto& k : config_keys()) out[k.key] = k.get(s);
  return out;
}

inline std::string override_help() {
  const Settings defaults;
  std::string out = "Override keys (--set key=value; energy.* and sync.* defaults come from the cluster file):\n";
  for (const auto& k : config_keys()) {
    out += fmt::format("  {:<38} {} [default {}]\n", k.key, k.help, k.get(defaults).dump());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Invocation and manifest

struct InputDoc {
  std::string role;
  std::string path;
  bool is_text = false;
  ojson content;     // JSON inputs, with any embedded manifest removed
  std::string text;  // text inputs
};

struct Invocation {
  std::string subcommand;
  std::vector<InputDoc> inputs;
  ojson options = ojson::object();
  ojson config;  // effective config, filled once settings are final
  std::uint64_t seed = 2020;

  const InputDoc* find(const std::string& role) const {
    for (const auto& d : inputs) {
      if (d.role == role) return &d;
    }
    return nullptr;
  }

  const InputDoc& need(const std::string& role) const {
    if (const auto* d = find(role)) return *d;
    throw Error(ErrorCode::kInvalidArgument, "missing required input --" + role, role);
  }

  std::vector<const InputDoc*> all(const std::string& role) const {
    std::vector<const InputDoc*> out;
    for (const auto& d : inputs) {
      if (d.role == role) out.push_back(&d);
    }
    return out;
  }
};

inline InputDoc load_input(const std::string& role, const std::string& path, bool is_text) {
  InputDoc d;
  d.role = role;
  d.path = path;
  d.is_text = is_text;
  const std::string text = io::read_file(path);
  if (is_text) {
    d.text = text;
  } else {
    d.content = io::parse_json(text, path);
    if (d.content.is_object()) d.content.erase("manifest");
  }
  return d;
}

inline ojson manifest_json(const Invocation& inv) {
  ojson inputs = ojson::array();
  for (const auto& d : inv.inputs) {
    ojson e{{"role", d.role}, {"path", d.path}, {"format", d.is_text ? "text" : "json"}};
    e["content"] = d.is_text ? ojson(d.text) : d.content;
    inputs.push_back(std::move(e));
  }
  return ojson{{"tool", "stannis"},     {"version", std::string(kToolVersion)},
               {"subcommand", inv.subcommand}, {"seed", inv.seed},
               {"options", inv.options}, {"config", inv.config},
               {"inputs", inputs}};
}

/// Rebuilds an invocation from a manifest (or an artifact embedding one).
/// The returned overrides restore the recorded effective config.
inline Invocation invocation_from_manifest(const ojson& doc, std::vector<std::string>& overrides) {
  return io::with_schema("manifest", [&] {
    const ojson& m = doc.contains("manifest") ? doc.at("manifest") : doc;
    if (m.value("tool", std::string{}) != "stannis") {
      throw Error(ErrorCode::kParse, "not a stannis manifest", "manifest");
    }
    Invocation inv;
    inv.subcommand = m.at("subcommand").get<std::string>();
    inv.seed = m.at("seed").get<std::uint64_t>();
    inv.options = m.at("options");
    for (const auto& e : m.at("inputs")) {
      InputDoc d;
      d.role = e.at("role").get<std::string>();
      d.path = e.at("path").get<std::string>();
      d.is_text = e.at("format").get<std::string>() == "text";
      if (d.is_text) {
        d.text = e.at("content").get<std::string>();
      } else {
        d.content = e.at("content");
      }
      inv.inputs.push_back(std::move(d));
    }
    overrides.clear();
    for (const auto& [k, v] : m.at("config").items()) overrides.push_back(k + "=" + detail::value_text(v));
    return inv;
  });
}

// ---------------------------------------------------------------------------
// Output helpers

struct Outputs {
  std::string out = "-";
  std::string ids_csv;    // partition: per-sample manifest
  std::string trace_csv;  // verify-train: training trace
  std::string summary;    // report: summary text
};

inline void emit(const std::string& path, const std::string& content, std::ostream& stdout_stream) {
  if (path == "-") {
    stdout_stream << content;
    return;
  }
  try {
    io::write_file(path, content);
  } catch (const Error& e) {
    throw OutputError(ErrorCode::kIo, e.what(), path);
  }
}

inline std::string sidecar_path(const std::string& path) { return path + ".manifest.json"; }

inline void emit_with_sidecar(const std::string& path, const std::string& content, const Invocation& inv,
                              std::ostream& stdout_stream) {
  emit(path, content, stdout_stream);
  if (path != "-") emit(sidecar_path(path), io::dump(ojson{{"manifest", manifest_json(inv)}}), stdout_stream);
}

inline std::string emit_json(ojson body, const Invocation& inv) {
  body["manifest"] = manifest_json(inv);
  return io::dump(body);
}

// ---------------------------------------------------------------------------
// Subcommands

namespace detail {

inline ClusterSpec cluster_of(const Invocation& inv) { return io::cluster_from_json(inv.need("cluster").content); }

inline std::map<std::string, NetworkDescriptor> networks_of(const Invocation& inv) {
  std::map<std::string, NetworkDescriptor> out;
  for (const auto* d : inv.all("network")) {
    auto n = io::network_from_json(d->content);
    const std::string name = n.name;
    if (!out.emplace(name, std::move(n)).second) {
      throw Error(ErrorCode::kDuplicateKey, "network '" + name + "' given twice", d->path);
    }
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "missing required input --network", "network");
  return out;
}

inline NetworkDescriptor single_network(const Invocation& inv) {
  const auto nets = networks_of(inv);
  if (nets.size() != 1) throw Error(ErrorCode::kInvalidArgument, "exactly one --network expected", "network");
  return nets.begin()->second;
}

// Cluster-derived defaults, then a calibration file, then explicit overrides.
inline Settings settings_for(const Invocation& inv, const std::optional<ClusterSpec>& cluster,
                             const std::vector<std::string>& overrides) {
  Settings s;
  if (cluster) s.sim = SimParams::from_cluster(*cluster);
  if (const auto* cal = inv.find("calibration")) io::apply_calibration(cal->content, s.sim);
  for (const auto& o : overrides) apply_override(s, o);
  s.seed = inv.seed;
  s.train.seed = inv.seed;
  s.calibration.seed = inv.seed;
  s.sim.tune.validate();
  return s;
}

inline std::size_t csd_count_option(const Invocation& inv, const ClusterSpec& cluster) {
  if (!inv.options.contains("n_csds")) return cluster.csds.size();
  const auto n = inv.options.at("n_csds").get<std::size_t>();
  if (n > cluster.csds.size()) {
    throw Error(ErrorCode::kInvalidArgument, fmt::format("cluster has {} CSDs, {} requested", cluster.csds.size(), n),
                "n-csds");
  }
  return n;
}

inline std::vector<std::size_t> parse_count_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& part : stannis::detail::split(text, ',')) {
    out.push_back(static_cast<std::size_t>(to_non_negative(stannis::detail::trim(part), "n-csds")));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "--n-csds needs at least one value", "n-csds");
  return out;
}

}  // namespace detail

inline void cmd_bench_import(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                             std::ostream& out) {
  ClusterSpec cluster = detail::cluster_of(inv);
  const Settings s = detail::settings_for(inv, cluster, overrides);
  inv.config = effective_config(s);
  const auto format = inv.options.at("format").get<std::string>() == "json" ? BenchmarkFormat::kJson
                                                                             : BenchmarkFormat::kCsv;
  const auto& bench = inv.need("bench");
  apply_benchmarks(cluster, parse_benchmark(bench.text, format, bench.path));
  emit(outs.out, emit_json(io::to_json(cluster), inv), out);
}

inline void cmd_tune(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                     std::ostream& out) {
  const ClusterSpec full = detail::cluster_of(inv);
  const ClusterSpec cluster = full.with_csd_count(detail::csd_count_option(inv, full));
  const NetworkDescriptor net = detail::single_network(inv);
  const Settings s = detail::settings_for(inv, cluster, overrides);
  inv.config = effective_config(s);
  const TuneResult tune = tune_cluster(cluster, net, s.sim.tune);
  emit(outs.out, emit_json(io::to_json(tune), inv), out);
}

inline void cmd_partition(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                          std::ostream& out) {
  const TuneResult tune = io::tune_from_json(inv.need("tune").content);
  std::optional<ClusterSpec> cluster;
  if (inv.find("cluster")) cluster = detail::cluster_of(inv);
  const Settings s = detail::settings_for(inv, cluster, overrides);
  inv.config = effective_config(s);
  DatasetSpec data;
  if (const auto* d = inv.find("dataset")) {
    data = io::dataset_from_json(d->content);
  } else if (cluster) {
    data.public_total = s.sim.public_total;
    for (const auto& [id, n] : tune.per_node) {
      if (cluster->node(id).node_class == NodeClass::kCsd) data.private_per_node[id] = s.sim.private_per_csd;
    }
  } else {
    throw Error(ErrorCode::kInvalidArgument, "partition needs --dataset or --cluster", "dataset");
  }
  const PartitionPlan plan = balance_epoch(tune, data);
  const auto violations = validate_plan(plan, tune, data);
  if (!violations.empty()) {
    throw Error(ErrorCode::kInconsistent, "plan failed validation: " + violations.front().message,
                violations.front().node_id);
  }
  ojson body = io::to_json(plan);
  body["dataset"] = io::to_json(data);
  emit(outs.out, emit_json(body, inv), out);
  if (!outs.ids_csv.empty()) emit_with_sidecar(outs.ids_csv, manifest_csv(plan), inv, out);
}

inline void cmd_simulate(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                         std::ostream& out) {
  const ClusterSpec full = detail::cluster_of(inv);
  const NetworkDescriptor net = detail::single_network(inv);
  EpochReport report;
  if (inv.find("tune") || inv.find("plan")) {
    const TuneResult tune = io::tune_from_json(inv.need("tune").content);
    const PartitionPlan plan = io::plan_from_json(inv.need("plan").content);
    std::size_t n_csds = 0;
    for (const auto& [id, t] : tune.per_node) {
      if (full.node(id).node_class == NodeClass::kCsd) ++n_csds;
    }
    inv.options["n_csds"] = n_csds;
    const Settings s = detail::settings_for(inv, full, overrides);
    inv.config = effective_config(s);
    report = simulate_epoch(full, net, tune, plan, s.sim.sync, s.sim.energy);
  } else {
    const std::size_t n = detail::csd_count_option(inv, full);
    inv.options["n_csds"] = n;
    const Settings s = detail::settings_for(inv, full, overrides);
    inv.config = effective_config(s);
    report = run_configuration(full, net, n, s.sim);
  }
  emit(outs.out, emit_json(io::to_json(report), inv), out);
}

inline void cmd_sweep(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                      std::ostream& out) {
  const ClusterSpec cluster = detail::cluster_of(inv);
  const auto nets = detail::networks_of(inv);
  const auto counts = detail::parse_count_list(inv.options.at("n_csds").get<std::string>());
  const Settings s = detail::settings_for(inv, cluster, overrides);
  inv.config = effective_config(s);
  std::string csv = std::string(io::kSweepCsvHeader) + "\n";
  for (const auto& [name, net] : nets) {
    for (const auto& [n, report] : speedup_curve(cluster, net, counts, s.sim)) csv += io::sweep_csv_row(report, cluster);
  }
  emit_with_sidecar(outs.out, csv, inv, out);
}

inline void cmd_calibrate(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                          std::ostream& out) {
  const ClusterSpec cluster = detail::cluster_of(inv);
  const auto nets = detail::networks_of(inv);
  Settings s = detail::settings_for(inv, cluster, overrides);
  inv.config = effective_config(s);

  const auto stages = io::stages_from_json(inv.need("targets").content);

  ojson params = ojson::object();
  ojson stage_reports = ojson::array();
  ojson all_residuals = ojson::array();
  double worst = 0.0;
  bool above = false;
  const auto results = calibrate_stages(cluster, nets, stages, s.sim, s.calibration);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const CalibrationResult& r = results[i];
    ojson j = io::to_json(r);
    j["name"] = stages[i].name;
    for (const auto& [k, v] : r.params) params[k] = v;
    for (const auto& res : j.at("residuals")) all_residuals.push_back(res);
    worst = std::max(worst, r.max_abs_relative_residual);
    above = above || r.above_ceiling;
    stage_reports.push_back(std::move(j));
  }
  ojson body{{"params", params},
             {"residuals", all_residuals},
             {"max_abs_relative_residual", worst},
             {"above_ceiling", above},
             {"seed", s.seed},
             {"stages", stage_reports}};
  emit(outs.out, emit_json(body, inv), out);
}

inline ojson parity_json(const minitrain::ParityOutcome& o, double tolerance) {
  return ojson{{"distributed_loss", o.distributed_loss},
               {"single_loss", o.single_loss},
               {"relative_loss_difference", o.relative_loss_difference},
               {"distributed_accuracy", o.distributed_accuracy},
               {"single_accuracy", o.single_accuracy},
               {"loss_within_tolerance", o.relative_loss_difference <= tolerance},
               {"accuracy_equal", o.distributed_accuracy == o.single_accuracy}};
}

inline void cmd_verify_train(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                             std::ostream& out) {
  const Settings s = detail::settings_for(inv, std::nullopt, overrides);
  inv.config = effective_config(s);
  const auto primary = minitrain::run_parity(s.train);
  minitrain::ParityConfig other = s.train;
  other.averaging = s.train.averaging == minitrain::Averaging::kWeighted ? minitrain::Averaging::kUniform
                                                                           : minitrain::Averaging::kWeighted;
  const auto contrast = minitrain::run_parity(other);
  ojson body{{"total_batch", s.train.total_batch()},
             {"steps", s.train.steps},
             {std::string(to_string(s.train.averaging)), parity_json(primary, s.train.loss_tolerance)},
             {std::string(to_string(other.averaging)), parity_json(contrast, s.train.loss_tolerance)}};
  emit(outs.out, emit_json(body, inv), out);
  if (!outs.trace_csv.empty()) emit_with_sidecar(outs.trace_csv, minitrain::trace_csv(primary.distributed.trace), inv, out);
}

struct NetworkSummary {
  std::string network;
  double max_speedup = 0.0;
  std::size_t max_speedup_at = 0;
  double max_saving_pct = 0.0;
  std::size_t max_saving_at = 0;
  std::optional<std::size_t> convergence_at;
};

// Convergence point: the smallest CSD count from which the mean per-CSD
// effective speed changes by less than `threshold` per added CSD at every
// later sweep step.
inline std::optional<std::size_t> convergence_node_count(const std::vector<io::SweepRow>& rows,
                                                         double threshold = 0.01) {
  std::optional<std::size_t> at;
  for (std::size_t i = rows.size(); i-- > 1;) {
    const auto& a = rows[i - 1];
    const auto& b = rows[i];
    if (a.n_csds == 0 || b.n_csds == a.n_csds || a.csd_img_per_sec <= 0.0) break;
    const double per_csd = std::abs(b.csd_img_per_sec - a.csd_img_per_sec) / a.csd_img_per_sec /
                           static_cast<double>(b.n_csds - a.n_csds);
    if (per_csd >= threshold) break;
    at = a.n_csds;
  }
  return at;
}

inline std::vector<NetworkSummary> summarize(const std::vector<io::SweepRow>& sorted_rows) {
  std::vector<NetworkSummary> out;
  std::size_t i = 0;
  while (i < sorted_rows.size()) {
    std::size_t j = i;
    while (j < sorted_rows.size() && sorted_rows[j].network == sorted_rows[i].network) ++j;
    const std::vector<io::SweepRow> group(sorted_rows.begin() + static_cast<std::ptrdiff_t>(i),
                                          sorted_rows.begin() + static_cast<std::ptrdiff_t>(j));
    NetworkSummary s;
    s.network = group.front().network;
    s.max_speedup = -1.0;
    s.max_saving_pct = -1e300;
    for (const auto& r : group) {
      if (r.speedup > s.max_speedup) {
        s.max_speedup = r.speedup;
        s.max_speedup_at = r.n_csds;
      }
      if (r.saving_pct > s.max_saving_pct) {
        s.max_saving_pct = r.saving_pct;
        s.max_saving_at = r.n_csds;
      }
    }
    s.convergence_at = convergence_node_count(group);
    out.push_back(std::move(s));
    i = j;
  }
  return out;
}

inline std::string summary_text(const std::vector<NetworkSummary>& summaries) {
  std::string out;
  for (const auto& s : summaries) {
    out += fmt::format("{}: max speedup {:.1f}x at N={}, max saving {:.0f}% at N={}, convergence {}\n", s.network,
                       s.max_speedup, s.max_speedup_at, s.max_saving_pct, s.max_saving_at,
                       s.convergence_at ? fmt::format("at N={}", *s.convergence_at) : std::string("not reached"));
  }
  return out;
}

inline void cmd_report(Invocation& inv, const std::vector<std::string>& overrides, const Outputs& outs,
                       std::ostream& out) {
  const Settings s = detail::settings_for(inv, std::nullopt, overrides);
  inv.config = effective_config(s);
  std::vector<io::SweepRow> rows;
  for (const auto* d : inv.all("in")) {
    auto part = io::parse_sweep_csv(d->text, d->path);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  if (rows.empty()) throw Error(ErrorCode::kInvalidArgument, "report needs at least one --in sweep", "in");
  std::stable_sort(rows.begin(), rows.end(), [](const io::SweepRow& a, const io::SweepRow& b) {
    return std::tie(a.network, a.n_csds) < std::tie(b.network, b.n_csds);
  });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].network == rows[i - 1].network && rows[i].n_csds == rows[i - 1].n_csds) {
      throw Error(ErrorCode::kDuplicateKey,
                  fmt::format("duplicate sweep row for {} at N={}", rows[i].network, rows[i].n_csds), rows[i].network);
    }
  }
  std::string csv = std::string(io::kSweepCsvHeader) + "\n";
  for (const auto& r : rows) csv += r.raw + "\n";
  const std::string text = summary_text(summarize(rows));
  if (outs.out == "-") {
    out << csv;
  } else {
    emit_with_sidecar(outs.out, csv, inv, out);
    out << text;
  }
  if (!outs.summary.empty()) emit(outs.summary, text, out);
}

// ---------------------------------------------------------------------------
// Entry point

inline void write_error(std::ostream& err, const Error& e) {
  ojson j{{"code", std::string(to_string(e.code()))}, {"message", std::string(e.what())}};
  if (!e.location().empty()) j["location"] = e.location();
  err << j.dump() << "\n";
}

inline void write_error(std::ostream& err, std::string_view code, const std::string& message) {
  err << ojson{{"code", code}, {"message", message}}.dump() << "\n";
}

inline int exit_code_for(const Error& e) { return e.code() == ErrorCode::kIo ? kExitInputIo : kExitValidation; }

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (!args.empty() && args.front().rfind("-", 0) != 0) {
    const auto& names = subcommands();
    if (std::find(names.begin(), names.end(), args.front()) == names.end()) {
      write_error(err, "unknown_subcommand", "unknown subcommand '" + args.front() + "'");
      return kExitUnknownSubcommand;
    }
  }

  CLI::App app{"Batch tuning, privacy-aware partitioning and simulation for host + computational-storage training",
               "stannis"};
  app.footer(override_help());
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::vector<std::string> overrides;
  std::string replay;
  std::optional<std::uint64_t> seed;
  Outputs outs;
  std::string cluster_path, bench_path, tune_path, plan_path, dataset_path, calibration_path, targets_path;
  std::vector<std::string> network_paths, in_paths;
  std::string format = "auto";
  std::optional<std::size_t> n_csds;
  std::string n_csds_list;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--set", overrides, "override a config key (key=value), repeatable");
    sub->add_option("--seed", seed, "seed for every random stream");
    sub->add_option("--replay", replay, "rerun from the manifest embedded in an artifact or sidecar");
    sub->add_option("-o,--out", outs.out, "output path, '-' for standard output");
    sub->footer(override_help());
  };

  auto* bench = app.add_subcommand("bench-import", "fit throughput curves from benchmark records into a cluster file");
  bench->add_option("--cluster", cluster_path, "cluster file to extend");
  bench->add_option("--bench", bench_path, "benchmark records (CSV or JSON)");
  bench->add_option("--format", format, "csv, json or auto (by extension)")
      ->check(CLI::IsMember({"auto", "csv", "json"}));
  common(bench);

  auto* tune = app.add_subcommand("tune", "choose per-node batch sizes");
  tune->add_option("--cluster", cluster_path, "cluster file");
  tune->add_option("--network", network_paths, "network descriptor");
  tune->add_option("--n-csds", n_csds, "use the host and the first N CSDs");
  common(tune);

  auto* part = app.add_subcommand("partition", "assign dataset ranges to nodes for one epoch");
  part->add_option("--tune", tune_path, "tune result");
  part->add_option("--dataset", dataset_path, "dataset description");
  part->add_option("--cluster", cluster_path, "cluster file, used for the default dataset");
  part->add_option("--ids-csv", outs.ids_csv, "also write the per-sample manifest CSV");
  common(part);

  auto* sim = app.add_subcommand("simulate", "simulate one training configuration");
  sim->add_option("--cluster", cluster_path, "cluster file");
  sim->add_option("--network", network_paths, "network descriptor");
  sim->add_option("--tune", tune_path, "tune result (with --plan)");
  sim->add_option("--plan", plan_path, "partition plan (with --tune)");
  sim->add_option("--n-csds", n_csds, "tune and partition internally for the host and N CSDs");
  sim->add_option("--calibration", calibration_path, "calibration file to apply");
  common(sim);

  auto* sweep = app.add_subcommand("sweep", "simulate a range of CSD counts");
  sweep->add_option("--cluster", cluster_path, "cluster file");
  sweep->add_option("--network", network_paths, "network descriptor, repeatable");
  sweep->add_option("--n-csds", n_csds_list, "comma-separated CSD counts");
  sweep->add_option("--calibration", calibration_path, "calibration file to apply");
  common(sweep);

  auto* cal = app.add_subcommand("calibrate", "fit model parameters to observed metrics");
  cal->add_option("--cluster", cluster_path, "cluster file");
  cal->add_option("--network", network_paths, "network descriptor, repeatable");
  cal->add_option("--targets", targets_path, "calibration targets");
  common(cal);

  auto* vt = app.add_subcommand("verify-train", "distributed vs single-worker training parity on a synthetic task");
  vt->add_option("--trace", outs.trace_csv, "also write the distributed training trace CSV");
  common(vt);

  auto* rep = app.add_subcommand("report", "merge sweep CSVs and summarize them");
  rep->add_option("--in", in_paths, "sweep CSV, repeatable");
  rep->add_option("--summary", outs.summary, "also write the summary text here");
  common(rep);

  std::vector<const char*> argv{"stannis"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    write_error(err, "invalid_argument", e.what());
    return kExitValidation;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    for (const auto& o : overrides) {
      Settings probe;
      apply_override(probe, o);  // reject unknown keys before touching any input
    }

    Invocation inv;
    if (!replay.empty()) {
      std::vector<std::string> recorded;
      inv = invocation_from_manifest(io::load_json(replay), recorded);
      if (inv.subcommand != sub) {
        throw Error(ErrorCode::kInvalidArgument,
                    fmt::format("manifest records '{}', not '{}'", inv.subcommand, sub), replay);
      }
      // Recorded config first, explicit overrides on top.
      recorded.insert(recorded.end(), overrides.begin(), overrides.end());
      overrides = std::move(recorded);
      if (seed) inv.seed = *seed;
    } else {
      inv.subcommand = sub;
      inv.seed = seed.value_or(Settings{}.seed);
      if (!cluster_path.empty()) inv.inputs.push_back(load_input("cluster", cluster_path, false));
      if (!bench_path.empty()) inv.inputs.push_back(load_input("bench", bench_path, true));
      for (const auto& p : network_paths) inv.inputs.push_back(load_input("network", p, false));
      if (!tune_path.empty()) inv.inputs.push_back(load_input("tune", tune_path, false));
      if (!plan_path.empty()) inv.inputs.push_back(load_input("plan", plan_path, false));
      if (!dataset_path.empty()) inv.inputs.push_back(load_input("dataset", dataset_path, false));
      if (!calibration_path.empty()) inv.inputs.push_back(load_input("calibration", calibration_path, false));
      if (!targets_path.empty()) inv.inputs.push_back(load_input("targets", targets_path, false));
      for (const auto& p : in_paths) inv.inputs.push_back(load_input("in", p, true));
      if (sub == "bench-import") {
        std::string f = format;
        if (f == "auto") f = bench_path.size() >= 5 && bench_path.ends_with(".json") ? "json" : "csv";
        inv.options["format"] = f;
      }
      if (n_csds) inv.options["n_csds"] = *n_csds;
      if (sub == "sweep") {
        if (n_csds_list.empty()) throw Error(ErrorCode::kInvalidArgument, "sweep needs --n-csds", "n-csds");
        std::string canonical;
        for (auto n : detail::parse_count_list(n_csds_list)) canonical += (canonical.empty() ? "" : ",") + std::to_string(n);
        inv.options["n_csds"] = canonical;
      }
    }

    if (sub == "bench-import") {
      cmd_bench_import(inv, overrides, outs, out);
    } else if (sub == "tune") {
      cmd_tune(inv, overrides, outs, out);
    } else if (sub == "partition") {
      cmd_partition(inv, overrides, outs, out);
    } else if (sub == "simulate") {
      cmd_simulate(inv, overrides, outs, out);
    } else if (sub == "sweep") {
      cmd_sweep(inv, overrides, outs, out);
    } else if (sub == "calibrate") {
      cmd_calibrate(inv, overrides, outs, out);
    } else if (sub == "verify-train") {
      cmd_verify_train(inv, overrides, outs, out);
    } else {
      cmd_report(inv, overrides, outs, out);
    }
  } catch (const OutputError& e) {
    write_error(err, e);
    return kExitOutputIo;
  } catch (const Error& e) {
    write_error(err, e);
    return exit_code_for(e);
  } catch (const nlohmann::json::exception& e) {
    write_error(err, "parse", e.what());
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace stannis::cli
