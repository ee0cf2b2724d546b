#pragma once

// Per-node benchmark data and the throughput curves fitted to it. Every
// other module queries node speed through ThroughputCurve.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "stannis/error.hpp"

namespace stannis {

struct NetworkDescriptor {
  std::string name;
  std::uint64_t param_count = 0;
  std::uint64_t flop_count = 0;  // per sample, forward
  std::uint64_t mac_count = 0;   // per sample
  std::uint32_t bytes_per_param = 4;
  std::uint64_t activation_bytes_per_sample = 0;

  void validate() const {
    if (param_count == 0 || flop_count == 0 || mac_count == 0) {
      throw Error(ErrorCode::kNonPositive,
                  "network '" + name + "': param, flop and mac counts must be positive");
    }
    if (bytes_per_param != 2 && bytes_per_param != 4 && bytes_per_param != 8) {
      throw Error(ErrorCode::kInvalidArgument,
                  "network '" + name + "': bytes_per_param must be 2, 4 or 8");
    }
  }
};

struct CurveSample {
  int batch_size = 0;
  double images_per_second = 0.0;

  friend bool operator==(const CurveSample&, const CurveSample&) = default;
};

// Relative distance from the plateau under which a sample counts as saturated.
inline constexpr double kSaturationTolerance = 0.02;

/// Saturating, non-decreasing model of images/second as a function of batch
/// size. Built from benchmark samples by isotonic regression; evaluated by
/// piecewise-linear interpolation, linear-through-origin below the smallest
/// sample and constant above the saturation batch.
class ThroughputCurve {
 public:
  ThroughputCurve() = default;

  double throughput_at(int batch) const {
    if (batch < 1) {
      throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
    }
    const auto& first = knots_.front();
    if (batch < first.batch_size) {
      return first.images_per_second * batch / first.batch_size;
    }
    if (batch >= knots_.back().batch_size) return knots_.back().images_per_second;
    auto hi = std::lower_bound(
        knots_.begin(), knots_.end(), batch,
        [](const CurveSample& k, int b) { return k.batch_size < b; });
    if (hi->batch_size == batch) return hi->images_per_second;
    auto lo = std::prev(hi);
    const double t = static_cast<double>(batch - lo->batch_size) /
                     static_cast<double>(hi->batch_size - lo->batch_size);
    return lo->images_per_second + (hi->images_per_second - lo->images_per_second) * t;
  }

  double step_time(int batch) const { return batch / throughput_at(batch); }

  double saturation_throughput() const { return knots_.back().images_per_second; }
  int saturation_batch() const { return saturation_batch_; }

  // Raw benchmark points, sorted by batch size.
  const std::vector<CurveSample>& samples() const { return samples_; }
  // Fitted values at the distinct sampled batch sizes.
  const std::vector<CurveSample>& knots() const { return knots_; }

  friend ThroughputCurve fit_curve(std::vector<CurveSample> records);

 private:
  std::vector<CurveSample> samples_;
  std::vector<CurveSample> knots_;
  int saturation_batch_ = 0;
};

namespace detail {

// Pool-adjacent-violators for a non-decreasing fit with per-point weights.
inline std::vector<double> isotonic_non_decreasing(const std::vector<double>& y,
                                                   const std::vector<double>& w) {
  struct Block {
    double mean;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    blocks.push_back({y[i], w[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
      Block top = blocks.back();
      blocks.pop_back();
      Block& prev = blocks.back();
      const double weight = prev.weight + top.weight;
      prev.mean = (prev.mean * prev.weight + top.mean * top.weight) / weight;
      prev.weight = weight;
      prev.count += top.count;
    }
  }
  std::vector<double> out;
  out.reserve(y.size());
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.mean);
  return out;
}

}  // namespace detail

inline ThroughputCurve fit_curve(std::vector<CurveSample> records) {
  if (records.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "fit_curve needs at least 2 records");
  }
  for (const auto& r : records) {
    if (r.batch_size < 1 || !(r.images_per_second > 0.0) ||
        !std::isfinite(r.images_per_second)) {
      throw Error(ErrorCode::kNonPositive, "fit_curve: batch sizes and throughputs must be positive");
    }
  }
  std::stable_sort(records.begin(), records.end(),
                   [](const CurveSample& a, const CurveSample& b) { return a.batch_size < b.batch_size; });

  // Repeated batch sizes collapse into one weighted point.
  std::vector<int> batches;
  std::vector<double> means;
  std::vector<double> weights;
  for (const auto& r : records) {
    if (!batches.empty() && batches.back() == r.batch_size) {
      const double w = weights.back();
      means.back() = (means.back() * w + r.images_per_second) / (w + 1.0);
      weights.back() = w + 1.0;
    } else {
      batches.push_back(r.batch_size);
      means.push_back(r.images_per_second);
      weights.push_back(1.0);
    }
  }
  if (batches.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "fit_curve: all records share one batch size");
  }

  const auto fitted = detail::isotonic_non_decreasing(means, weights);
  const double plateau = fitted.back();

  ThroughputCurve curve;
  curve.samples_ = std::move(records);
  std::size_t sat_index = fitted.size() - 1;
  for (std::size_t i = 0; i < fitted.size(); ++i) {
    if (fitted[i] >= plateau * (1.0 - kSaturationTolerance)) {
      sat_index = i;
      break;
    }
  }
  curve.saturation_batch_ = batches[sat_index];
  curve.knots_.reserve(batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    // Snap the saturated tail onto the plateau so it is exactly flat.
    curve.knots_.push_back({batches[i], i >= sat_index ? plateau : fitted[i]});
  }
  return curve;
}

enum class NodeClass { kHost, kCsd };

inline std::string_view to_string(NodeClass c) { return c == NodeClass::kHost ? "host" : "csd"; }

struct NodeProfile {
  std::string node_id;
  NodeClass node_class = NodeClass::kCsd;
  std::map<std::string, ThroughputCurve> curves;
  std::uint64_t dram_bytes = 0;
  double active_power_watts = 0.0;
  double idle_power_watts = 0.0;

  const ThroughputCurve& curve_for(const std::string& network) const {
    auto it = curves.find(network);
    if (it == curves.end()) {
      throw Error(ErrorCode::kMissingCurve,
                  "node '" + node_id + "' has no throughput curve for '" + network + "'", node_id);
    }
    return it->second;
  }

  void validate() const {
    if (node_id.empty()) throw Error(ErrorCode::kInvalidArgument, "node_id must be non-empty");
    if (dram_bytes == 0) throw Error(ErrorCode::kNonPositive, "dram_bytes must be positive", node_id);
    if (idle_power_watts < 0.0 || active_power_watts < idle_power_watts) {
      throw Error(ErrorCode::kInvalidArgument,
                  "power must satisfy active >= idle >= 0", node_id);
    }
  }
};

struct ClusterSpec {
  NodeProfile host;
  std::vector<NodeProfile> csds;
  double link_bandwidth_bytes_per_sec = 0.0;
  double link_latency_sec = 0.0;
  double baseline_storage_idle_watts = 0.0;
  double chassis_overhead_watts = 0.0;

  std::vector<const NodeProfile*> nodes() const {
    std::vector<const NodeProfile*> out{&host};
    for (const auto& c : csds) out.push_back(&c);
    return out;
  }

  const NodeProfile& node(const std::string& id) const {
    if (host.node_id == id) return host;
    for (const auto& c : csds) {
      if (c.node_id == id) return c;
    }
    throw Error(ErrorCode::kUnknownNode, "no node '" + id + "' in cluster", id);
  }

  // Host plus the first `n` CSDs in declaration order.
  ClusterSpec with_csd_count(std::size_t n) const {
    if (n > csds.size()) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("cluster has {} CSDs, {} requested", csds.size(), n));
    }
    ClusterSpec out = *this;
    out.csds.resize(n);
    return out;
  }

  void validate() const {
    std::set<std::string> ids;
    for (const auto* n : nodes()) {
      n->validate();
      if (!ids.insert(n->node_id).second) {
        throw Error(ErrorCode::kDuplicateKey, "duplicate node_id '" + n->node_id + "'", n->node_id);
      }
    }
    if (!(link_bandwidth_bytes_per_sec > 0.0)) {
      throw Error(ErrorCode::kNonPositive, "link bandwidth must be positive");
    }
    if (link_latency_sec < 0.0) throw Error(ErrorCode::kInvalidArgument, "link latency must be >= 0");
  }
};

// Bytes of model state held per copy of the parameters: weights, gradients
// and optimizer state by default.
struct MemoryModel {
  std::uint64_t state_copies = 3;
};

inline int max_batch_for_memory(const NodeProfile& node, const NetworkDescriptor& net,
                                const MemoryModel& memory = {}) {
  const std::uint64_t model_bytes = memory.state_copies * net.param_count * net.bytes_per_param;
  if (model_bytes > node.dram_bytes) {
    throw Error(ErrorCode::kModelDoesNotFit,
                fmt::format("model state of {} bytes exceeds {} bytes of DRAM", model_bytes,
                            node.dram_bytes),
                node.node_id);
  }
  if (net.activation_bytes_per_sample == 0) return std::numeric_limits<int>::max();
  const std::uint64_t fit = (node.dram_bytes - model_bytes) / net.activation_bytes_per_sample;
  if (fit < 1) {
    throw Error(ErrorCode::kNoSampleFits, "model fits but not a single sample", node.node_id);
  }
  return static_cast<int>(std::min<std::uint64_t>(fit, std::numeric_limits<int>::max()));
}

// ---------------------------------------------------------------------------
// Benchmark records

struct BenchmarkRecord {
  std::string node_id;
  std::string network;
  int batch_size = 0;
  double images_per_second = 0.0;

  friend bool operator==(const BenchmarkRecord&, const BenchmarkRecord&) = default;
};

enum class BenchmarkFormat { kCsv, kJson };

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline long long parse_integer(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kParse, "expected an integer, got '" + text + "'", where);
  }
  if (used != text.size()) throw Error(ErrorCode::kParse, "expected an integer, got '" + text + "'", where);
  return v;
}

inline double parse_real(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kParse, "expected a number, got '" + text + "'", where);
  }
  if (used != text.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::kParse, "expected a finite number, got '" + text + "'", where);
  }
  return v;
}

inline void check_record(const BenchmarkRecord& r, const std::string& where,
                         std::set<std::tuple<std::string, std::string, int>>& seen) {
  if (r.node_id.empty() || r.network.empty()) {
    throw Error(ErrorCode::kParse, "node_id and network must be non-empty", where);
  }
  if (r.batch_size <= 0 || !(r.images_per_second > 0.0)) {
    throw Error(ErrorCode::kNonPositive, "batch_size and images_per_sec must be positive", where);
  }
  if (!seen.emplace(r.node_id, r.network, r.batch_size).second) {
    throw Error(ErrorCode::kDuplicateKey,
                fmt::format("duplicate record ({}, {}, {})", r.node_id, r.network, r.batch_size),
                where);
  }
}

}  // namespace detail

inline constexpr std::string_view kBenchmarkCsvHeader = "node_id,network,batch_size,images_per_sec";

/// Parses benchmark records from text. CSV input must start with the
/// standard header (after any `#` comment lines). Records keep file order.
inline std::vector<BenchmarkRecord> parse_benchmark(const std::string& text, BenchmarkFormat format,
                                                    const std::string& source = "<input>") {
  std::vector<BenchmarkRecord> out;
  std::set<std::tuple<std::string, std::string, int>> seen;

  if (format == BenchmarkFormat::kJson) {
    if (detail::trim(text).empty()) return out;
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kParse, e.what(), source);
    }
    if (!doc.is_array()) throw Error(ErrorCode::kParse, "expected a JSON array of records", source);
    for (std::size_t i = 0; i < doc.size(); ++i) {
      const std::string where = fmt::format("{}[{}]", source, i);
      const auto& j = doc[i];
      BenchmarkRecord r;
      try {
        r.node_id = j.at("node_id").get<std::string>();
        r.network = j.at("network").get<std::string>();
        const double batch = j.at("batch_size").get<double>();
        if (batch != std::floor(batch)) throw Error(ErrorCode::kParse, "batch_size must be an integer", where);
        if (batch <= 0) throw Error(ErrorCode::kNonPositive, "batch_size must be positive", where);
        r.batch_size = static_cast<int>(batch);
        r.images_per_second = j.at("images_per_sec").get<double>();
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::kParse, e.what(), where);
      }
      detail::check_record(r, where, seen);
      out.push_back(std::move(r));
    }
    return out;
  }

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const std::string where = fmt::format("{}:{}", source, line_no);
    if (!header_seen) {
      if (t != kBenchmarkCsvHeader) {
        throw Error(ErrorCode::kParse,
                    "expected header '" + std::string(kBenchmarkCsvHeader) + "'", where);
      }
      header_seen = true;
      continue;
    }
    const auto fields = detail::split(t, ',');
    if (fields.size() != 4) {
      throw Error(ErrorCode::kParse, fmt::format("expected 4 fields, got {}", fields.size()), where);
    }
    BenchmarkRecord r;
    r.node_id = fields[0];
    r.network = fields[1];
    const long long batch = detail::parse_integer(fields[2], where);
    if (batch <= 0 || batch > std::numeric_limits<int>::max()) {
      throw Error(ErrorCode::kNonPositive, "batch_size must be a positive integer", where);
    }
    r.batch_size = static_cast<int>(batch);
    r.images_per_second = detail::parse_real(fields[3], where);
    detail::check_record(r, where, seen);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<BenchmarkRecord> load_benchmark(const std::string& path, BenchmarkFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "'", path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_benchmark(buf.str(), format, path);
}

inline std::string serialize_benchmark_csv(const std::vector<BenchmarkRecord>& records) {
  std::string out(kBenchmarkCsvHeader);
  out += '\n';
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{}\n", r.node_id, r.network, r.batch_size, r.images_per_second);
  }
  return out;
}

/// Fits one curve per (node, network) pair present in `records` and installs
/// it on the matching node. Records for nodes absent from the cluster are an
/// error.
inline void apply_benchmarks(ClusterSpec& cluster, const std::vector<BenchmarkRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::vector<CurveSample>> grouped;
  for (const auto& r : records) {
    grouped[{r.node_id, r.network}].push_back({r.batch_size, r.images_per_second});
  }
  for (auto& [key, samples] : grouped) {
    NodeProfile* target = nullptr;
    if (cluster.host.node_id == key.first) target = &cluster.host;
    for (auto& c : cluster.csds) {
      if (c.node_id == key.first) target = &c;
    }
    if (target == nullptr) {
      throw Error(ErrorCode::kUnknownNode, "benchmark references unknown node '" + key.first + "'",
                  key.first);
    }
    target->curves[key.second] = fit_curve(std::move(samples));
  }
}

}  // namespace stannis
