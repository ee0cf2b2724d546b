#pragma once

#include <map>
#include <string>

#include "stannis/io.hpp"
#include "stannis/profiles.hpp"

namespace stannis::test {

inline std::string data_path(const std::string& rel) { return std::string(STANNIS_DATA_DIR) + "/" + rel; }

inline const std::vector<std::string>& network_names() {
  static const std::vector<std::string> names{"inceptionv3", "mobilenetv2", "nasnet", "squeezenet"};
  return names;
}

inline NetworkDescriptor network(const std::string& name) {
  return io::network_from_json(io::load_json(data_path("networks/" + name + ".json")));
}

inline std::map<std::string, NetworkDescriptor> all_networks() {
  std::map<std::string, NetworkDescriptor> out;
  for (const auto& n : network_names()) out[n] = network(n);
  return out;
}

// Base cluster with the shipped benchmark records fitted in.
inline ClusterSpec shipped_cluster() {
  ClusterSpec c = io::cluster_from_json(io::load_json(data_path("cluster_base.json")));
  apply_benchmarks(c, load_benchmark(data_path("benchmarks.csv"), BenchmarkFormat::kCsv));
  return c;
}

}  // namespace stannis::test
