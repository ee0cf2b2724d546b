#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "stannis/profiles.hpp"

using namespace stannis;

namespace {

ThroughputCurve newport_mobilenet() {
  return fit_curve({{8, 2.2}, {16, 3.0}, {25, 3.08}, {32, 3.08}, {64, 3.08}});
}

// Weighted isotonic fit by the max-min formula:
// f_i = max_{j<=i} min_{k>=i} mean(y[j..k]).
std::vector<double> isotonic_oracle(const std::vector<double>& y, const std::vector<double>& w) {
  const std::size_t n = y.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -1e300;
    for (std::size_t j = 0; j <= i; ++j) {
      double worst = 1e300;
      for (std::size_t k = i; k < n; ++k) {
        double s = 0.0, sw = 0.0;
        for (std::size_t t = j; t <= k; ++t) {
          s += w[t] * y[t];
          sw += w[t];
        }
        worst = std::min(worst, s / sw);
      }
      best = std::max(best, worst);
    }
    out[i] = best;
  }
  return out;
}

}  // namespace

TEST(Network, RejectsOddParameterWidth) {
  NetworkDescriptor n{"x", 10, 10, 10, 3, 1};
  EXPECT_THROW(n.validate(), Error);
  n.bytes_per_param = 2;
  EXPECT_NO_THROW(n.validate());
}

TEST(Benchmark, ParsesCsvRow) {
  const auto recs = parse_benchmark("node_id,network,batch_size,images_per_sec\ncsd0,mobilenetv2,25,3.08\n",
                                    BenchmarkFormat::kCsv);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0], (BenchmarkRecord{"csd0", "mobilenetv2", 25, 3.08}));
}

TEST(Benchmark, EmptyInputIsEmpty) {
  EXPECT_TRUE(parse_benchmark("", BenchmarkFormat::kCsv).empty());
  EXPECT_TRUE(parse_benchmark("", BenchmarkFormat::kJson).empty());
}

TEST(Benchmark, ZeroBatchIsNonPositive) {
  try {
    parse_benchmark("node_id,network,batch_size,images_per_sec\ncsd0,mobilenetv2,0,3.08\n", BenchmarkFormat::kCsv,
                    "b.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonPositive);
    EXPECT_EQ(e.location(), "b.csv:2");
  }
}

TEST(Benchmark, DuplicateKeyRejected) {
  const std::string text =
      "# comment\nnode_id,network,batch_size,images_per_sec\nh,m,8,1\nh,m,8,2\n";
  try {
    parse_benchmark(text, BenchmarkFormat::kCsv, "b.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicateKey);
    EXPECT_EQ(e.location(), "b.csv:4");
  }
}

TEST(Benchmark, MissingHeaderAndBadFields) {
  EXPECT_THROW(parse_benchmark("h,m,8,1\n", BenchmarkFormat::kCsv), Error);
  EXPECT_THROW(parse_benchmark("node_id,network,batch_size,images_per_sec\nh,m,8\n", BenchmarkFormat::kCsv), Error);
  EXPECT_THROW(parse_benchmark("node_id,network,batch_size,images_per_sec\nh,m,x,1\n", BenchmarkFormat::kCsv), Error);
  EXPECT_THROW(parse_benchmark("node_id,network,batch_size,images_per_sec\nh,m,8,-1\n", BenchmarkFormat::kCsv),
               Error);
}

TEST(Benchmark, JsonMatchesCsv) {
  const auto csv = parse_benchmark("node_id,network,batch_size,images_per_sec\nh,m,8,1.5\nc,m,16,2\n",
                                   BenchmarkFormat::kCsv);
  const auto json = parse_benchmark(
      R"([{"node_id":"h","network":"m","batch_size":8,"images_per_sec":1.5},
          {"node_id":"c","network":"m","batch_size":16,"images_per_sec":2}])",
      BenchmarkFormat::kJson);
  EXPECT_EQ(csv, json);
  EXPECT_THROW(parse_benchmark(R"([{"node_id":"h","network":"m","batch_size":8.5,"images_per_sec":1}])",
                               BenchmarkFormat::kJson),
               Error);
}

TEST(Benchmark, CsvRoundTrip) {
  const auto recs = load_benchmark(test::data_path("benchmarks.csv"), BenchmarkFormat::kCsv);
  EXPECT_EQ(parse_benchmark(serialize_benchmark_csv(recs), BenchmarkFormat::kCsv), recs);
}

TEST(Benchmark, MissingFileIsIoError) {
  try {
    load_benchmark("/nonexistent/bench.csv", BenchmarkFormat::kCsv);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

TEST(FitCurve, NewportPlateau) {
  const auto c = fit_curve({{16, 3.0}, {25, 3.08}, {32, 3.08}});
  EXPECT_DOUBLE_EQ(c.saturation_throughput(), 3.08);
  EXPECT_EQ(c.saturation_batch(), 25);
}

TEST(FitCurve, ConstantCurve) {
  EXPECT_DOUBLE_EQ(fit_curve({{10, 5.0}, {20, 5.0}}).throughput_at(15), 5.0);
}

TEST(FitCurve, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(fit_curve({{10, 4.0}, {20, 6.0}}).throughput_at(15), 5.0);
}

TEST(FitCurve, Errors) {
  EXPECT_THROW(fit_curve({{10, 4.0}}), Error);
  EXPECT_THROW(fit_curve({{10, 4.0}, {10, 5.0}}), Error);
  EXPECT_THROW(fit_curve({{10, 4.0}, {20, 0.0}}), Error);
  EXPECT_THROW(fit_curve({{0, 4.0}, {20, 1.0}}), Error);
}

TEST(FitCurve, DuplicateBatchesAveraged) {
  const auto c = fit_curve({{10, 2.0}, {10, 4.0}, {20, 6.0}});
  EXPECT_DOUBLE_EQ(c.throughput_at(10), 3.0);
}

TEST(FitCurve, MonotoneRepairOfDip) {
  // 3.1 then 2.9 pools to 3.0.
  const auto c = fit_curve({{8, 2.0}, {16, 3.1}, {32, 2.9}});
  EXPECT_DOUBLE_EQ(c.throughput_at(16), 3.0);
  EXPECT_DOUBLE_EQ(c.throughput_at(32), 3.0);
}

TEST(FitCurve, IsotonicMatchesMaxMinOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> val(0.5, 10.0);
  std::uniform_int_distribution<int> len(2, 9);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = len(rng);
    std::vector<double> y(n), w(n);
    for (int i = 0; i < n; ++i) {
      y[i] = val(rng);
      w[i] = 1.0 + (rng() % 3);
    }
    const auto got = detail::isotonic_non_decreasing(y, w);
    const auto want = isotonic_oracle(y, w);
    for (int i = 0; i < n; ++i) EXPECT_NEAR(got[i], want[i], 1e-12 * want[i]);
  }
}

TEST(FitCurve, RandomCurvesAreMonotoneAndBounded) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> val(0.1, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<CurveSample> s;
    int b = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < 6; ++i) {
      s.push_back({b, val(rng)});
      b += 1 + static_cast<int>(rng() % 40);
    }
    const auto c = fit_curve(s);
    double prev = 0.0;
    for (int x = 1; x <= b + 50; ++x) {
      const double t = c.throughput_at(x);
      ASSERT_GE(t, prev - 1e-12);
      ASSERT_LE(t, c.saturation_throughput() + 1e-12);
      prev = t;
    }
    // The saturation batch reaches the plateau within tolerance.
    EXPECT_GE(c.throughput_at(c.saturation_batch()), c.saturation_throughput() * (1.0 - kSaturationTolerance));
  }
}

TEST(ThroughputAt, NewportPoints) {
  const auto c = newport_mobilenet();
  EXPECT_DOUBLE_EQ(c.throughput_at(25), 3.08);
  EXPECT_DOUBLE_EQ(c.throughput_at(100), 3.08);
  for (const auto& k : c.knots()) EXPECT_DOUBLE_EQ(c.throughput_at(k.batch_size), k.images_per_second);
  // Below the first sample the curve is linear through the origin.
  EXPECT_DOUBLE_EQ(c.throughput_at(4), 1.1);
}

TEST(StepTime, TableValues) {
  EXPECT_NEAR(newport_mobilenet().step_time(25), 8.117, 5e-4);
  const auto cluster = test::shipped_cluster();
  EXPECT_NEAR(cluster.host.curve_for("mobilenetv2").step_time(315), 10.145, 5e-4);
  EXPECT_THROW(newport_mobilenet().step_time(0), Error);
}

TEST(Memory, MobileNetOnSixGiB) {
  NodeProfile node{"csd0", NodeClass::kCsd, {}, 6ull << 30, 5.0, 2.0};
  const NetworkDescriptor net{"mobilenetv2", 3'470'000, 7'160'000, 56'000'000, 4, 10'000'000};
  const std::uint64_t model = 3ull * 3'470'000 * 4;
  const auto oracle = static_cast<int>((node.dram_bytes - model) / 10'000'000);
  EXPECT_EQ(oracle, 640);
  EXPECT_EQ(max_batch_for_memory(node, net), oracle);
}

TEST(Memory, BoundaryErrors) {
  NodeProfile node{"n", NodeClass::kCsd, {}, 1000, 1.0, 0.0};
  NetworkDescriptor net{"x", 10, 1, 1, 4, 1000};  // model 120 B, one sample needs 1000 B
  try {
    max_batch_for_memory(node, net);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoSampleFits);
  }
  net.activation_bytes_per_sample = 880;
  EXPECT_EQ(max_batch_for_memory(node, net), 1);
  net.param_count = 100;  // 1200 B of state
  try {
    max_batch_for_memory(node, net);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kModelDoesNotFit);
  }
}

TEST(Cluster, ShippedFixtureHasEveryCurve) {
  const auto c = test::shipped_cluster();
  EXPECT_EQ(c.csds.size(), 24u);
  for (const auto* n : c.nodes()) {
    for (const auto& net : test::network_names()) EXPECT_NO_THROW(n->curve_for(net));
  }
  EXPECT_THROW(c.node("nope"), Error);
  EXPECT_EQ(c.with_csd_count(3).csds.size(), 3u);
  EXPECT_THROW(c.with_csd_count(25), Error);
}

TEST(Cluster, UnknownBenchmarkNode) {
  auto c = test::shipped_cluster();
  EXPECT_THROW(apply_benchmarks(c, {{"ghost", "m", 8, 1.0}, {"ghost", "m", 16, 2.0}}), Error);
}

TEST(Cluster, JsonRoundTrip) {
  const auto c = test::shipped_cluster();
  const auto back = io::cluster_from_json(io::to_json(c));
  EXPECT_EQ(io::to_json(back).dump(), io::to_json(c).dump());
  EXPECT_DOUBLE_EQ(back.node("csd07").curve_for("nasnet").throughput_at(15), 2.8);
}

TEST(Cluster, DuplicateNodeIdRejected) {
  auto j = io::load_json(test::data_path("cluster_base.json"));
  j["csds"][1]["node_id"] = "csd00";
  EXPECT_THROW(io::cluster_from_json(j), Error);
}
