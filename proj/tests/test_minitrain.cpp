#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "oracles.hpp"
#include "stannis/minitrain.hpp"
#include "stannis/verify.hpp"

using namespace stannis;
using namespace stannis::minitrain;

namespace {

GradientTensor tensor_of(std::vector<double> v) {
  GradientTensor t({{v.size() - 1, 1}});  // one layer: (len-1) weights + 1 bias
  t.values() = std::move(v);
  return t;
}

}  // namespace

TEST(Tensor, FlattenRoundTrip) {
  const auto layout = layout_for({3, 4, 2});
  EXPECT_EQ(layout[0].size(), 16u);
  EXPECT_EQ(layout[1].size(), 10u);
  std::vector<LayerParams> layers = {{std::vector<double>(12, 1.0), {2, 2, 2, 2}},
                                     {std::vector<double>(8, 3.0), {4, 4}}};
  const auto t = GradientTensor::flatten(layout, layers);
  EXPECT_EQ(t.size(), 26u);
  EXPECT_EQ(t.unflatten(), layers);
  EXPECT_EQ(t.values()[12], 2.0);
  layers[1].bias.pop_back();
  EXPECT_THROW(GradientTensor::flatten(layout, layers), Error);
}

TEST(ForwardBackward, ZeroFixedPoint) {
  const auto m = MlpModel::zeros({3, 4, 2}, Activation::kTanh, Loss::kMse);
  const std::vector<Sample> batch(5, Sample{{0, 0, 0}, {0, 0}});
  const auto lg = forward_backward(m, batch);
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(ForwardBackward, DuplicatedBatchIsMeanInvariant) {
  std::mt19937_64 rng(4);
  const auto m = test::random_model(rng, Activation::kTanh, Loss::kSoftmaxCrossEntropy);
  const auto batch = test::random_samples(7, m.layer_dims.front(), m.layer_dims.back(), m.loss, rng);
  std::vector<Sample> tripled;
  for (int k = 0; k < 3; ++k) tripled.insert(tripled.end(), batch.begin(), batch.end());
  const auto a = forward_backward(m, batch);
  const auto b = forward_backward(m, tripled);
  EXPECT_NEAR(a.loss, b.loss, 1e-14 * std::abs(a.loss));
  EXPECT_LE(test::max_relative_error(b.grad.values(), a.grad.values()), 1e-13);
}

TEST(ForwardBackward, FiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto act = trial % 2 ? Activation::kRelu : Activation::kTanh;
    const auto loss = trial % 3 ? Loss::kSoftmaxCrossEntropy : Loss::kMse;
    const auto m = test::random_model(rng, act, loss);
    const auto batch = test::random_samples(4, m.layer_dims.front(), m.layer_dims.back(), loss, rng);
    const auto lg = forward_backward(m, batch);
    for (std::size_t k = 0; k < m.weights.size(); ++k) {
      const double num = test::numeric_partial(m, batch, k, 1e-6);
      EXPECT_LE(test::fd_relative_error(lg.grad.values()[k], num), 1e-4) << "trial " << trial << " k " << k;
    }
  }
}

TEST(ForwardBackward, Errors) {
  const auto m = MlpModel::initialize({2, 3, 2}, Activation::kTanh, Loss::kMse, 1);
  EXPECT_THROW(forward_backward(m, std::vector<Sample>{}), Error);
  try {
    forward_backward(m, std::vector<Sample>{{{1, 2, 3}, {0, 1}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
  try {
    forward_backward(m, std::vector<Sample>{{{std::numeric_limits<double>::quiet_NaN(), 0}, {0, 1}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_EQ(e.location(), "layer 0");
  }
}

TEST(Allreduce, IdenticalTensors) {
  const auto g = tensor_of({0.3, -1.7, 2.5, 1e-3});
  const std::vector<WeightedGradient> in = {{g, 1.0}, {g, 5.0}, {g, 0.25}};
  const auto out = weighted_allreduce(in);
  EXPECT_LE(test::max_relative_error(out.values(), g.values()), 1e-15);
}

TEST(Allreduce, TwoWorkersHandArithmetic) {
  const std::vector<WeightedGradient> in = {{tensor_of({1, 1}), 1.0}, {tensor_of({3, 3}), 3.0}};
  const auto out = weighted_allreduce(in);
  EXPECT_EQ(out.values(), (std::vector<double>{2.5, 2.5}));
}

TEST(Allreduce, SevenWorkersMatchDirectMean) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> weight(0.5, 64.0);
  std::vector<WeightedGradient> in;
  std::vector<std::vector<double>> raw;
  std::vector<double> w;
  for (int k = 0; k < 7; ++k) {
    std::vector<double> v(1000);
    for (double& x : v) x = normal(rng);
    raw.push_back(v);
    w.push_back(weight(rng));
    in.push_back({tensor_of(v), w.back()});
  }
  const auto out = weighted_allreduce(in);
  EXPECT_LE(test::max_relative_error(out.values(), test::direct_weighted_mean(raw, w)), 1e-12);
}

TEST(Allreduce, Errors) {
  EXPECT_THROW(weighted_allreduce(std::vector<WeightedGradient>{}), Error);
  EXPECT_THROW(weighted_allreduce(std::vector<WeightedGradient>{{tensor_of({1, 1}), 1}, {tensor_of({1, 1, 1}), 1}}),
               Error);
  EXPECT_THROW(weighted_allreduce(std::vector<WeightedGradient>{{tensor_of({1, 1}), 0.0}}), Error);
}

TEST(Ring, SmallestRing) {
  const auto s = ring_schedule(2, 10);
  EXPECT_EQ(s.rounds.size(), 2u);
  for (const auto& round : s.rounds) {
    for (const auto& t : round) EXPECT_EQ(t.range.size(), 5u);
  }
  EXPECT_EQ(s.elements_sent(), (std::vector<std::size_t>{10, 10}));
}

TEST(Ring, FourWorkers) {
  const auto s = ring_schedule(4, 8);
  EXPECT_EQ(s.rounds.size(), 6u);
  EXPECT_EQ(s.elements_sent(), (std::vector<std::size_t>{12, 12, 12, 12}));
  for (const auto& round : s.rounds) {
    std::vector<int> sends(4, 0), recvs(4, 0);
    for (const auto& t : round) {
      ++sends[t.sender];
      ++recvs[t.receiver];
      EXPECT_EQ(t.receiver, (t.sender + 1) % 4);
    }
    EXPECT_EQ(sends, std::vector<int>(4, 1));
    EXPECT_EQ(recvs, std::vector<int>(4, 1));
  }
}

TEST(Ring, SingleWorkerIsError) { EXPECT_THROW(ring_schedule(1, 10), Error); }

TEST(Ring, SegmentsCoverTensor) {
  for (std::size_t n = 2; n <= 16; ++n) {
    for (std::size_t len : {1u, 7u, 64u, 1000u}) {
      const auto s = ring_schedule(n, len);
      std::size_t covered = 0;
      for (std::size_t k = 0; k < n; ++k) {
        EXPECT_EQ(s.segments[k].begin, covered);
        covered = s.segments[k].end;
      }
      EXPECT_EQ(covered, len);
    }
  }
}

TEST(LrSchedule, Modes) {
  LrSchedule s{0.1, 4.0, 100, LrMode::kWarmupThenScaled};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 0.4);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 0.25);
  EXPECT_DOUBLE_EQ(lr_at(s, 5000), 0.4);
  s.mode = LrMode::kConstant;
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 0.1);
  s.mode = LrMode::kLinearScaled;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.4);
}

TEST(Train, SingleWorkerIsPlainSgd) {
  std::mt19937_64 rng(21);
  const auto m = test::random_model(rng, Activation::kTanh, Loss::kSoftmaxCrossEntropy);
  const auto pool = test::random_samples(30, m.layer_dims.front(), m.layer_dims.back(), m.loss, rng);
  std::vector<WorkerState> w{{"only", 4, {}, m, 0}};
  for (std::size_t i = 0; i < pool.size(); ++i) w[0].shard.push_back(i);
  const LrSchedule sched{0.05, 1.0, 0, LrMode::kConstant};
  const auto batches = test::combined_batches(w, pool, 40);
  const auto r = train_distributed(w, pool, sched, 40);
  EXPECT_EQ(r.model.weights, test::plain_sgd(m, batches, sched).weights);
  EXPECT_EQ(r.trace.size(), 40u);
}

TEST(Train, TwoWorkersMatchCombinedBatch) {
  std::mt19937_64 rng(22);
  const auto m = test::random_model(rng, Activation::kRelu, Loss::kSoftmaxCrossEntropy);
  const auto pool = test::random_samples(80, m.layer_dims.front(), m.layer_dims.back(), m.loss, rng);
  std::vector<WorkerState> w{{"a", 2, {}, m, 0}, {"b", 6, {}, m, 0}};
  for (std::size_t i = 0; i < 80; ++i) w[i % 2].shard.push_back(i);
  const LrSchedule sched{0.05, 2.0, 10, LrMode::kWarmupThenScaled};
  const auto batches = test::combined_batches(w, pool, 60);
  auto workers = w;
  const auto r = train_distributed(workers, pool, sched, 60);
  const auto want = test::plain_sgd(m, batches, sched);
  EXPECT_LE(test::relative_distance(r.model.weights.values(), want.weights.values()), 1e-6);
}

TEST(Train, UniformAveragingDiffersWithUnequalBatches) {
  std::mt19937_64 rng(23);
  const auto m = test::random_model(rng, Activation::kTanh, Loss::kSoftmaxCrossEntropy);
  const auto pool = test::random_samples(40, m.layer_dims.front(), m.layer_dims.back(), m.loss, rng);
  std::vector<WorkerState> w{{"a", 1, {0, 1, 2}, m, 0}, {"b", 7, {}, m, 0}};
  for (std::size_t i = 3; i < 40; ++i) w[1].shard.push_back(i);
  auto wa = w, wb = w;
  const LrSchedule sched{0.1, 1.0, 0, LrMode::kConstant};
  const auto weighted = train_distributed(wa, pool, sched, 5, Averaging::kWeighted);
  const auto uniform = train_distributed(wb, pool, sched, 5, Averaging::kUniform);
  EXPECT_GT(test::relative_distance(uniform.model.weights.values(), weighted.model.weights.values()), 1e-6);
}

TEST(Train, RejectsBadWorkers) {
  const auto m = MlpModel::initialize({2, 2}, Activation::kTanh, Loss::kMse, 1);
  const std::vector<Sample> pool(4, Sample{{0, 0}, {0, 0}});
  std::vector<WorkerState> none;
  EXPECT_THROW(train_distributed(none, pool, LrSchedule{}, 1), Error);
  std::vector<WorkerState> outside{{"a", 1, {9}, m, 0}};
  EXPECT_THROW(train_distributed(outside, pool, LrSchedule{}, 1), Error);
  auto other = MlpModel::initialize({2, 2}, Activation::kTanh, Loss::kMse, 2);
  std::vector<WorkerState> mixed{{"a", 1, {0}, m, 0}, {"b", 1, {1}, other, 0}};
  EXPECT_THROW(train_distributed(mixed, pool, LrSchedule{}, 1), Error);
}

TEST(Train, WorkersFromPlanRespectOwnership) {
  TuneResult tune;
  tune.per_node["w0"].batch_size = 4;
  tune.per_node["w1"].batch_size = 2;
  const DatasetSpec data{20, {{"w1", 3}}};
  const auto plan = balance_epoch(tune, data);
  PoolLayout layout{0, {{"w1", 20}}};
  const auto workers = workers_from_plan(plan, layout, MlpModel::zeros({2, 2}, Activation::kTanh, Loss::kMse));
  ASSERT_EQ(workers.size(), 2u);
  for (const auto& w : workers) {
    EXPECT_EQ(static_cast<Count>(w.shard.size()), plan.per_node.at(w.worker_id).total());
    for (std::size_t idx : w.shard) {
      if (w.worker_id == "w0") {
        EXPECT_LT(idx, 20u);  // public only
      }
    }
  }
}

TEST(Parity, DefaultTaskWithinTolerance) {
  ParityConfig cfg;
  cfg.steps = 200;
  const auto o = run_parity(cfg);
  EXPECT_LE(o.relative_loss_difference, cfg.loss_tolerance);
  EXPECT_GT(o.single_accuracy, 0.9);
  EXPECT_EQ(o.distributed.trace.size(), 200u);
}

TEST(Mixture, Deterministic) {
  const auto a = gaussian_mixture(10, 3, 2.0, 5);
  const auto b = gaussian_mixture(10, 3, 2.0, 5);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].input, b[i].input);
}
