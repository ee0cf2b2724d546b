#pragma once

// Accuracy-parity experiment: the same synthetic task trained by several
// heterogeneous workers (data placed by the partitioner) and by one worker
// with the same total batch.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "stannis/minitrain.hpp"
#include "stannis/partitioner.hpp"
#include "stannis/tuner.hpp"

namespace stannis::minitrain {

struct ParityConfig {
  std::uint64_t seed = 2020;
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{16};
  Activation activation = Activation::kTanh;
  double separation = 5.0;
  // First worker plays the host (public data only); the rest hold private data.
  std::vector<std::size_t> worker_batches{16, 4, 4, 6, 8, 10};
  std::size_t public_samples = 4000;
  std::size_t private_per_worker = 400;
  std::size_t holdout_samples = 1000;
  std::size_t steps = 500;
  LrSchedule schedule{0.05, 2.0, 50, LrMode::kWarmupThenScaled};
  Averaging averaging = Averaging::kWeighted;
  double loss_tolerance = 0.01;

  std::size_t total_batch() const {
    std::size_t s = 0;
    for (auto b : worker_batches) s += b;
    return s;
  }
};

struct ParityOutcome {
  TrainResult distributed;
  TrainResult single;
  PartitionPlan plan;
  double distributed_loss = 0.0;  // mean loss over the training pool
  double single_loss = 0.0;
  double relative_loss_difference = 0.0;
  double distributed_accuracy = 0.0;  // on the held-out set
  double single_accuracy = 0.0;
};

inline std::string parity_worker_id(std::size_t k) { return fmt::format("w{}", k); }

inline ParityOutcome run_parity(const ParityConfig& cfg) {
  if (cfg.worker_batches.empty()) throw Error(ErrorCode::kInvalidArgument, "need at least one worker");

  std::vector<std::size_t> dims{cfg.input_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(2);
  const MlpModel init = MlpModel::initialize(dims, cfg.activation, Loss::kSoftmaxCrossEntropy, cfg.seed);

  // Pool layout: public samples first, then each private worker's block.
  const std::size_t n_private_workers = cfg.worker_batches.size() - 1;
  const std::size_t pool_size = cfg.public_samples + n_private_workers * cfg.private_per_worker;
  // One draw for pool and holdout so both share the class direction; the
  // holdout is the tail.
  auto all = gaussian_mixture(pool_size + cfg.holdout_samples, cfg.input_dim, cfg.separation, cfg.seed + 1);
  const std::vector<Sample> test(all.begin() + static_cast<std::ptrdiff_t>(pool_size), all.end());
  all.resize(pool_size);
  const std::vector<Sample>& pool = all;

  TuneResult tune;
  DatasetSpec data;
  data.public_total = static_cast<Count>(cfg.public_samples);
  PoolLayout layout;
  for (std::size_t k = 0; k < cfg.worker_batches.size(); ++k) {
    const auto id = parity_worker_id(k);
    tune.per_node[id].batch_size = static_cast<int>(cfg.worker_batches[k]);
    if (k > 0) {
      data.private_per_node[id] = static_cast<Count>(cfg.private_per_worker);
      layout.private_offset[id] = cfg.public_samples + (k - 1) * cfg.private_per_worker;
    }
  }

  ParityOutcome out;
  out.plan = balance_epoch(tune, data);
  auto workers = workers_from_plan(out.plan, layout, init);
  out.distributed = train_distributed(workers, pool, cfg.schedule, cfg.steps, cfg.averaging);

  std::vector<WorkerState> solo{{"single", cfg.total_batch(), {}, init, 0}};
  for (std::size_t i = 0; i < pool.size(); ++i) solo.front().shard.push_back(i);
  out.single = train_distributed(solo, pool, cfg.schedule, cfg.steps, Averaging::kWeighted);

  out.distributed_loss = mean_loss(out.distributed.model, pool);
  out.single_loss = mean_loss(out.single.model, pool);
  out.relative_loss_difference = std::abs(out.distributed_loss - out.single_loss) / out.single_loss;
  out.distributed_accuracy = accuracy(out.distributed.model, test);
  out.single_accuracy = accuracy(out.single.model, test);
  return out;
}

}  // namespace stannis::minitrain
