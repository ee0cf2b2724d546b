#pragma once

// Desk-scale synchronous data-parallel SGD: a small fully-connected network
// with analytic gradients, batch-size-weighted ring allreduce, and learning
// rate schedules. All arithmetic is double precision with a fixed reduction
// order, so runs are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "stannis/error.hpp"
#include "stannis/partitioner.hpp"

namespace stannis::minitrain {

// Dense layer mapping `in` inputs to `out` outputs: an out x in weight
// matrix (row-major) followed by `out` biases.
struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t size() const { return (in + 1) * out; }
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct LayerParams {
  std::vector<double> weights;
  std::vector<double> bias;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Flat parameter (or gradient) vector plus the layer layout it flattens.
class GradientTensor {
 public:
  GradientTensor() = default;

  explicit GradientTensor(std::vector<LayerShape> layout) : layout_(std::move(layout)) {
    std::size_t total = 0;
    for (const auto& l : layout_) {
      offsets_.push_back(total);
      total += l.size();
    }
    values_.assign(total, 0.0);
  }

  static GradientTensor flatten(const std::vector<LayerShape>& layout, const std::vector<LayerParams>& layers) {
    if (layers.size() != layout.size()) {
      throw Error(ErrorCode::kLengthMismatch, "layer count does not match layout");
    }
    GradientTensor t(layout);
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layers[i].weights.size() != layout[i].in * layout[i].out || layers[i].bias.size() != layout[i].out) {
        throw Error(ErrorCode::kLengthMismatch, "layer parameters do not match layout", fmt::format("layer {}", i));
      }
      std::copy(layers[i].weights.begin(), layers[i].weights.end(), t.weights(i).begin());
      std::copy(layers[i].bias.begin(), layers[i].bias.end(), t.bias(i).begin());
    }
    return t;
  }

  std::vector<LayerParams> unflatten() const {
    std::vector<LayerParams> out;
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      auto w = weights(i);
      auto b = bias(i);
      out.push_back({{w.begin(), w.end()}, {b.begin(), b.end()}});
    }
    return out;
  }

  std::span<double> weights(std::size_t layer) {
    return {values_.data() + offsets_[layer], layout_[layer].in * layout_[layer].out};
  }
  std::span<const double> weights(std::size_t layer) const {
    return {values_.data() + offsets_[layer], layout_[layer].in * layout_[layer].out};
  }
  std::span<double> bias(std::size_t layer) {
    return {values_.data() + offsets_[layer] + layout_[layer].in * layout_[layer].out, layout_[layer].out};
  }
  std::span<const double> bias(std::size_t layer) const {
    return {values_.data() + offsets_[layer] + layout_[layer].in * layout_[layer].out, layout_[layer].out};
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  const std::vector<LayerShape>& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  friend bool operator==(const GradientTensor& a, const GradientTensor& b) {
    return a.layout_ == b.layout_ && a.values_ == b.values_;
  }

 private:
  std::vector<LayerShape> layout_;
  std::vector<std::size_t> offsets_;
  std::vector<double> values_;
};

enum class Activation { kRelu, kTanh };
enum class Loss { kSoftmaxCrossEntropy, kMse };

inline std::string_view to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }
inline std::string_view to_string(Loss l) { return l == Loss::kMse ? "mse" : "softmax_cross_entropy"; }

inline std::vector<LayerShape> layout_for(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw Error(ErrorCode::kInvalidArgument, "an MLP needs at least input and output dims");
  std::vector<LayerShape> out;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i + 1] == 0) throw Error(ErrorCode::kNonPositive, "layer dims must be positive");
    out.push_back({dims[i], dims[i + 1]});
  }
  return out;
}

struct MlpModel {
  std::vector<std::size_t> layer_dims;
  GradientTensor weights;
  Activation activation = Activation::kTanh;
  Loss loss = Loss::kSoftmaxCrossEntropy;

  // Glorot-uniform weights in [-r, r], r = sqrt(6 / (fan_in + fan_out)); zero biases.
  static MlpModel initialize(std::vector<std::size_t> dims, Activation act, Loss loss, std::uint64_t seed) {
    MlpModel m{dims, GradientTensor(layout_for(dims)), act, loss};
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < m.weights.layout().size(); ++i) {
      const auto& l = m.weights.layout()[i];
      const double r = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      std::uniform_real_distribution<double> dist(-r, r);
      for (double& w : m.weights.weights(i)) w = dist(rng);
    }
    return m;
  }

  static MlpModel zeros(std::vector<std::size_t> dims, Activation act, Loss loss) {
    return {dims, GradientTensor(layout_for(dims)), act, loss};
  }
};

struct Sample {
  std::vector<double> input;
  std::vector<double> target;  // one-hot (or a distribution) for cross-entropy
};

struct LossAndGrad {
  double loss = 0.0;
  GradientTensor grad;
};

namespace detail {

inline double activate(Activation a, double z) { return a == Activation::kRelu ? std::max(0.0, z) : std::tanh(z); }

inline double activate_grad(Activation a, double z, double out) {
  if (a == Activation::kRelu) return z > 0.0 ? 1.0 : 0.0;
  return 1.0 - out * out;
}

inline void check_finite(std::span<const double> v, std::size_t layer) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(ErrorCode::kNonFinite, fmt::format("non-finite value in layer {}", layer),
                  fmt::format("layer {}", layer));
    }
  }
}

// Forward pass keeping pre-activations and outputs for every layer.
struct Trace {
  std::vector<std::vector<double>> z;
  std::vector<std::vector<double>> a;  // a[0] is the input
};

inline Trace forward(const MlpModel& m, std::span<const double> x) {
  Trace t;
  t.a.emplace_back(x.begin(), x.end());
  const auto& layout = m.weights.layout();
  for (std::size_t l = 0; l < layout.size(); ++l) {
    const auto w = m.weights.weights(l);
    const auto b = m.weights.bias(l);
    const auto& in = t.a.back();
    std::vector<double> z(layout[l].out);
    for (std::size_t o = 0; o < layout[l].out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < layout[l].in; ++i) s += w[o * layout[l].in + i] * in[i];
      z[o] = s;
    }
    check_finite(z, l);
    std::vector<double> a(z.size());
    const bool last = l + 1 == layout.size();
    for (std::size_t o = 0; o < z.size(); ++o) a[o] = last ? z[o] : activate(m.activation, z[o]);
    t.z.push_back(std::move(z));
    t.a.push_back(std::move(a));
  }
  return t;
}

// Loss of one sample and its gradient with respect to the output layer.
inline double output_loss(Loss loss, std::span<const double> out, std::span<const double> target,
                          std::vector<double>* d_out) {
  const std::size_t k = out.size();
  if (d_out) d_out->assign(k, 0.0);
  if (loss == Loss::kMse) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double e = out[i] - target[i];
      s += e * e;
      if (d_out) (*d_out)[i] = 2.0 * e / static_cast<double>(k);
    }
    return s / static_cast<double>(k);
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double denom = 0.0;
  for (double v : out) denom += std::exp(v - mx);
  const double log_denom = std::log(denom);
  double mass = 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    s -= target[i] * (out[i] - mx - log_denom);
    mass += target[i];
  }
  if (d_out) {
    for (std::size_t i = 0; i < k; ++i) (*d_out)[i] = std::exp(out[i] - mx - log_denom) * mass - target[i];
  }
  return s;
}

inline void check_sample(const MlpModel& m, const Sample& s) {
  if (s.input.size() != m.layer_dims.front() || s.target.size() != m.layer_dims.back()) {
    throw Error(ErrorCode::kDimensionMismatch,
                fmt::format("sample has {} inputs / {} targets, model expects {} / {}", s.input.size(),
                            s.target.size(), m.layer_dims.front(), m.layer_dims.back()));
  }
}

}  // namespace detail

/// Mean loss over `batch` and the gradient of that mean.
inline LossAndGrad forward_backward(const MlpModel& model, std::span<const Sample> batch) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "batch must be non-empty");
  const auto& layout = model.weights.layout();
  LossAndGrad out{0.0, GradientTensor(layout)};
  std::vector<double> delta;
  for (const auto& sample : batch) {
    detail::check_sample(model, sample);
    const auto t = detail::forward(model, sample.input);
    out.loss += detail::output_loss(model.loss, t.a.back(), sample.target, &delta);
    for (std::size_t l = layout.size(); l-- > 0;) {
      const auto& in = t.a[l];
      auto gw = out.grad.weights(l);
      auto gb = out.grad.bias(l);
      for (std::size_t o = 0; o < layout[l].out; ++o) {
        gb[o] += delta[o];
        for (std::size_t i = 0; i < layout[l].in; ++i) gw[o * layout[l].in + i] += delta[o] * in[i];
      }
      if (l == 0) break;
      const auto w = model.weights.weights(l);
      std::vector<double> prev(layout[l].in, 0.0);
      for (std::size_t o = 0; o < layout[l].out; ++o) {
        for (std::size_t i = 0; i < layout[l].in; ++i) prev[i] += w[o * layout[l].in + i] * delta[o];
      }
      for (std::size_t i = 0; i < prev.size(); ++i) {
        prev[i] *= detail::activate_grad(model.activation, t.z[l - 1][i], t.a[l][i]);
      }
      delta = std::move(prev);
    }
  }
  const double n = static_cast<double>(batch.size());
  out.loss /= n;
  for (double& g : out.grad.values()) g /= n;
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::kNonFinite, "non-finite loss", "loss");
  return out;
}

inline double mean_loss(const MlpModel& model, std::span<const Sample> samples) {
  double s = 0.0;
  for (const auto& x : samples) {
    detail::check_sample(model, x);
    const auto t = detail::forward(model, x.input);
    s += detail::output_loss(model.loss, t.a.back(), x.target, nullptr);
  }
  return s / static_cast<double>(samples.size());
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline double accuracy(const MlpModel& model, std::span<const Sample> samples) {
  std::size_t hits = 0;
  for (const auto& x : samples) {
    const auto t = detail::forward(model, x.input);
    if (argmax(t.a.back()) == argmax(x.target)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Ring allreduce

struct SegmentRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

enum class RingPhase { kReduceScatter, kAllGather };

struct Transfer {
  std::size_t sender = 0;
  std::size_t receiver = 0;
  std::size_t segment = 0;
  SegmentRange range;
  RingPhase phase = RingPhase::kReduceScatter;
};

struct RingSchedule {
  std::size_t n_workers = 0;
  std::size_t tensor_len = 0;
  std::vector<SegmentRange> segments;
  std::vector<std::vector<Transfer>> rounds;

  // Elements each worker sends over the whole schedule.
  std::vector<std::size_t> elements_sent() const {
    std::vector<std::size_t> out(n_workers, 0);
    for (const auto& round : rounds) {
      for (const auto& t : round) out[t.sender] += t.range.size();
    }
    return out;
  }
};

/// Reduce-scatter then allgather over N floor-balanced contiguous segments:
/// 2(N-1) rounds, each worker sending one segment to its successor per round.
inline RingSchedule ring_schedule(std::size_t n_workers, std::size_t tensor_len) {
  if (n_workers < 2) throw Error(ErrorCode::kInvalidArgument, "a ring needs at least 2 workers");
  RingSchedule s;
  s.n_workers = n_workers;
  s.tensor_len = tensor_len;
  for (std::size_t k = 0; k < n_workers; ++k) {
    s.segments.push_back({k * tensor_len / n_workers, (k + 1) * tensor_len / n_workers});
  }
  const std::size_t n = n_workers;
  for (std::size_t r = 0; r + 1 < n; ++r) {
    std::vector<Transfer> round;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t seg = (i + n - r) % n;
      round.push_back({i, (i + 1) % n, seg, s.segments[seg], RingPhase::kReduceScatter});
    }
    s.rounds.push_back(std::move(round));
  }
  // After reduce-scatter, worker i owns the fully reduced segment (i + 1) % n.
  for (std::size_t r = 0; r + 1 < n; ++r) {
    std::vector<Transfer> round;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t seg = (i + 1 + n - r) % n;
      round.push_back({i, (i + 1) % n, seg, s.segments[seg], RingPhase::kAllGather});
    }
    s.rounds.push_back(std::move(round));
  }
  return s;
}

struct WeightedGradient {
  GradientTensor grad;
  double weight = 1.0;
};

/// sum_i w_i g_i / sum_i w_i. Each worker pre-scales its tensor by
/// w_i / sum(w); the sum then follows the ring schedule's fixed order.
inline GradientTensor weighted_allreduce(std::span<const WeightedGradient> grads) {
  if (grads.empty()) throw Error(ErrorCode::kInvalidArgument, "nothing to reduce");
  const std::size_t len = grads.front().grad.size();
  double total_weight = 0.0;
  for (const auto& g : grads) {
    if (g.grad.size() != len) throw Error(ErrorCode::kLengthMismatch, "gradient tensors differ in length");
    if (!(g.weight > 0.0)) throw Error(ErrorCode::kNonPositive, "allreduce weights must be positive");
    total_weight += g.weight;
  }

  std::vector<std::vector<double>> buffers;
  buffers.reserve(grads.size());
  for (const auto& g : grads) {
    const double scale = g.weight / total_weight;
    std::vector<double> b(g.grad.values());
    for (double& v : b) v *= scale;
    buffers.push_back(std::move(b));
  }

  GradientTensor out = grads.front().grad;
  if (grads.size() == 1) {
    out.values() = std::move(buffers.front());
    return out;
  }

  const auto schedule = ring_schedule(grads.size(), len);
  for (const auto& round : schedule.rounds) {
    // Within a round every worker sends a different segment than it
    // receives, so applying transfers in sequence matches a simultaneous step.
    for (const auto& t : round) {
      const auto& src = buffers[t.sender];
      auto& dst = buffers[t.receiver];
      for (std::size_t k = t.range.begin; k < t.range.end; ++k) {
        if (t.phase == RingPhase::kReduceScatter) {
          dst[k] += src[k];
        } else {
          dst[k] = src[k];
        }
      }
    }
  }
  out.values() = std::move(buffers.front());
  return out;
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class LrMode { kConstant, kLinearScaled, kWarmupThenScaled };

inline std::string_view to_string(LrMode m) {
  switch (m) {
    case LrMode::kConstant: return "constant";
    case LrMode::kLinearScaled: return "linear_scaled";
    case LrMode::kWarmupThenScaled: return "warmup_then_scaled";
  }
  return "unknown";
}

struct LrSchedule {
  double base_lr = 0.1;
  double scale_factor = 1.0;
  std::size_t warmup_steps = 0;
  LrMode mode = LrMode::kConstant;
};

inline double lr_at(const LrSchedule& s, std::size_t step) {
  switch (s.mode) {
    case LrMode::kConstant:
      return s.base_lr;
    case LrMode::kLinearScaled:
      return s.base_lr * s.scale_factor;
    case LrMode::kWarmupThenScaled: {
      const double target = s.base_lr * s.scale_factor;
      if (step >= s.warmup_steps) return target;
      const double frac = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
      return s.base_lr + frac * (target - s.base_lr);
    }
  }
  return s.base_lr;
}

// ---------------------------------------------------------------------------
// Distributed training

enum class Averaging { kWeighted, kUniform };

inline std::string_view to_string(Averaging a) { return a == Averaging::kWeighted ? "weighted" : "uniform"; }

struct WorkerState {
  std::string worker_id;
  std::size_t batch_size = 0;
  std::vector<std::size_t> shard;  // indices into the sample pool, consumed cyclically
  MlpModel model_replica;
  std::size_t cursor = 0;
};

struct TraceRow {
  std::size_t step = 0;
  double lr = 0.0;
  std::size_t worker_count = 0;
  std::size_t total_batch = 0;
  double loss = 0.0;  // mean loss over the step's union batch, before the update
};

struct TrainResult {
  MlpModel model;
  std::vector<TraceRow> trace;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,lr,worker_count,total_batch,loss\n";
  for (const auto& r : trace) {
    out += fmt::format("{},{},{},{},{}\n", r.step, r.lr, r.worker_count, r.total_batch, r.loss);
  }
  return out;
}

/// Synchronous SGD: per step every worker runs forward/backward on its next
/// batch, gradients are allreduced (weighted by batch size unless `uniform`),
/// and every replica applies the same update.
inline TrainResult train_distributed(std::vector<WorkerState>& workers, std::span<const Sample> pool,
                                     const LrSchedule& schedule, std::size_t steps,
                                     Averaging averaging = Averaging::kWeighted) {
  if (workers.empty()) throw Error(ErrorCode::kInvalidArgument, "no workers");
  for (const auto& w : workers) {
    if (w.shard.empty() || w.batch_size == 0) {
      throw Error(ErrorCode::kInvalidArgument, "worker needs a non-empty shard and batch", w.worker_id);
    }
    if (!(w.model_replica.weights == workers.front().model_replica.weights)) {
      throw Error(ErrorCode::kInconsistent, "replicas must start identical", w.worker_id);
    }
    for (std::size_t idx : w.shard) {
      if (idx >= pool.size()) throw Error(ErrorCode::kInvalidArgument, "shard index outside the pool", w.worker_id);
    }
  }

  TrainResult result;
  std::size_t total_batch = 0;
  for (const auto& w : workers) total_batch += w.batch_size;

  std::vector<Sample> batch;
  std::vector<WeightedGradient> grads(workers.size());
  for (std::size_t step = 0; step < steps; ++step) {
    double loss = 0.0;
    for (std::size_t k = 0; k < workers.size(); ++k) {
      auto& w = workers[k];
      batch.clear();
      for (std::size_t j = 0; j < w.batch_size; ++j) {
        batch.push_back(pool[w.shard[w.cursor]]);
        w.cursor = (w.cursor + 1) % w.shard.size();
      }
      auto lg = forward_backward(w.model_replica, batch);
      loss += lg.loss * static_cast<double>(w.batch_size);
      grads[k] = {std::move(lg.grad),
                  averaging == Averaging::kWeighted ? static_cast<double>(w.batch_size) : 1.0};
    }
    const GradientTensor reduced = weighted_allreduce(grads);
    const double lr = lr_at(schedule, step);
    for (auto& w : workers) {
      auto& values = w.model_replica.weights.values();
      for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * reduced.values()[i];
    }
    for (const auto& w : workers) {
      if (!(w.model_replica.weights == workers.front().model_replica.weights)) {
        throw Error(ErrorCode::kInconsistent, fmt::format("replica diverged at step {}", step), w.worker_id);
      }
    }
    result.trace.push_back({step, lr, workers.size(), total_batch, loss / static_cast<double>(total_batch)});
  }
  result.model = workers.front().model_replica;
  return result;
}

// Where each data source lives in a flat sample pool.
struct PoolLayout {
  std::size_t public_offset = 0;
  std::map<std::string, std::size_t> private_offset;
};

/// One worker per plan node, its shard in manifest order: own private ids,
/// public ids, then cyclic repeats of the private ids.
inline std::vector<WorkerState> workers_from_plan(const PartitionPlan& plan, const PoolLayout& layout,
                                                  const MlpModel& model) {
  std::vector<WorkerState> out;
  for (const auto& [id, a] : plan.per_node) {
    WorkerState w{id, static_cast<std::size_t>(a.batch_size), {}, model, 0};
    if (a.private_assigned() > 0 || a.duplicated_private > 0) {
      auto it = layout.private_offset.find(a.private_assigned() > 0 ? a.private_owner : id);
      if (it == layout.private_offset.end()) {
        throw Error(ErrorCode::kUnknownNode, "no private pool for node", id);
      }
      for (Count s = a.private_ids.lo; s < a.private_ids.hi; ++s) w.shard.push_back(it->second + s);
      for (Count s = a.public_ids.lo; s < a.public_ids.hi; ++s) w.shard.push_back(layout.public_offset + s);
      const Count span = a.private_ids.size();
      for (Count k = 0; k < a.duplicated_private && span > 0; ++k) {
        w.shard.push_back(it->second + a.private_ids.lo + k % span);
      }
    } else {
      for (Count s = a.public_ids.lo; s < a.public_ids.hi; ++s) w.shard.push_back(layout.public_offset + s);
    }
    out.push_back(std::move(w));
  }
  return out;
}

/// Two-class Gaussian mixture: class means at +-separation/2 along a random
/// unit direction, unit isotropic noise, one-hot targets.
inline std::vector<Sample> gaussian_mixture(std::size_t n, std::size_t dim, double separation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dir(dim);
  double norm = 0.0;
  for (double& d : dir) {
    d = normal(rng);
    norm += d * d;
  }
  norm = std::sqrt(norm);
  for (double& d : dir) d /= norm;

  std::bernoulli_distribution coin(0.5);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = coin(rng);
    const double sign = positive ? 0.5 : -0.5;
    Sample s;
    s.input.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) s.input[k] = sign * separation * dir[k] + normal(rng);
    s.target = positive ? std::vector<double>{0.0, 1.0} : std::vector<double>{1.0, 0.0};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace stannis::minitrain
