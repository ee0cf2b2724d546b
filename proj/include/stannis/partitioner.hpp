#pragma once

// Dataset partitioning so that every node runs the same number of steps per
// epoch. Private samples stay on the node that owns them; the public pool
// fills the rest; a node's own private set is repeated cyclically when the
// public pool runs dry.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "stannis/error.hpp"
#include "stannis/tuner.hpp"

namespace stannis {

using Count = std::int64_t;

/// Host dataset size that gives the host the same step count as a card,
/// dropping any partial final batch on the card.
inline Count host_dataset_size(Count dataset_card, Count batchsize_card, Count batchsize_host) {
  if (dataset_card < 1 || batchsize_card < 1 || batchsize_host < 1) {
    throw Error(ErrorCode::kNonPositive, "host_dataset_size inputs must be >= 1");
  }
  return (dataset_card / batchsize_card) * batchsize_host;
}

struct DatasetSpec {
  Count public_total = 0;
  std::map<std::string, Count> private_per_node;

  Count private_of(const std::string& id) const {
    auto it = private_per_node.find(id);
    return it == private_per_node.end() ? 0 : it->second;
  }

  void validate() const {
    if (public_total < 0) throw Error(ErrorCode::kInvalidArgument, "public_total must be >= 0");
    for (const auto& [id, n] : private_per_node) {
      if (n < 0) throw Error(ErrorCode::kInvalidArgument, "private counts must be >= 0", id);
    }
  }
};

// Half-open range of sample ids.
struct IdRange {
  Count lo = 0;
  Count hi = 0;
  Count size() const { return hi - lo; }
  friend bool operator==(const IdRange&, const IdRange&) = default;
};

struct NodeAssignment {
  int batch_size = 0;
  std::string private_owner;  // node whose private ids `private_ids` index
  IdRange private_ids;        // node-scoped private sample ids
  IdRange public_ids;         // ids into the shared public pool
  Count duplicated_private = 0;
  Count steps_per_epoch = 0;

  Count private_assigned() const { return private_ids.size(); }
  Count public_assigned() const { return public_ids.size(); }
  Count total() const { return private_assigned() + public_assigned() + duplicated_private; }
};

struct PartitionPlan {
  Count epoch_steps = 0;
  std::map<std::string, NodeAssignment> per_node;
};

namespace detail {

struct StepEval {
  bool feasible = false;
  Count distinct = 0;
  Count duplicated = 0;
};

// Supply accounting for a common step count. Nodes without private data can
// only draw from the public pool; the others may duplicate their own samples.
inline StepEval evaluate_steps(const std::vector<Count>& batch, const std::vector<Count>& priv,
                               Count public_total, Count steps) {
  StepEval ev;
  Count fixed_public = 0;
  Count flexible_need = 0;
  Count private_used = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Count need = batch[i] * steps;
    const Count own = std::min(priv[i], need);
    private_used += own;
    if (priv[i] == 0) {
      fixed_public += need;
    } else {
      flexible_need += need - own;
    }
  }
  ev.feasible = fixed_public <= public_total;
  if (!ev.feasible) return ev;
  const Count public_left = public_total - fixed_public;
  const Count public_to_flexible = std::min(public_left, flexible_need);
  ev.distinct = private_used + fixed_public + public_to_flexible;
  ev.duplicated = flexible_need - public_to_flexible;
  return ev;
}

}  // namespace detail

/// Chooses the common step count that maximizes distinct samples per epoch
/// (ties: fewest duplicates, i.e. fewest steps) and assigns samples to nodes.
inline PartitionPlan balance_epoch(const TuneResult& tune, const DatasetSpec& data) {
  data.validate();
  if (tune.per_node.empty()) throw Error(ErrorCode::kInvalidArgument, "tune result has no nodes");
  for (const auto& [id, n] : data.private_per_node) {
    if (!tune.per_node.contains(id)) {
      throw Error(ErrorCode::kUnknownNode, "dataset names node '" + id + "' absent from the tuning", id);
    }
  }

  std::vector<std::string> ids;
  std::vector<Count> batch;
  std::vector<Count> priv;
  for (const auto& [id, n] : tune.per_node) {
    if (n.batch_size < 1) throw Error(ErrorCode::kNonPositive, "batch size must be >= 1", id);
    ids.push_back(id);
    batch.push_back(n.batch_size);
    priv.push_back(data.private_of(id));
  }

  if (!detail::evaluate_steps(batch, priv, data.public_total, 1).feasible) {
    throw Error(ErrorCode::kInsufficientData, "not enough data for a single synchronized step");
  }

  // Distinct usage saturates once every node's need covers its private set
  // and the union covers all data; beyond that only duplication grows.
  const Count total_data =
      data.public_total + std::accumulate(priv.begin(), priv.end(), Count{0});
  const Count min_batch = *std::min_element(batch.begin(), batch.end());
  Count upper = std::max<Count>(1, (total_data + min_batch - 1) / min_batch);
  {
    Count fixed_batch = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (priv[i] == 0) fixed_batch += batch[i];
    }
    if (fixed_batch > 0) upper = std::min(upper, data.public_total / fixed_batch);
  }
  const Count best_distinct = detail::evaluate_steps(batch, priv, data.public_total, upper).distinct;
  Count lo = 1;
  Count hi = upper;
  while (lo < hi) {
    const Count mid = lo + (hi - lo) / 2;
    if (detail::evaluate_steps(batch, priv, data.public_total, mid).distinct >= best_distinct) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  const Count steps = lo;

  PartitionPlan plan;
  plan.epoch_steps = steps;

  std::vector<Count> need(ids.size());
  std::vector<Count> own(ids.size());
  std::vector<Count> pub(ids.size(), 0);
  Count pool = data.public_total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    need[i] = batch[i] * steps;
    own[i] = std::min(priv[i], need[i]);
    if (priv[i] == 0) {
      pub[i] = need[i];
      pool -= need[i];
    }
  }
  // Remaining pool goes to nodes with private data, proportional to what
  // they still need (largest remainder, ties by node order).
  Count flexible_need = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (priv[i] > 0) flexible_need += need[i] - own[i];
  }
  if (flexible_need <= pool) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (priv[i] > 0) pub[i] = need[i] - own[i];
    }
  } else if (flexible_need > 0) {
    std::vector<std::pair<Count, std::size_t>> remainders;
    Count given = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (priv[i] == 0) continue;
      const Count want = need[i] - own[i];
      const __int128 scaled = static_cast<__int128>(pool) * want;
      pub[i] = static_cast<Count>(scaled / flexible_need);
      remainders.emplace_back(static_cast<Count>(scaled % flexible_need), i);
      given += pub[i];
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; given < pool && k < remainders.size(); ++k) {
      ++pub[remainders[k].second];
      ++given;
    }
  }

  Count cursor = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    NodeAssignment a;
    a.batch_size = static_cast<int>(batch[i]);
    a.private_owner = own[i] > 0 ? ids[i] : std::string{};
    a.private_ids = {0, own[i]};
    a.public_ids = {cursor, cursor + pub[i]};
    cursor += pub[i];
    a.duplicated_private = need[i] - own[i] - pub[i];
    a.steps_per_epoch = steps;
    plan.per_node[ids[i]] = a;
  }
  return plan;
}

enum class ViolationKind {
  kUnknownNode,
  kBatchMismatch,
  kUnequalSteps,
  kDivisibility,
  kCrossNodePrivacy,
  kPrivateOverdraw,
  kPublicOutOfRange,
  kPublicOverlap,
  kPrematureDuplication,
  kDuplicationWithoutSource,
};

inline std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::kUnknownNode: return "unknown_node";
    case ViolationKind::kBatchMismatch: return "batch_mismatch";
    case ViolationKind::kUnequalSteps: return "unequal_steps";
    case ViolationKind::kDivisibility: return "divisibility";
    case ViolationKind::kCrossNodePrivacy: return "cross_node_privacy";
    case ViolationKind::kPrivateOverdraw: return "private_overdraw";
    case ViolationKind::kPublicOutOfRange: return "public_out_of_range";
    case ViolationKind::kPublicOverlap: return "public_overlap";
    case ViolationKind::kPrematureDuplication: return "premature_duplication";
    case ViolationKind::kDuplicationWithoutSource: return "duplication_without_source";
  }
  return "unknown";
}

struct Violation {
  std::string node_id;
  ViolationKind kind;
  std::string message;
};

/// Checks every plan invariant; an empty result means the plan is valid.
inline std::vector<Violation> validate_plan(const PartitionPlan& plan, const TuneResult& tune,
                                            const DatasetSpec& data) {
  std::vector<Violation> out;
  auto add = [&](const std::string& id, ViolationKind k, std::string msg) {
    out.push_back({id, k, std::move(msg)});
  };

  for (const auto& [id, n] : tune.per_node) {
    if (!plan.per_node.contains(id)) add(id, ViolationKind::kUnknownNode, "tuned node missing from plan");
  }

  Count public_used = 0;
  std::vector<std::pair<IdRange, std::string>> ranges;
  for (const auto& [id, a] : plan.per_node) {
    auto t = tune.per_node.find(id);
    if (t == tune.per_node.end()) {
      add(id, ViolationKind::kUnknownNode, "plan node absent from tuning");
      continue;
    }
    if (a.batch_size != t->second.batch_size) {
      add(id, ViolationKind::kBatchMismatch,
          fmt::format("plan batch {} differs from tuned batch {}", a.batch_size, t->second.batch_size));
    }
    if (a.steps_per_epoch != plan.epoch_steps || plan.epoch_steps < 1) {
      add(id, ViolationKind::kUnequalSteps,
          fmt::format("node runs {} steps, epoch has {}", a.steps_per_epoch, plan.epoch_steps));
    }
    const Count expected = static_cast<Count>(t->second.batch_size) * plan.epoch_steps;
    if (a.total() != expected || a.private_ids.lo > a.private_ids.hi ||
        a.public_ids.lo > a.public_ids.hi || a.duplicated_private < 0) {
      add(id, ViolationKind::kDivisibility,
          fmt::format("assigned {} samples, batch x steps = {}", a.total(), expected));
    }
    if (a.private_assigned() > 0 && a.private_owner != id) {
      add(id, ViolationKind::kCrossNodePrivacy,
          "holds private samples of node '" + a.private_owner + "'");
    }
    const std::string& owner = a.private_owner.empty() ? id : a.private_owner;
    if (a.private_ids.lo < 0 || a.private_ids.hi > data.private_of(owner)) {
      add(id, ViolationKind::kPrivateOverdraw,
          fmt::format("private ids [{}, {}) exceed the {} private samples of '{}'", a.private_ids.lo,
                      a.private_ids.hi, data.private_of(owner), owner));
    }
    if (a.public_ids.lo < 0 || a.public_ids.hi > data.public_total) {
      add(id, ViolationKind::kPublicOutOfRange,
          fmt::format("public ids [{}, {}) outside the pool of {}", a.public_ids.lo, a.public_ids.hi,
                      data.public_total));
    }
    if (a.duplicated_private > 0 && data.private_of(id) == 0) {
      add(id, ViolationKind::kDuplicationWithoutSource, "duplicates private data it does not own");
    }
    public_used += std::max<Count>(0, a.public_assigned());
    if (a.public_assigned() > 0) ranges.emplace_back(a.public_ids, id);
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const auto& a, const auto& b) { return a.first.lo < b.first.lo; });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first.lo < ranges[i - 1].first.hi) {
      add(ranges[i].second, ViolationKind::kPublicOverlap,
          "public ids overlap node '" + ranges[i - 1].second + "'");
    }
  }

  if (public_used < data.public_total) {
    for (const auto& [id, a] : plan.per_node) {
      if (a.duplicated_private > 0) {
        add(id, ViolationKind::kPrematureDuplication, "duplicates while public samples remain unused");
      }
    }
  }
  return out;
}

enum class SampleSource { kPublic, kPrivate, kDuplicate };

inline std::string_view to_string(SampleSource s) {
  switch (s) {
    case SampleSource::kPublic: return "public";
    case SampleSource::kPrivate: return "private";
    case SampleSource::kDuplicate: return "dup";
  }
  return "unknown";
}

struct ManifestEntry {
  std::string node_id;
  SampleSource source;
  Count sample_id;  // public pool id, or node-scoped private id
};

/// Expands a plan into one entry per assigned sample, nodes in id order:
/// private ids, then public ids, then cyclic repeats of the private set.
inline std::vector<ManifestEntry> expand_manifest(const PartitionPlan& plan) {
  std::vector<ManifestEntry> out;
  for (const auto& [id, a] : plan.per_node) {
    for (Count s = a.private_ids.lo; s < a.private_ids.hi; ++s) out.push_back({id, SampleSource::kPrivate, s});
    for (Count s = a.public_ids.lo; s < a.public_ids.hi; ++s) out.push_back({id, SampleSource::kPublic, s});
    const Count span = a.private_ids.size();
    for (Count k = 0; k < a.duplicated_private && span > 0; ++k) {
      out.push_back({id, SampleSource::kDuplicate, a.private_ids.lo + k % span});
    }
  }
  return out;
}

inline std::string manifest_csv(const PartitionPlan& plan) {
  std::string out = "node_id,source,sample_id\n";
  for (const auto& e : expand_manifest(plan)) {
    out += fmt::format("{},{},{}\n", e.node_id, to_string(e.source), e.sample_id);
  }
  return out;
}

}  // namespace stannis
