#pragma once

// Simulated distributed aggregation of gradient statistics.
//
// K virtual workers each hold a contiguous shard of every layer's gradient
// and compute the moment triple (count, sum g^2, sum |g|) locally in one
// pass. all_reduce_stats merges the partial moments in a fixed tree order
// keyed by worker_id, then finalizes them into LayerStats, so the result
// does not depend on input order or the caller's thread count. With K = 1
// the pipeline is exactly stats::layer_stats.
//
// The per-layer auxiliary payload is a constant number of scalars, and each
// worker touches only its own shard; elements_visited records the actual
// element reads for the work-accounting checks.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "stquant/policy.hpp"
#include "stquant/stats.hpp"

namespace stq::dist {

struct LayerMoments {
  stats::GradMoments moments;
  std::uint64_t elements_visited = 0;
};

/// One pass over a shard; an empty shard is legal and contributes zeros.
LayerMoments local_moments(std::span<const double> shard);

struct WorkerShard {
  int worker_id = 0;
  std::vector<LayerMoments> layers;  // indexed by layer_id

  void add_layer(std::span<const double> shard);
};

/// Contiguous balanced split: element range [begin, end) of worker k out of
/// k_workers over n elements; shard sizes differ by at most one.
std::pair<std::size_t, std::size_t> shard_range(std::size_t n, int k_workers,
                                                int worker);

/// Builds K workers, worker k holding shard_range(n, K, k) of every layer.
std::vector<WorkerShard> make_shards(
    const std::vector<std::vector<double>>& layer_grads, int k_workers);

/// Deterministic reduction: shards must carry worker_ids forming a
/// permutation of [0, K) and agree on the layer count; throws
/// std::invalid_argument otherwise or when a layer has no elements in total.
std::vector<stats::LayerStats> all_reduce_stats(
    std::span<const WorkerShard> shards, int k_workers,
    double eps = stats::kDefaultEps);

/// K identical copies of the policy, modelling every worker quantizing with
/// the same widths.
std::vector<policy::BitPolicy> broadcast_policy(const policy::BitPolicy& p,
                                                int k_workers);

}  // namespace stq::dist
