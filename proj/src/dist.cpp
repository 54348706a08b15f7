#include "stquant/dist.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stq::dist {

LayerMoments local_moments(std::span<const double> shard) {
  // Delegating keeps the accumulation order identical to the single-worker
  // path, so K = 1 reproduces stats::layer_stats to the last bit. The one
  // pass inside reads each element exactly once.
  LayerMoments entry;
  entry.moments = stats::local_moments(shard);
  entry.elements_visited = shard.size();
  return entry;
}

void WorkerShard::add_layer(std::span<const double> shard) {
  layers.push_back(local_moments(shard));
}

std::pair<std::size_t, std::size_t> shard_range(std::size_t n, int k_workers,
                                                int worker) {
  if (k_workers <= 0 || worker < 0 || worker >= k_workers) {
    throw std::invalid_argument("shard_range: worker index out of range");
  }
  const auto k = static_cast<std::size_t>(k_workers);
  const auto w = static_cast<std::size_t>(worker);
  return {n * w / k, n * (w + 1) / k};
}

std::vector<WorkerShard> make_shards(
    const std::vector<std::vector<double>>& layer_grads, int k_workers) {
  if (k_workers <= 0) {
    throw std::invalid_argument("make_shards: worker count must be positive");
  }
  std::vector<WorkerShard> shards(static_cast<std::size_t>(k_workers));
  for (int w = 0; w < k_workers; ++w) {
    shards[w].worker_id = w;
    shards[w].layers.reserve(layer_grads.size());
    for (const auto& grad : layer_grads) {
      const auto [begin, end] = shard_range(grad.size(), k_workers, w);
      shards[w].add_layer(std::span<const double>(grad).subspan(begin, end - begin));
    }
  }
  return shards;
}

std::vector<stats::LayerStats> all_reduce_stats(
    std::span<const WorkerShard> shards, int k_workers, double eps) {
  if (k_workers <= 0 || shards.size() != static_cast<std::size_t>(k_workers)) {
    throw std::invalid_argument("all_reduce_stats: expected one shard per worker");
  }

  std::vector<const WorkerShard*> ordered(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) ordered[i] = &shards[i];
  std::sort(ordered.begin(), ordered.end(),
            [](const WorkerShard* a, const WorkerShard* b) {
              return a->worker_id < b->worker_id;
            });
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (ordered[i]->worker_id != static_cast<int>(i)) {
      throw std::invalid_argument(
          "all_reduce_stats: worker ids must form a permutation of [0, K)");
    }
  }

  const std::size_t num_layers = ordered.front()->layers.size();
  if (num_layers == 0) {
    throw std::invalid_argument("all_reduce_stats: no layers");
  }
  for (const WorkerShard* s : ordered) {
    if (s->layers.size() != num_layers) {
      throw std::invalid_argument("all_reduce_stats: workers disagree on layer count");
    }
  }

  // Balanced binary tree over worker_id order: (0+1), (2+3), ... per round.
  std::vector<std::vector<stats::GradMoments>> rounds;
  rounds.emplace_back();
  rounds.back().reserve(ordered.size() * num_layers);
  for (const WorkerShard* s : ordered) {
    for (const LayerMoments& lm : s->layers) {
      rounds.back().push_back(lm.moments);
    }
  }
  // rounds.back() is laid out worker-major: worker w's layer l at w*num_layers+l.
  std::size_t active = ordered.size();
  while (active > 1) {
    std::vector<stats::GradMoments> next;
    const std::size_t pairs = active / 2;
    next.reserve((pairs + active % 2) * num_layers);
    const auto& cur = rounds.back();
    for (std::size_t p = 0; p < pairs; ++p) {
      for (std::size_t l = 0; l < num_layers; ++l) {
        next.push_back(stats::merge_moments(cur[(2 * p) * num_layers + l],
                                            cur[(2 * p + 1) * num_layers + l]));
      }
    }
    if (active % 2 == 1) {
      for (std::size_t l = 0; l < num_layers; ++l) {
        next.push_back(cur[(active - 1) * num_layers + l]);
      }
    }
    rounds.push_back(std::move(next));
    active = pairs + active % 2;
  }

  std::vector<stats::LayerStats> out;
  out.reserve(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    const stats::GradMoments& total = rounds.back()[l];
    if (total.count == 0) {
      throw std::invalid_argument("all_reduce_stats: layer " + std::to_string(l) +
                                  " has no elements");
    }
    out.push_back(stats::finalize_moments(total, eps));
  }
  return out;
}

std::vector<policy::BitPolicy> broadcast_policy(const policy::BitPolicy& p,
                                                int k_workers) {
  if (k_workers <= 0) {
    throw std::invalid_argument("broadcast_policy: worker count must be positive");
  }
  return std::vector<policy::BitPolicy>(static_cast<std::size_t>(k_workers), p);
}

}  // namespace stq::dist
