#pragma once

// Score fusion and bit-width mapping.
//
// Each layer gets a scalar score per measurement step:
//
//   score = phi + log2(r / (R_ema + eps)) + log2(n / (N_ema + eps))
//               + log2(S_t) + log2(v / (V_ema + eps))
//
// with S_t = 1 + sech(t / tau) and every log numerator floored at eps so the
// score stays finite for degenerate statistics. phi = 7.2 anchors the neutral
// score (all ratios 1, annealing decayed) to the 8-bit band of the threshold
// map {6.8, 12, 24}; boundary scores take the higher width.

#include <array>
#include <cstddef>
#include <vector>

#include "stquant/quant.hpp"
#include "stquant/stats.hpp"

namespace stq::policy {

constexpr double kDefaultPhi = 7.2;
constexpr std::array<double, 3> kDefaultThresholds = {6.8, 12.0, 24.0};
constexpr double kDefaultBaseTau = 500.0;
constexpr int kDefaultBaseBatch = 256;
constexpr int kReferenceDepth = 12;

/// S_t = 1 + sech(t / tau), in (1, 2]. Throws on t < 0 or tau <= 0.
double anneal(double t, double tau);

/// Depth- and batch-scaled annealing constant:
/// max(1, base_tau * (num_layers / 12) * sqrt(base_batch / batch_size)).
double default_tau(int num_layers, int batch_size,
                   double base_tau = kDefaultBaseTau,
                   int base_batch = kDefaultBaseBatch);

struct PolicyConfig {
  double tau = kDefaultBaseTau;
  double phi = kDefaultPhi;
  double eps = stats::kDefaultEps;
  std::array<double, 3> thresholds = kDefaultThresholds;
  bool temporal_enabled = true;  // false pins S_t to 1 (no early-phase bonus)
  bool spatial_enabled = true;   // false pins the v ratio to 1
  int force_bits = 0;            // nonzero pins every layer to that width

  void validate() const;  // throws std::invalid_argument on bad fields
};

double score(const stats::LayerStats& s, const stats::GlobalEma& ema,
             double s_t, double phi, double eps, bool spatial_enabled = true);

quant::BitWidth map_score(double score,
                          const std::array<double, 3>& thresholds =
                              kDefaultThresholds);

struct PolicyEntry {
  std::size_t layer_id = 0;
  double score = 0.0;
  quant::BitWidth bits = quant::BitWidth::b32;

  bool operator==(const PolicyEntry&) const = default;
};

struct BitPolicy {
  long long step = 0;
  std::vector<PolicyEntry> entries;  // ordered by layer_id

  bool operator==(const BitPolicy&) const = default;
};

/// One entry per layer (layer_id = position), score -> width under the
/// config's thresholds and ablation flags. Throws on empty stats or an
/// uninitialized EMA.
BitPolicy compute_policy(std::span<const stats::LayerStats> all_stats,
                         const stats::GlobalEma& ema, long long t,
                         const PolicyConfig& config);

}  // namespace stq::policy
