#include "stquant/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stq::policy {

double anneal(double t, double tau) {
  if (!(tau > 0.0)) {
    throw std::invalid_argument("anneal: tau must be positive");
  }
  if (t < 0.0) {
    throw std::invalid_argument("anneal: step must be nonnegative");
  }
  return 1.0 + 1.0 / std::cosh(t / tau);
}

double default_tau(int num_layers, int batch_size, double base_tau,
                   int base_batch) {
  if (num_layers <= 0 || batch_size <= 0 || base_batch <= 0 ||
      !(base_tau > 0.0)) {
    throw std::invalid_argument("default_tau: arguments must be positive");
  }
  const double depth_scale =
      static_cast<double>(num_layers) / static_cast<double>(kReferenceDepth);
  const double batch_scale = std::sqrt(static_cast<double>(base_batch) /
                                       static_cast<double>(batch_size));
  return std::max(1.0, base_tau * depth_scale * batch_scale);
}

void PolicyConfig::validate() const {
  if (!(tau > 0.0)) {
    throw std::invalid_argument("policy config: tau must be positive");
  }
  if (!std::isfinite(phi)) {
    throw std::invalid_argument("policy config: phi must be finite");
  }
  if (!(eps >= 0.0) || !std::isfinite(eps)) {
    throw std::invalid_argument("policy config: eps must be finite and nonnegative");
  }
  if (!(thresholds[0] < thresholds[1] && thresholds[1] < thresholds[2])) {
    throw std::invalid_argument("policy config: thresholds must be strictly increasing");
  }
  if (force_bits != 0) {
    quant::bit_width_from_int(force_bits);
  }
}

double score(const stats::LayerStats& s, const stats::GlobalEma& ema,
             double s_t, double phi, double eps, bool spatial_enabled) {
  if (!ema.initialized) {
    throw std::invalid_argument("score: global averages not initialized");
  }
  if (!(s_t >= 1.0)) {
    throw std::invalid_argument("score: annealing factor must be >= 1");
  }
  const auto ratio_term = [eps](double value, double reference) {
    return std::log2(std::max(value, eps) / (reference + eps));
  };
  double result = phi + ratio_term(s.r, ema.r) + ratio_term(s.n, ema.n) +
                  std::log2(s_t);
  if (spatial_enabled) {
    result += ratio_term(s.v, ema.v);
  }
  return result;
}

quant::BitWidth map_score(double score,
                          const std::array<double, 3>& thresholds) {
  if (!std::isfinite(score)) {
    throw std::invalid_argument("map_score: score must be finite");
  }
  if (score < thresholds[0]) return quant::BitWidth::b4;
  if (score < thresholds[1]) return quant::BitWidth::b8;
  if (score < thresholds[2]) return quant::BitWidth::b16;
  return quant::BitWidth::b32;
}

BitPolicy compute_policy(std::span<const stats::LayerStats> all_stats,
                         const stats::GlobalEma& ema, long long t,
                         const PolicyConfig& config) {
  config.validate();
  if (all_stats.empty()) {
    throw std::invalid_argument("compute_policy: no layers");
  }
  if (!ema.initialized) {
    throw std::invalid_argument("compute_policy: global averages not initialized");
  }
  const double s_t = config.temporal_enabled
                         ? anneal(static_cast<double>(t), config.tau)
                         : 1.0;
  BitPolicy policy;
  policy.step = t;
  policy.entries.reserve(all_stats.size());
  for (std::size_t l = 0; l < all_stats.size(); ++l) {
    PolicyEntry e;
    e.layer_id = l;
    e.score = score(all_stats[l], ema, s_t, config.phi, config.eps,
                    config.spatial_enabled);
    e.bits = config.force_bits != 0 ? quant::bit_width_from_int(config.force_bits)
                                    : map_score(e.score, config.thresholds);
    policy.entries.push_back(e);
  }
  return policy;
}

}  // namespace stq::policy
