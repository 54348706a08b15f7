#pragma once

// AdamW with quantized optimizer states, plus the full-precision oracle it
// is measured against.
//
// States live only in quantized form between steps (quantize on store,
// dequantize on use). Per step t:
//
//   1. if (t mod U == 0) or (t < warmup_refresh_steps): recompute LayerStats
//      (through the simulated reduction), update the global EMA, recompute
//      the bit policy, and adopt the new per-layer widths;
//   2. m_t = b1 * dequant(m) + (1 - b1) * g,  v_t = b2 * dequant(v) + (1 - b2) * g^2;
//   3. store m_t (linear codec) and v_t (log codec) at the layer's width;
//   4. bias-correct the restored states: m' = dequant(m_t)/(1 - b1^t),
//      v' = dequant(v_t)/(1 - b2^t);
//   5. theta = theta * (1 - lr * wd) - lr * m' / (sqrt(v') + eps).
//
// The oracle runs the identical arithmetic with quantization replaced by
// identity; both paths share update_moments / apply_adamw_update, so a
// 32-bit-everywhere quantized run reproduces the oracle bit for bit.
//
// When a layer's width changes, the carried state is dequantized at the old
// width and simply stored at the new one; there is no migration pass.
// Moments are blended in double and narrowed to float32; parameters and
// gradients stay double.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "stquant/policy.hpp"
#include "stquant/quant.hpp"
#include "stquant/stats.hpp"

namespace stq::optim {

struct AdamConfig {
  double lr = 0.01;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;                   // Adam denominator epsilon
  long long update_freq = 50;          // U, policy refresh period
  std::uint32_t block_size = quant::kDefaultBlockSize;
  double ema_alpha = stats::kDefaultEmaAlpha;
  long long warmup_refresh_steps = 5;  // forced refresh while t < this
  int workers = 1;                     // K virtual workers for stats
  policy::PolicyConfig policy;         // tau, phi, thresholds, ablations;
                                       // policy.eps also floors the statistics

  void validate() const;  // throws std::invalid_argument on bad fields
};

// Arithmetic shared by the oracle and the quantized path. update_moments
// blends in double and narrows the stored moments to float; apply_adamw_update
// bias-corrects the (restored) float states in double and applies decoupled
// weight decay plus the Adam step.
void update_moments(std::span<const double> grad, std::span<float> m,
                    std::span<float> v, double beta1, double beta2);
void apply_adamw_update(std::span<double> params, std::span<const float> m_hat,
                        std::span<const float> v_hat, const AdamConfig& config,
                        long long t);

struct LayerOptState {
  quant::QuantizedState m_q;  // Linear mode
  quant::QuantizedState v_q;  // Log mode
  quant::BitWidth bits = quant::BitWidth::b16;
  long long steps_seen = 0;
};

struct StepTelemetry {
  bool refreshed = false;       // stats/EMA/policy recomputed this step
  policy::BitPolicy policy;     // latest computed policy (empty before first refresh)
  std::vector<stats::LayerStats> layer_stats;  // filled only when refreshed
  std::vector<double> m_quant_err_linf;  // per layer, |m_t - dequant(m_t)|_inf
  std::vector<double> v_quant_err_linf;
};

struct LayerMemory {
  std::size_t layer_id = 0;
  std::size_t n_params = 0;
  int bits = 32;
  std::size_t packed_bytes = 0;  // m + v including headers and scales
  std::size_t ideal_bytes = 0;   // 2 * n_params * bits / 8, codes only
};

struct MemoryReport {
  std::vector<LayerMemory> layers;
  std::size_t total_packed_bytes = 0;
  std::size_t total_ideal_bytes = 0;
  double average_bits = 0.0;       // parameter-weighted
  double saved_vs_32bit_pct = 0.0; // from the idealized accounting
  double saved_vs_8bit_pct = 0.0;
};

MemoryReport memory_report(std::span<const LayerOptState> states);

class QuantizedAdamW {
 public:
  QuantizedAdamW(std::vector<std::size_t> layer_sizes, AdamConfig config);

  /// t starts at 1 and must advance by exactly 1 per call. Gradients are
  /// checked for non-finite values before any state mutation.
  StepTelemetry step(std::vector<std::vector<double>>& params,
                     const std::vector<std::vector<double>>& grads,
                     long long t);

  const AdamConfig& config() const { return config_; }
  const stats::GlobalEma& ema() const { return ema_; }
  const std::vector<LayerOptState>& states() const { return states_; }
  const policy::BitPolicy& current_policy() const { return policy_; }
  MemoryReport memory() const { return memory_report(states_); }

 private:
  AdamConfig config_;
  stats::GlobalEma ema_;
  std::vector<LayerOptState> states_;
  policy::BitPolicy policy_;  // entries empty until the first refresh
};

class OracleAdamW {
 public:
  OracleAdamW(std::vector<std::size_t> layer_sizes, AdamConfig config);

  void step(std::vector<std::vector<double>>& params,
            const std::vector<std::vector<double>>& grads, long long t);

  const std::vector<std::vector<float>>& m() const { return m_; }
  const std::vector<std::vector<float>>& v() const { return v_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace stq::optim
