#include "stquant/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>

#include "stquant/dist.hpp"

namespace stq::optim {

namespace {

// Parallelism cap: STQUANT_THREADS when set, hardware concurrency otherwise.
int thread_budget() {
  static const int cached = [] {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("STQUANT_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end != env && *end == '\0' && v >= 1) {
        hw = static_cast<unsigned>(v);
      }
    }
    return static_cast<int>(hw);
  }();
  return cached;
}

// Runs fn(first_index, stride) on up to thread_budget() threads over [0, n).
// Work units must touch disjoint state; results are independent of the
// thread count. Exceptions are rethrown on the caller thread.
template <typename Fn>
void parallel_strided(std::size_t n, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(thread_budget()), n);
  if (workers <= 1) {
    fn(std::size_t{0}, std::size_t{1});
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        fn(w, workers);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
}

}  // namespace

void AdamConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("adam config: lr must be positive");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("adam config: weight_decay must be nonnegative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam config: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) {
    throw std::invalid_argument("adam config: eps must be positive");
  }
  if (update_freq <= 0) {
    throw std::invalid_argument("adam config: update_freq must be positive");
  }
  if (block_size == 0) {
    throw std::invalid_argument("adam config: block_size must be positive");
  }
  if (!(ema_alpha > 0.0) || ema_alpha > 1.0) {
    throw std::invalid_argument("adam config: ema_alpha must lie in (0, 1]");
  }
  if (warmup_refresh_steps < 0) {
    throw std::invalid_argument("adam config: warmup_refresh_steps must be nonnegative");
  }
  if (workers <= 0) {
    throw std::invalid_argument("adam config: workers must be positive");
  }
  policy.validate();
}

void update_moments(std::span<const double> grad, std::span<float> m,
                    std::span<float> v, double beta1, double beta2) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    m[i] = static_cast<float>(beta1 * static_cast<double>(m[i]) +
                              (1.0 - beta1) * g);
    v[i] = static_cast<float>(beta2 * static_cast<double>(v[i]) +
                              (1.0 - beta2) * g * g);
  }
}

void apply_adamw_update(std::span<double> params, std::span<const float> m_hat,
                        std::span<const float> v_hat, const AdamConfig& config,
                        long long t) {
  const double m_div = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double v_div = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double m_corr = static_cast<double>(m_hat[i]) / m_div;
    const double v_corr = static_cast<double>(v_hat[i]) / v_div;
    params[i] = params[i] * decay -
                config.lr * m_corr / (std::sqrt(v_corr) + config.eps);
  }
}

namespace {

void check_step_inputs(const std::vector<std::vector<double>>& params,
                       const std::vector<std::vector<double>>& grads,
                       std::span<const std::size_t> sizes, long long t) {
  if (t < 1) {
    throw std::invalid_argument("step: t starts at 1");
  }
  if (params.size() != sizes.size() || grads.size() != sizes.size()) {
    throw std::invalid_argument("step: layer count mismatch");
  }
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    if (params[l].size() != sizes[l] || grads[l].size() != sizes[l]) {
      throw std::invalid_argument("step: layer " + std::to_string(l) +
                                  " shape mismatch");
    }
    for (double g : grads[l]) {
      if (!std::isfinite(g)) {
        throw std::invalid_argument("step: gradient contains a non-finite value");
      }
    }
  }
}

std::vector<std::size_t> layer_sizes_of(
    const std::vector<LayerOptState>& states) {
  std::vector<std::size_t> sizes(states.size());
  for (std::size_t l = 0; l < states.size(); ++l) {
    sizes[l] = states[l].m_q.length;
  }
  return sizes;
}

}  // namespace

MemoryReport memory_report(std::span<const LayerOptState> states) {
  if (states.empty()) {
    throw std::invalid_argument("memory_report: no layers");
  }
  MemoryReport report;
  report.layers.reserve(states.size());
  double weighted_bits = 0.0;
  double total_params = 0.0;
  for (std::size_t l = 0; l < states.size(); ++l) {
    LayerMemory lm;
    lm.layer_id = l;
    lm.n_params = states[l].m_q.length;
    lm.bits = quant::bit_count(states[l].bits);
    lm.packed_bytes = states[l].m_q.packed_bytes() + states[l].v_q.packed_bytes();
    lm.ideal_bytes = 2 * lm.n_params * static_cast<std::size_t>(lm.bits) / 8;
    report.total_packed_bytes += lm.packed_bytes;
    report.total_ideal_bytes += lm.ideal_bytes;
    weighted_bits += static_cast<double>(lm.n_params) * lm.bits;
    total_params += static_cast<double>(lm.n_params);
    report.layers.push_back(lm);
  }
  report.average_bits = weighted_bits / total_params;
  report.saved_vs_32bit_pct = (1.0 - report.average_bits / 32.0) * 100.0;
  report.saved_vs_8bit_pct = (1.0 - report.average_bits / 8.0) * 100.0;
  return report;
}

QuantizedAdamW::QuantizedAdamW(std::vector<std::size_t> layer_sizes,
                               AdamConfig config)
    : config_(std::move(config)) {
  config_.validate();
  if (layer_sizes.empty()) {
    throw std::invalid_argument("optimizer requires at least one layer");
  }
  states_.reserve(layer_sizes.size());
  const auto initial_bits =
      config_.policy.force_bits != 0
          ? quant::bit_width_from_int(config_.policy.force_bits)
          : quant::BitWidth::b16;
  for (std::size_t n : layer_sizes) {
    if (n == 0) {
      throw std::invalid_argument("optimizer layers must be non-empty");
    }
    LayerOptState st;
    st.bits = initial_bits;
    const std::vector<float> zeros(n, 0.0f);
    st.m_q = quant::quantize_state(zeros, st.bits, quant::QuantMode::Linear,
                                   config_.block_size);
    st.v_q = quant::quantize_state(zeros, st.bits, quant::QuantMode::Log,
                                   config_.block_size);
    states_.push_back(std::move(st));
  }
}

StepTelemetry QuantizedAdamW::step(std::vector<std::vector<double>>& params,
                                   const std::vector<std::vector<double>>& grads,
                                   long long t) {
  const auto sizes = layer_sizes_of(states_);
  check_step_inputs(params, grads, sizes, t);

  StepTelemetry telemetry;
  const bool refresh =
      (t % config_.update_freq == 0) || (t < config_.warmup_refresh_steps);
  if (refresh) {
    // Raw current-step gradients feed the statistics, before the moment
    // update below touches any state.
    const auto shards = dist::make_shards(grads, config_.workers);
    const auto all_stats =
        dist::all_reduce_stats(shards, config_.workers, config_.policy.eps);
    ema_.observe(stats::mean_stats(all_stats), config_.ema_alpha);
    policy_ = policy::compute_policy(all_stats, ema_, t, config_.policy);
    for (std::size_t l = 0; l < states_.size(); ++l) {
      states_[l].bits = policy_.entries[l].bits;
    }
    telemetry.refreshed = true;
    telemetry.layer_stats = all_stats;
  }
  telemetry.policy = policy_;
  telemetry.m_quant_err_linf.resize(states_.size(), 0.0);
  telemetry.v_quant_err_linf.resize(states_.size(), 0.0);

  // Layers are independent once the policy for this step is fixed; each
  // worker thread owns a disjoint stride of them plus its own scratch.
  parallel_strided(states_.size(), [&](std::size_t first, std::size_t stride) {
    std::vector<float> m_work, v_work, m_hat, v_hat;
    for (std::size_t l = first; l < states_.size(); l += stride) {
      LayerOptState& st = states_[l];
      const std::size_t n = sizes[l];
      m_work.resize(n);
      v_work.resize(n);
      quant::dequantize_into(st.m_q, m_work);
      quant::dequantize_into(st.v_q, v_work);
      update_moments(grads[l], m_work, v_work, config_.beta1, config_.beta2);

      st.m_q = quant::quantize_state(m_work, st.bits, quant::QuantMode::Linear,
                                     config_.block_size);
      st.v_q = quant::quantize_state(v_work, st.bits, quant::QuantMode::Log,
                                     config_.block_size);
      st.steps_seen = t;

      m_hat.resize(n);
      v_hat.resize(n);
      quant::dequantize_into(st.m_q, m_hat);
      quant::dequantize_into(st.v_q, v_hat);

      double m_err = 0.0, v_err = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        m_err = std::max(m_err,
                         std::fabs(static_cast<double>(m_work[i]) - m_hat[i]));
        v_err = std::max(v_err,
                         std::fabs(static_cast<double>(v_work[i]) - v_hat[i]));
      }
      telemetry.m_quant_err_linf[l] = m_err;
      telemetry.v_quant_err_linf[l] = v_err;

      apply_adamw_update(params[l], m_hat, v_hat, config_, t);
    }
  });
  return telemetry;
}

OracleAdamW::OracleAdamW(std::vector<std::size_t> layer_sizes, AdamConfig config)
    : config_(std::move(config)) {
  config_.validate();
  if (layer_sizes.empty()) {
    throw std::invalid_argument("optimizer requires at least one layer");
  }
  for (std::size_t n : layer_sizes) {
    if (n == 0) {
      throw std::invalid_argument("optimizer layers must be non-empty");
    }
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

void OracleAdamW::step(std::vector<std::vector<double>>& params,
                       const std::vector<std::vector<double>>& grads,
                       long long t) {
  std::vector<std::size_t> sizes(m_.size());
  for (std::size_t l = 0; l < m_.size(); ++l) sizes[l] = m_[l].size();
  check_step_inputs(params, grads, sizes, t);

  for (std::size_t l = 0; l < m_.size(); ++l) {
    update_moments(grads[l], m_[l], v_[l], config_.beta1, config_.beta2);
    apply_adamw_update(params[l], m_[l], v_[l], config_, t);
  }
}

}  // namespace stq::optim
