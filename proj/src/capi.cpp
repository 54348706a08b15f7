#include "stquant.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "stquant/harness.hpp"
#include "stquant/optim.hpp"
#include "stquant/policy.hpp"
#include "stquant/quant.hpp"
#include "stquant/trace.hpp"

struct stq_quantized {
  stq::quant::QuantizedState state;
};

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

thread_local std::string g_last_error;

template <typename Fn>
stq_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return STQ_OK;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return STQ_ERR_INVALID_ARGUMENT;
  } catch (const std::runtime_error& e) {
    g_last_error = e.what();
    return STQ_ERR_DATA;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return STQ_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return STQ_ERR_INTERNAL;
  }
}

void require(bool ok, const char* message) {
  if (!ok) throw std::invalid_argument(message);
}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) {
    throw std::runtime_error("failed writing: " + path.string());
  }
}

ordered_json memory_json(const stq::harness::RunRecord& rec) {
  ordered_json j;
  j["problem"] = rec.problem_name;
  j["optimizer"] = rec.arm;
  j["steps"] = rec.steps;
  j["seed"] = rec.seed;
  j["final_loss"] = rec.final_loss;
  j["average_bits"] = rec.memory.average_bits;
  j["total_packed_bytes"] = rec.memory.total_packed_bytes;
  j["total_ideal_bytes"] = rec.memory.total_ideal_bytes;
  j["saved_vs_32bit_pct"] = rec.memory.saved_vs_32bit_pct;
  j["saved_vs_8bit_pct"] = rec.memory.saved_vs_8bit_pct;
  ordered_json layers = ordered_json::array();
  for (const auto& lm : rec.memory.layers) {
    ordered_json lj;
    lj["layer_id"] = lm.layer_id;
    lj["name"] = lm.layer_id < rec.layer_names.size()
                     ? rec.layer_names[lm.layer_id]
                     : "layer" + std::to_string(lm.layer_id);
    lj["n_params"] = lm.n_params;
    lj["bits"] = lm.bits;
    lj["packed_bytes"] = lm.packed_bytes;
    lj["ideal_bytes"] = lm.ideal_bytes;
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

struct ResolvedTrain {
  std::unique_ptr<stq::harness::Problem> problem;
  stq::harness::Arm arm = stq::harness::Arm::StQuant;
  stq::harness::RunConfig run;
};

ResolvedTrain resolve_train(const stq_train_options& o) {
  require(o.problem != nullptr, "train: problem must be set");
  require(o.optimizer != nullptr, "train: optimizer must be set");
  require(o.steps >= 0, "train: steps must be nonnegative");

  ResolvedTrain r;
  r.arm = stq::harness::arm_from_string(o.optimizer);

  const std::string problem = o.problem;
  if (problem == "quadratic") {
    const std::size_t dim = o.dim > 0 ? static_cast<std::size_t>(o.dim) : 1000;
    const int layers = o.layers > 0 ? o.layers : 4;
    r.problem = stq::harness::make_quadratic(dim, 100.0, o.seed, layers);
  } else if (problem == "logistic") {
    const std::size_t dim = o.dim > 0 ? static_cast<std::size_t>(o.dim) : 50;
    r.problem = stq::harness::make_logistic(512, dim, o.seed);
  } else if (problem == "mlp") {
    stq::harness::MlpConfig cfg;
    if (o.layers > 0) cfg.layers = o.layers;
    if (o.dim > 0) cfg.in_dim = static_cast<std::size_t>(o.dim);
    r.problem = stq::harness::make_mlp(cfg, o.seed);
  } else {
    throw std::invalid_argument("unknown problem: " + problem);
  }

  r.run.steps = o.steps;
  r.run.seed = o.seed;
  require(o.lr > 0.0, "train: lr must be positive");
  r.run.adam.lr = o.lr;
  require(o.update_freq > 0, "train: update frequency must be positive");
  r.run.adam.update_freq = o.update_freq;
  require(o.block_size > 0, "train: block size must be positive");
  r.run.adam.block_size = o.block_size;
  require(o.workers > 0, "train: workers must be positive");
  r.run.adam.workers = o.workers;
  r.run.adam.policy.phi = o.phi;
  if (o.tau > 0.0) {
    r.run.adam.policy.tau = o.tau;
    r.run.auto_tau = false;
  } else {
    r.run.auto_tau = true;
  }
  return r;
}

ordered_json config_snapshot(const stq_train_options& o,
                             const stq::harness::RunConfig& resolved,
                             const stq::harness::Problem& problem,
                             const stq::harness::Arm arm) {
  const double tau = resolved.auto_tau
                         ? stq::policy::default_tau(problem.depth(),
                                                    problem.batch_size())
                         : resolved.adam.policy.tau;
  ordered_json j;
  j["problem"] = o.problem;
  j["optimizer"] = stq::harness::arm_name(arm);
  j["steps"] = resolved.steps;
  j["seed"] = resolved.seed;
  j["lr"] = resolved.adam.lr;
  j["weight_decay"] = resolved.adam.weight_decay;
  j["beta1"] = resolved.adam.beta1;
  j["beta2"] = resolved.adam.beta2;
  j["eps"] = resolved.adam.eps;
  j["update_freq"] = resolved.adam.update_freq;
  j["block_size"] = resolved.adam.block_size;
  j["workers"] = resolved.adam.workers;
  j["ema_alpha"] = resolved.adam.ema_alpha;
  j["warmup_refresh_steps"] = resolved.adam.warmup_refresh_steps;
  j["tau"] = tau;
  j["tau_auto"] = resolved.auto_tau;
  j["phi"] = resolved.adam.policy.phi;
  j["thresholds"] = resolved.adam.policy.thresholds;
  j["layers"] = ordered_json::array();
  for (const auto& spec : problem.layer_specs()) {
    ordered_json lj;
    lj["name"] = spec.name;
    lj["n_params"] = spec.n_params;
    j["layers"].push_back(std::move(lj));
  }
  return j;
}

std::string render_report(const fs::path& run_dir) {
  const fs::path memory_path = run_dir / "memory.json";
  if (!fs::exists(memory_path)) {
    throw std::runtime_error("no memory.json under " + run_dir.string());
  }
  std::ifstream in(memory_path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + memory_path.string());
  }
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid memory.json: " + std::string(e.what()));
  }

  std::ostringstream out;
  out << "run: " << j.value("problem", std::string("?")) << " / "
      << j.value("optimizer", std::string("?")) << "  (steps "
      << j.value("steps", 0ll) << ", seed " << j.value("seed", 0ull) << ")\n";
  out << '\n';
  char line[256];
  std::snprintf(line, sizeof(line), "%-4s %-10s %10s %6s %14s %14s %10s\n",
                "id", "layer", "params", "bits", "packed_bytes", "ideal_bytes",
                "overhead");
  out << line;
  for (const auto& lj : j.value("layers", ordered_json::array())) {
    const auto packed = lj.value("packed_bytes", std::uint64_t{0});
    const auto ideal = lj.value("ideal_bytes", std::uint64_t{0});
    const double overhead =
        ideal == 0 ? 0.0
                   : (static_cast<double>(packed) - static_cast<double>(ideal)) /
                         static_cast<double>(ideal) * 100.0;
    std::snprintf(line, sizeof(line), "%-4lld %-10s %10llu %6d %14llu %14llu %9.2f%%\n",
                  lj.value("layer_id", 0ll),
                  lj.value("name", std::string("?")).c_str(),
                  static_cast<unsigned long long>(lj.value("n_params", std::uint64_t{0})),
                  lj.value("bits", 0),
                  static_cast<unsigned long long>(packed),
                  static_cast<unsigned long long>(ideal), overhead);
    out << line;
  }
  const auto packed = j.value("total_packed_bytes", std::uint64_t{0});
  const auto ideal = j.value("total_ideal_bytes", std::uint64_t{0});
  const double overhead =
      ideal == 0 ? 0.0
                 : (static_cast<double>(packed) - static_cast<double>(ideal)) /
                       static_cast<double>(ideal) * 100.0;
  out << '\n';
  std::snprintf(line, sizeof(line),
                "total packed %llu bytes, ideal %llu bytes, overhead %.2f%%\n",
                static_cast<unsigned long long>(packed),
                static_cast<unsigned long long>(ideal), overhead);
  out << line;
  std::snprintf(line, sizeof(line),
                "average bits %.4f, saved vs 32-bit %.2f%%, saved vs 8-bit %.2f%%\n",
                j.value("average_bits", 0.0), j.value("saved_vs_32bit_pct", 0.0),
                j.value("saved_vs_8bit_pct", 0.0));
  out << line;
  return out.str();
}

}  // namespace

extern "C" {

const char* stq_version(void) { return "0.1.0"; }

const char* stq_last_error(void) { return g_last_error.c_str(); }

stq_status stq_quantize(const float* values, size_t length, int bits,
                        stq_mode mode, uint32_t block_size,
                        stq_quantized** out) {
  return guarded([&] {
    require(out != nullptr, "stq_quantize: out must not be null");
    require(values != nullptr || length == 0,
            "stq_quantize: values must not be null");
    require(mode == STQ_MODE_LINEAR || mode == STQ_MODE_LOG,
            "stq_quantize: invalid mode");
    const auto width = stq::quant::bit_width_from_int(bits);
    const auto qmode = mode == STQ_MODE_LINEAR ? stq::quant::QuantMode::Linear
                                               : stq::quant::QuantMode::Log;
    auto handle = std::make_unique<stq_quantized>();
    handle->state = stq::quant::quantize_state(
        std::span<const float>(values, length), width, qmode, block_size);
    *out = handle.release();
  });
}

stq_status stq_dequantize(const stq_quantized* state, float* out,
                          size_t length) {
  return guarded([&] {
    require(state != nullptr, "stq_dequantize: state must not be null");
    require(out != nullptr || length == 0, "stq_dequantize: out must not be null");
    require(length == state->state.length,
            "stq_dequantize: length does not match the quantized tensor");
    stq::quant::dequantize_into(state->state, std::span<float>(out, length));
  });
}

stq_status stq_quantized_packed_bytes(const stq_quantized* state,
                                      size_t* out_bytes) {
  return guarded([&] {
    require(state != nullptr && out_bytes != nullptr,
            "stq_quantized_packed_bytes: null argument");
    *out_bytes = state->state.packed_bytes();
  });
}

void stq_quantized_free(stq_quantized* state) { delete state; }

void stq_train_options_init(stq_train_options* opts) {
  if (opts == nullptr) return;
  opts->problem = "quadratic";
  opts->optimizer = "stquant";
  opts->steps = 500;
  opts->seed = 0;
  opts->layers = 0;
  opts->dim = 0;
  opts->lr = 0.01;
  opts->tau = 0.0;
  opts->phi = stq::policy::kDefaultPhi;
  opts->update_freq = 50;
  opts->block_size = stq::quant::kDefaultBlockSize;
  opts->workers = 1;
}

stq_status stq_train_run(const stq_train_options* opts, const char* out_dir) {
  return guarded([&] {
    require(opts != nullptr, "stq_train_run: options must not be null");
    require(out_dir != nullptr, "stq_train_run: out_dir must not be null");
    ResolvedTrain resolved = resolve_train(*opts);

    const auto record =
        stq::harness::run_experiment(*resolved.problem, resolved.arm, resolved.run);

    const fs::path dir(out_dir);
    fs::create_directories(dir);

    std::string loss_csv = "step,loss\n";
    for (std::size_t i = 0; i < record.loss_curve.size(); ++i) {
      loss_csv += std::to_string(i + 1);
      loss_csv += ',';
      loss_csv += format_double(record.loss_curve[i]);
      loss_csv += '\n';
    }
    write_text(dir / "loss.csv", loss_csv);

    if (resolved.arm != stq::harness::Arm::Oracle32) {
      stq::trace::write_csv_schedule(record.policy_history, record.layer_names,
                                     dir / "schedule.csv");
      stq::trace::write_jsonl(record.stats_trace, dir / "trace.jsonl");
    }

    write_text(dir / "memory.json", memory_json(record).dump(2) + "\n");
    write_text(dir / "config.json",
               config_snapshot(*opts, resolved.run, *resolved.problem,
                               resolved.arm)
                       .dump(2) +
                   "\n");
  });
}

void stq_replay_options_init(stq_replay_options* opts) {
  if (opts == nullptr) return;
  opts->tau = stq::policy::kDefaultBaseTau;
  opts->phi = stq::policy::kDefaultPhi;
  opts->alpha = stq::stats::kDefaultEmaAlpha;
  opts->update_freq = 1;
}

stq_status stq_replay_run(const stq_replay_options* opts,
                          const char* trace_path, const char* out_dir) {
  return guarded([&] {
    require(opts != nullptr, "stq_replay_run: options must not be null");
    require(trace_path != nullptr, "stq_replay_run: trace path must not be null");
    require(out_dir != nullptr, "stq_replay_run: out_dir must not be null");

    const auto read = stq::trace::read_jsonl(trace_path);
    stq::trace::ReplayConfig config;
    config.policy.tau = opts->tau;
    config.policy.phi = opts->phi;
    config.ema_alpha = opts->alpha;
    config.update_freq = opts->update_freq;
    const auto result = stq::trace::replay(read.records, config);

    const fs::path dir(out_dir);
    fs::create_directories(dir);

    std::vector<std::string> names;
    for (const auto& e : read.records.front().layers) {
      while (names.size() < e.id) names.push_back("layer" + std::to_string(names.size()));
      names.push_back(e.name);
    }
    stq::trace::write_csv_schedule(result.history, names, dir / "schedule.csv");

    ordered_json summary;
    summary["average_bits"] = result.average_bits;
    summary["saved_vs_32bit_pct"] = result.saved_vs_32bit_pct;
    summary["saved_vs_8bit_pct"] = result.saved_vs_8bit_pct;
    summary["unknown_field_warnings"] = read.unknown_field_count;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
  });
}

stq_status stq_report_render(const char* run_dir, char** out_text) {
  return guarded([&] {
    require(run_dir != nullptr, "stq_report_render: run_dir must not be null");
    require(out_text != nullptr, "stq_report_render: out_text must not be null");
    const std::string text = render_report(run_dir);
    char* buf = static_cast<char*>(std::malloc(text.size() + 1));
    if (buf == nullptr) throw std::bad_alloc();
    std::memcpy(buf, text.c_str(), text.size() + 1);
    *out_text = buf;
  });
}

void stq_string_free(char* text) { std::free(text); }

}  // extern "C"
