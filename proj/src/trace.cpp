#include "stquant/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace stq::trace {

namespace {

using ordered_json = nlohmann::ordered_json;

void validate_records(std::span<const TraceRecord> records) {
  long long prev_t = 0;
  bool have_prev = false;
  for (const TraceRecord& rec : records) {
    if (have_prev && rec.t <= prev_t) {
      throw std::invalid_argument("trace records must have strictly increasing t");
    }
    prev_t = rec.t;
    have_prev = true;
    bool have_id = false;
    std::size_t prev_id = 0;
    for (const TraceLayerEntry& e : rec.layers) {
      if (have_id && e.id <= prev_id) {
        throw std::invalid_argument("trace layers must be sorted by id without duplicates");
      }
      prev_id = e.id;
      have_id = true;
      if (!std::isfinite(e.n) || !std::isfinite(e.r) || !std::isfinite(e.v) ||
          e.n < 0.0 || e.r < 0.0 || e.v < 0.0) {
        throw std::invalid_argument("trace stats must be finite and nonnegative");
      }
      if (e.bits != 0 && e.bits != 4 && e.bits != 8 && e.bits != 16 &&
          e.bits != 32) {
        throw std::invalid_argument("trace bits must be one of 4, 8, 16, 32");
      }
    }
  }
}

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

void write_jsonl(std::span<const TraceRecord> records,
                 const std::filesystem::path& path) {
  validate_records(records);
  std::ofstream out(path, std::ios::binary);  // binary keeps LF line endings
  if (!out) {
    throw std::runtime_error("cannot open trace file for writing: " + path.string());
  }
  for (const TraceRecord& rec : records) {
    ordered_json j;
    j["t"] = rec.t;
    ordered_json layers = ordered_json::array();
    for (const TraceLayerEntry& e : rec.layers) {
      ordered_json le;
      le["id"] = e.id;
      le["name"] = e.name;
      le["n_params"] = e.n_params;
      le["n"] = e.n;
      le["r"] = e.r;
      le["v"] = e.v;
      if (e.bits != 0) {
        le["bits"] = e.bits;
      }
      layers.push_back(std::move(le));
    }
    j["layers"] = std::move(layers);
    out << j.dump() << '\n';
  }
  if (!out) {
    throw std::runtime_error("failed writing trace file: " + path.string());
  }
}

ReadReport read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open trace file: " + path.string());
  }
  ReadReport report;
  std::string line;
  std::size_t lineno = 0;
  long long prev_t = 0;
  bool have_prev = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw TraceFormatError(lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
      throw TraceFormatError(lineno, "record must be a JSON object");
    }
    TraceRecord rec;
    if (!j.contains("t") || !j["t"].is_number_integer()) {
      throw TraceFormatError(lineno, "missing or non-integer field \"t\"");
    }
    rec.t = j["t"].get<long long>();
    if (!j.contains("layers") || !j["layers"].is_array()) {
      throw TraceFormatError(lineno, "missing or non-array field \"layers\"");
    }
    for (const auto& [key, value] : j.items()) {
      if (key != "t" && key != "layers") {
        ++report.unknown_field_count;
      }
    }
    for (const auto& lj : j["layers"]) {
      if (!lj.is_object()) {
        throw TraceFormatError(lineno, "layer entry must be a JSON object");
      }
      TraceLayerEntry e;
      if (!lj.contains("id") || !lj["id"].is_number_integer() ||
          lj["id"].get<long long>() < 0) {
        throw TraceFormatError(lineno, "layer entry needs a nonnegative integer \"id\"");
      }
      e.id = lj["id"].get<std::size_t>();
      if (!lj.contains("name") || !lj["name"].is_string()) {
        throw TraceFormatError(lineno, "layer entry needs a string \"name\"");
      }
      e.name = lj["name"].get<std::string>();
      if (!lj.contains("n_params") || !lj["n_params"].is_number_integer() ||
          lj["n_params"].get<long long>() < 0) {
        throw TraceFormatError(lineno,
                               "layer entry needs a nonnegative integer \"n_params\"");
      }
      e.n_params = lj["n_params"].get<std::size_t>();
      for (const char* field : {"n", "r", "v"}) {
        if (!lj.contains(field) || !lj[field].is_number()) {
          throw TraceFormatError(lineno, std::string("layer entry needs a numeric \"") +
                                             field + "\"");
        }
      }
      e.n = lj["n"].get<double>();
      e.r = lj["r"].get<double>();
      e.v = lj["v"].get<double>();
      if (e.n < 0.0 || e.r < 0.0 || e.v < 0.0) {
        throw TraceFormatError(lineno, "layer stats must be nonnegative");
      }
      if (lj.contains("bits")) {
        if (!lj["bits"].is_number_integer()) {
          throw TraceFormatError(lineno, "\"bits\" must be an integer");
        }
        const long long b = lj["bits"].get<long long>();
        if (b != 4 && b != 8 && b != 16 && b != 32) {
          throw TraceFormatError(lineno, "\"bits\" must be one of 4, 8, 16, 32");
        }
        e.bits = static_cast<int>(b);
      }
      for (const auto& [key, value] : lj.items()) {
        if (key != "id" && key != "name" && key != "n_params" && key != "n" &&
            key != "r" && key != "v" && key != "bits") {
          ++report.unknown_field_count;
        }
      }
      rec.layers.push_back(std::move(e));
    }
    for (std::size_t i = 1; i < rec.layers.size(); ++i) {
      if (rec.layers[i].id <= rec.layers[i - 1].id) {
        throw TraceFormatError(lineno, "layers must be sorted by id without duplicates");
      }
    }
    if (have_prev && rec.t <= prev_t) {
      throw TraceFormatError(lineno, "record t must be strictly increasing");
    }
    prev_t = rec.t;
    have_prev = true;
    report.records.push_back(std::move(rec));
  }
  return report;
}

void write_csv_schedule(std::span<const policy::BitPolicy> history,
                        std::span<const std::string> layer_names,
                        const std::filesystem::path& path) {
  std::vector<const policy::BitPolicy*> ordered(history.size());
  for (std::size_t i = 0; i < history.size(); ++i) ordered[i] = &history[i];
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const policy::BitPolicy* a, const policy::BitPolicy* b) {
                     return a->step < b->step;
                   });
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open schedule file for writing: " + path.string());
  }
  out << "step,layer_id,layer_name,score,bits\n";
  for (const policy::BitPolicy* p : ordered) {
    for (const policy::PolicyEntry& e : p->entries) {
      const std::string name = e.layer_id < layer_names.size()
                                   ? layer_names[e.layer_id]
                                   : "layer" + std::to_string(e.layer_id);
      out << p->step << ',' << e.layer_id << ',' << name << ','
          << format_double(e.score) << ',' << quant::bit_count(e.bits) << '\n';
    }
  }
  if (!out) {
    throw std::runtime_error("failed writing schedule file: " + path.string());
  }
}

ReplayResult replay(std::span<const TraceRecord> records,
                    const ReplayConfig& config) {
  if (records.empty()) {
    throw std::invalid_argument("replay: trace is empty");
  }
  if (config.update_freq <= 0) {
    throw std::invalid_argument("replay: update_freq must be positive");
  }
  config.policy.validate();
  validate_records(records);  // covers ordering and finiteness

  const TraceRecord& first = records.front();
  if (first.layers.empty()) {
    throw std::invalid_argument("replay: records carry no layers");
  }
  for (const TraceRecord& rec : records) {
    if (rec.layers.size() != first.layers.size()) {
      throw std::invalid_argument("replay: records disagree on layer count");
    }
    for (std::size_t i = 0; i < rec.layers.size(); ++i) {
      if (rec.layers[i].id != first.layers[i].id ||
          rec.layers[i].n_params != first.layers[i].n_params) {
        throw std::invalid_argument("replay: records disagree on layer identity");
      }
    }
  }

  ReplayResult result;
  std::vector<stats::LayerStats> layer_stats(first.layers.size());
  for (const TraceRecord& rec : records) {
    const bool process = (rec.t % config.update_freq == 0) ||
                         (rec.t < config.warmup_refresh_steps);
    if (!process) continue;
    for (std::size_t i = 0; i < rec.layers.size(); ++i) {
      layer_stats[i] = {rec.layers[i].n, rec.layers[i].r, rec.layers[i].v};
    }
    result.final_ema.observe(stats::mean_stats(layer_stats), config.ema_alpha);
    policy::BitPolicy p =
        policy::compute_policy(layer_stats, result.final_ema, rec.t, config.policy);

    double weighted = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < p.entries.size(); ++i) {
      const double w = static_cast<double>(first.layers[i].n_params);
      weighted += w * quant::bit_count(p.entries[i].bits);
      total += w;
    }
    if (total <= 0.0) {
      throw std::invalid_argument("replay: records carry no parameters");
    }
    result.average_bits_per_step.push_back(weighted / total);
    result.history.push_back(std::move(p));
  }
  if (result.history.empty()) {
    throw std::invalid_argument("replay: no record matches the replay cadence");
  }
  result.average_bits =
      std::accumulate(result.average_bits_per_step.begin(),
                      result.average_bits_per_step.end(), 0.0) /
      static_cast<double>(result.average_bits_per_step.size());
  result.saved_vs_32bit_pct = (1.0 - result.average_bits / 32.0) * 100.0;
  result.saved_vs_8bit_pct = (1.0 - result.average_bits / 8.0) * 100.0;
  return result;
}

}  // namespace stq::trace
