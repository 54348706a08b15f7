#pragma once

// Trace serialization and offline policy replay.
//
// A trace is a JSONL file, one record per measured step:
//
//   {"t": 50, "layers": [{"id": 0, "name": "w0", "n_params": 1024,
//                         "n": 0.1, "r": 1.2, "v": 0.01, "bits": 8}, ...]}
//
// "bits" is optional (present when the producer had already assigned
// widths). Reals are written with round-trip precision so read(write(x))
// is exact. Malformed lines are rejected with their line number; unknown
// fields are skipped and counted.
//
// replay() re-runs the decision chain EMA -> anneal -> score -> map over
// the recorded statistics, reproducing the per-step policies a live run
// would have produced from the same numbers.

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stquant/policy.hpp"
#include "stquant/stats.hpp"

namespace stq::trace {

struct TraceLayerEntry {
  std::size_t id = 0;
  std::string name;
  std::size_t n_params = 0;
  double n = 0.0;
  double r = 0.0;
  double v = 0.0;
  int bits = 0;  // 0 = not recorded; otherwise one of {4, 8, 16, 32}

  bool operator==(const TraceLayerEntry&) const = default;
};

struct TraceRecord {
  long long t = 0;
  std::vector<TraceLayerEntry> layers;  // sorted by id, no duplicates

  bool operator==(const TraceRecord&) const = default;
};

class TraceFormatError : public std::runtime_error {
 public:
  TraceFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Throws std::invalid_argument on invalid records (unsorted layers,
/// non-finite or negative stats, non-increasing t) before writing anything.
void write_jsonl(std::span<const TraceRecord> records,
                 const std::filesystem::path& path);

struct ReadReport {
  std::vector<TraceRecord> records;
  std::size_t unknown_field_count = 0;
};

/// Throws TraceFormatError (with the 1-based line number) on malformed
/// input; std::runtime_error if the file cannot be opened.
ReadReport read_jsonl(const std::filesystem::path& path);

/// Rows "step,layer_id,layer_name,score,bits" in (step, layer_id) order.
/// layer_names[i] names layer id i; missing names fall back to "layer<i>".
void write_csv_schedule(std::span<const policy::BitPolicy> history,
                        std::span<const std::string> layer_names,
                        const std::filesystem::path& path);

struct ReplayConfig {
  policy::PolicyConfig policy;
  double ema_alpha = stats::kDefaultEmaAlpha;
  long long update_freq = 1;           // process records with t mod U == 0 ...
  long long warmup_refresh_steps = 5;  // ... or t < this (matches the live cadence)
};

struct ReplayResult {
  std::vector<policy::BitPolicy> history;       // one per processed record
  std::vector<double> average_bits_per_step;    // parameter-weighted
  double average_bits = 0.0;        // unweighted mean over processed records
  double saved_vs_32bit_pct = 0.0;  // 100 * (1 - average_bits / 32)
  double saved_vs_8bit_pct = 0.0;
  stats::GlobalEma final_ema;
};

/// Pure function of (records, config). Throws std::invalid_argument on an
/// empty or inconsistent record set (mismatched layer ids across records,
/// non-increasing t) and when no record matches the replay cadence.
ReplayResult replay(std::span<const TraceRecord> records,
                    const ReplayConfig& config);

}  // namespace stq::trace
