#pragma once

// Per-layer gradient statistics and their exponential moving averages.
//
// Everything downstream (bit-width scoring, distributed aggregation) is
// driven by three scalars per layer:
//
//   n = sqrt(mean(g^2))                  gradient RMS magnitude
//   r = sigma(|g|) / (mean(|g|) + eps)   coefficient of variation of |g|
//   v = mean(g^2)                        raw second moment
//
// All three derive from the moment triple (count, sum g^2, sum |g|), which is
// what workers exchange. Sums are carried as compensated double-double pairs
// so that splitting a tensor across workers and merging partial sums yields
// the same finalized statistics as a single pass, to the last bit in
// practice. layer_stats() is finalize(local_moments(g)) by construction.

#include <cstdint>
#include <span>

namespace stq::stats {

constexpr double kDefaultEps = 1e-8;
constexpr double kDefaultEmaAlpha = 0.1;

// Compensated scalar; the represented value is hi + lo with |lo| <= ulp(hi).
struct CompSum {
  double hi = 0.0;
  double lo = 0.0;
};

CompSum comp_add(CompSum acc, double x);
CompSum comp_join(CompSum a, CompSum b);
double comp_value(CompSum acc);

struct GradMoments {
  std::uint64_t count = 0;
  CompSum sum_sq;   // sum of g^2
  CompSum sum_abs;  // sum of |g|
};

GradMoments local_moments(std::span<const double> grad);
GradMoments merge_moments(const GradMoments& a, const GradMoments& b);

struct LayerStats {
  double n = 0.0;
  double r = 0.0;
  double v = 0.0;
};

/// Throws std::invalid_argument on zero count or non-finite sums.
LayerStats finalize_moments(const GradMoments& m, double eps = kDefaultEps);

/// Single-tensor path; throws std::invalid_argument on an empty gradient.
LayerStats layer_stats(std::span<const double> grad, double eps = kDefaultEps);

/// Unweighted mean of per-layer statistics; throws on an empty set.
LayerStats mean_stats(std::span<const LayerStats> layers);

// Cross-layer EMA of the mean statistics. The first observation seeds the
// averages directly; afterwards new = alpha * observed + (1 - alpha) * old.
struct GlobalEma {
  double n = 0.0;
  double r = 0.0;
  double v = 0.0;
  bool initialized = false;

  void observe(const LayerStats& mean, double alpha = kDefaultEmaAlpha);
};

// Position of a layer relative to the running averages. Boundary values
// count as "high" on both axes, so ties land in the better-protected zone.
enum class Quadrant : std::uint8_t {
  Critical,              // high n, high r
  MagnitudeDominant,     // high n, low r
  StructuralComplexity,  // low n, high r
  Redundant,             // low n, low r
};

Quadrant classify_quadrant(double n, double r, double n_ref, double r_ref);
const char* quadrant_name(Quadrant q);

}  // namespace stq::stats
