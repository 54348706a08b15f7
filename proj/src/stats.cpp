#include "stquant/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stq::stats {

namespace {

// Error-free transform: s + err == a + b exactly (Knuth two-sum).
inline void two_sum(double a, double b, double& s, double& err) {
  s = a + b;
  const double bv = s - a;
  const double av = s - bv;
  err = (a - av) + (b - bv);
}

inline CompSum renormalize(double hi, double lo) {
  double s, err;
  two_sum(hi, lo, s, err);
  return {s, err};
}

}  // namespace

CompSum comp_add(CompSum acc, double x) {
  double s, err;
  two_sum(acc.hi, x, s, err);
  return renormalize(s, acc.lo + err);
}

CompSum comp_join(CompSum a, CompSum b) {
  return comp_add(comp_add(a, b.hi), b.lo);
}

double comp_value(CompSum acc) { return acc.hi + acc.lo; }

GradMoments local_moments(std::span<const double> grad) {
  GradMoments m;
  m.count = grad.size();
  for (double g : grad) {
    m.sum_sq = comp_add(m.sum_sq, g * g);
    m.sum_abs = comp_add(m.sum_abs, std::fabs(g));
  }
  return m;
}

GradMoments merge_moments(const GradMoments& a, const GradMoments& b) {
  GradMoments m;
  m.count = a.count + b.count;
  m.sum_sq = comp_join(a.sum_sq, b.sum_sq);
  m.sum_abs = comp_join(a.sum_abs, b.sum_abs);
  return m;
}

LayerStats finalize_moments(const GradMoments& m, double eps) {
  if (m.count == 0) {
    throw std::invalid_argument("layer statistics require at least one gradient element");
  }
  const double inv = 1.0 / static_cast<double>(m.count);
  const double mean_sq = comp_value(m.sum_sq) * inv;
  const double mean_abs = comp_value(m.sum_abs) * inv;
  if (!std::isfinite(mean_sq) || !std::isfinite(mean_abs)) {
    throw std::invalid_argument("layer statistics: gradient moments are not finite");
  }
  LayerStats s;
  s.v = mean_sq;
  s.n = std::sqrt(mean_sq);
  // Population variance of |g| via the moment identity, clamped against
  // cancellation for near-constant magnitudes.
  const double var = std::max(mean_sq - mean_abs * mean_abs, 0.0);
  s.r = std::sqrt(var) / (mean_abs + eps);
  return s;
}

LayerStats layer_stats(std::span<const double> grad, double eps) {
  return finalize_moments(local_moments(grad), eps);
}

LayerStats mean_stats(std::span<const LayerStats> layers) {
  if (layers.empty()) {
    throw std::invalid_argument("mean_stats: empty layer set");
  }
  LayerStats out;
  for (const LayerStats& s : layers) {
    out.n += s.n;
    out.r += s.r;
    out.v += s.v;
  }
  const double inv = 1.0 / static_cast<double>(layers.size());
  out.n *= inv;
  out.r *= inv;
  out.v *= inv;
  return out;
}

void GlobalEma::observe(const LayerStats& mean, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw std::invalid_argument("ema alpha must lie in (0, 1]");
  }
  if (!initialized) {
    n = mean.n;
    r = mean.r;
    v = mean.v;
    initialized = true;
    return;
  }
  n = alpha * mean.n + (1.0 - alpha) * n;
  r = alpha * mean.r + (1.0 - alpha) * r;
  v = alpha * mean.v + (1.0 - alpha) * v;
}

Quadrant classify_quadrant(double n, double r, double n_ref, double r_ref) {
  const bool high_n = n >= n_ref;
  const bool high_r = r >= r_ref;
  if (high_n) {
    return high_r ? Quadrant::Critical : Quadrant::MagnitudeDominant;
  }
  return high_r ? Quadrant::StructuralComplexity : Quadrant::Redundant;
}

const char* quadrant_name(Quadrant q) {
  switch (q) {
    case Quadrant::Critical: return "critical";
    case Quadrant::MagnitudeDominant: return "magnitude_dominant";
    case Quadrant::StructuralComplexity: return "structural_complexity";
    case Quadrant::Redundant: return "redundant";
  }
  return "unknown";
}

}  // namespace stq::stats
