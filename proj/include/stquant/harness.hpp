#pragma once

// Desk-scale training problems with analytic gradients, and the experiment
// runner that trains them with either the full-precision oracle or the
// quantized-state optimizer.
//
// Problems expose their parameters as a list of named policy layers (for
// the MLP every weight matrix and bias vector is its own layer). Gradients
// are exact and validated against central finite differences. All
// randomness is seeded; two runs with the same configuration produce
// identical records, and all optimizer arms of one experiment share the
// problem seed so they see identical data.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "stquant/optim.hpp"
#include "stquant/policy.hpp"
#include "stquant/trace.hpp"

namespace stq::harness {

inline constexpr long long kFullBatch = -1;

struct LayerSpec {
  std::string name;
  std::size_t n_params = 0;
};

class Problem {
 public:
  virtual ~Problem() = default;

  virtual const std::string& name() const = 0;
  virtual const std::vector<LayerSpec>& layer_specs() const = 0;
  virtual std::vector<std::vector<double>> initial_params() const = 0;

  // Inputs to the depth/batch scaling of the default annealing constant.
  virtual int depth() const = 0;
  virtual int batch_size() const = 0;

  /// batch_index >= 0 selects a deterministic minibatch (full-batch
  /// problems ignore it); kFullBatch evaluates the complete objective.
  virtual double loss(const std::vector<std::vector<double>>& params,
                      long long batch_index) const = 0;

  /// Returns the loss and fills grads (resized to the layer layout).
  virtual double loss_and_grad(const std::vector<std::vector<double>>& params,
                               long long batch_index,
                               std::vector<std::vector<double>>& grads) const = 0;

  std::vector<std::vector<double>> grad(
      const std::vector<std::vector<double>>& params, long long batch_index) const;

  std::vector<std::size_t> layer_sizes() const;
  std::vector<std::string> layer_names() const;
  std::size_t total_params() const;
};

/// f(theta) = 1/2 theta^T A theta - b^T theta with A block-diagonal over the
/// policy layers. Eigenvalues are log-spaced from 1 to condition_number and
/// assigned to layers in contiguous slices, so layers see different
/// curvature scales. Each block is a Householder rotation of its diagonal
/// slice, giving O(dim) exact matvecs.
std::unique_ptr<Problem> make_quadratic(std::size_t dim, double condition_number,
                                        std::uint64_t seed, int num_layers = 4);

/// Binary logistic regression on noisy linearly separable data; two policy
/// layers (weights, bias); loss = mean softplus(-y z) + l2/2 ||w||^2.
std::unique_ptr<Problem> make_logistic(std::size_t n_samples, std::size_t dim,
                                       std::uint64_t seed, double l2 = 1e-4);

struct MlpConfig {
  int layers = 12;  // tanh layers before the softmax head
  std::size_t width = 96;
  std::size_t in_dim = 32;
  std::size_t n_classes = 8;
  std::size_t n_samples = 512;
  std::size_t batch_size = 32;
  double weight_scale = 1.0;  // multiplies the 1/sqrt(fan_in) init
};

std::unique_ptr<Problem> make_mlp(const MlpConfig& config, std::uint64_t seed);
std::unique_ptr<Problem> make_mlp(int layers, std::size_t width,
                                  std::uint64_t seed);

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checks = 0;
  bool passed = false;
};

/// Central-difference directional derivative against the analytic gradient
/// at num_points random parameter points (random unit directions, varying
/// minibatches).
GradCheckResult gradient_check(const Problem& problem, std::uint64_t seed,
                               int num_points, double tolerance = 1e-4);

enum class Arm { Oracle32, Fixed8, StQuant };

const char* arm_name(Arm arm);
Arm arm_from_string(const std::string& s);  // throws on unknown name

struct RunConfig {
  long long steps = 500;
  std::uint64_t seed = 0;
  optim::AdamConfig adam;
  bool auto_tau = true;  // overwrite adam.policy.tau from depth and batch
};

struct RunRecord {
  std::string problem_name;
  std::string arm;
  long long steps = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> layer_names;
  std::vector<std::size_t> layer_sizes;
  std::vector<double> loss_curve;  // minibatch loss before each step
  double final_loss = 0.0;         // full objective after the last step
  std::vector<policy::BitPolicy> policy_history;   // refresh steps only
  std::vector<trace::TraceRecord> stats_trace;     // refresh steps only
  optim::MemoryReport memory;                      // state of the last step
  double wall_seconds = 0.0;  // measured; excluded from serialized artifacts
};

/// Trains the problem from its seeded initial point. The problem seed
/// governs data and initialization, so arms differ only in how optimizer
/// state is represented. fixed8 pins every layer to 8 bits through the
/// policy override; oracle32 runs the full-precision reference.
RunRecord run_experiment(const Problem& problem, Arm arm,
                         const RunConfig& config);

}  // namespace stq::harness
