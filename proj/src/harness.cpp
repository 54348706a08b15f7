#include "stquant/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

#include "stquant/dist.hpp"

namespace stq::harness {

std::vector<std::vector<double>> Problem::grad(
    const std::vector<std::vector<double>>& params, long long batch_index) const {
  std::vector<std::vector<double>> grads;
  loss_and_grad(params, batch_index, grads);
  return grads;
}

std::vector<std::size_t> Problem::layer_sizes() const {
  std::vector<std::size_t> sizes;
  sizes.reserve(layer_specs().size());
  for (const LayerSpec& s : layer_specs()) sizes.push_back(s.n_params);
  return sizes;
}

std::vector<std::string> Problem::layer_names() const {
  std::vector<std::string> names;
  names.reserve(layer_specs().size());
  for (const LayerSpec& s : layer_specs()) names.push_back(s.name);
  return names;
}

std::size_t Problem::total_params() const {
  std::size_t total = 0;
  for (const LayerSpec& s : layer_specs()) total += s.n_params;
  return total;
}

namespace {

void check_params_shape(const std::vector<LayerSpec>& specs,
                        const std::vector<std::vector<double>>& params) {
  if (params.size() != specs.size()) {
    throw std::invalid_argument("params layer count does not match the problem");
  }
  for (std::size_t l = 0; l < specs.size(); ++l) {
    if (params[l].size() != specs[l].n_params) {
      throw std::invalid_argument("params shape mismatch in layer " + specs[l].name);
    }
  }
}

void resize_like(const std::vector<LayerSpec>& specs,
                 std::vector<std::vector<double>>& grads) {
  grads.resize(specs.size());
  for (std::size_t l = 0; l < specs.size(); ++l) {
    grads[l].assign(specs[l].n_params, 0.0);
  }
}

double stable_softplus(double x) {  // log(1 + e^x)
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {  // 1 / (1 + e^{-x})
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C (m x p) = A (m x n) * B (n x p), all row-major.
void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t n, std::size_t p) {
  std::fill(c, c + m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a[i * n + k];
      const double* brow = b + k * p;
      double* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C (n x p) = A^T (A is m x n) * B (m x p).
void matmul_at_b(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t p) {
  std::fill(c, c + n * p, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    const double* brow = b + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = arow[k];
      double* crow = c + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C (m x n) = A (m x p) * B^T (B is n x p).
void matmul_a_bt(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * p;
      double acc = 0.0;
      for (std::size_t k = 0; k < p; ++k) acc += arow[k] * brow[k];
      c[i * n + j] = acc;
    }
  }
}

class QuadraticProblem final : public Problem {
 public:
  QuadraticProblem(std::size_t dim, double condition_number, std::uint64_t seed,
                   int num_layers)
      : name_("quadratic") {
    if (dim == 0) {
      throw std::invalid_argument("quadratic: dim must be positive");
    }
    if (!(condition_number >= 1.0)) {
      throw std::invalid_argument("quadratic: condition number must be >= 1");
    }
    if (num_layers <= 0) {
      throw std::invalid_argument("quadratic: num_layers must be positive");
    }
    const int layers = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(num_layers), dim));
    depth_ = layers;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<double> eigs(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      eigs[i] = dim == 1 ? 1.0
                         : std::pow(condition_number,
                                    static_cast<double>(i) /
                                        static_cast<double>(dim - 1));
    }

    blocks_.resize(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l) {
      const auto [begin, end] = dist::shard_range(dim, layers, l);
      Block& blk = blocks_[static_cast<std::size_t>(l)];
      blk.eigs.assign(eigs.begin() + static_cast<std::ptrdiff_t>(begin),
                      eigs.begin() + static_cast<std::ptrdiff_t>(end));
      const std::size_t bdim = end - begin;
      blk.u.resize(bdim);
      double norm_sq = 0.0;
      do {
        for (double& x : blk.u) {
          x = normal(rng);
        }
        norm_sq = 0.0;
        for (double x : blk.u) norm_sq += x * x;
      } while (norm_sq == 0.0);
      const double inv_norm = 1.0 / std::sqrt(norm_sq);
      for (double& x : blk.u) x *= inv_norm;
      blk.b.resize(bdim);
      for (double& x : blk.b) x = normal(rng);
      specs_.push_back({"block" + std::to_string(l), bdim});
    }

    init_params_.resize(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      init_params_[l].resize(blocks_[l].u.size());
      for (double& x : init_params_[l]) x = normal(rng);
    }
  }

  const std::string& name() const override { return name_; }
  const std::vector<LayerSpec>& layer_specs() const override { return specs_; }
  std::vector<std::vector<double>> initial_params() const override {
    return init_params_;
  }
  int depth() const override { return depth_; }
  int batch_size() const override { return policy::kDefaultBaseBatch; }

  double loss(const std::vector<std::vector<double>>& params,
              long long batch_index) const override {
    std::vector<std::vector<double>> scratch;
    return loss_and_grad(params, batch_index, scratch);
  }

  double loss_and_grad(const std::vector<std::vector<double>>& params,
                       long long /*batch_index*/,
                       std::vector<std::vector<double>>& grads) const override {
    check_params_shape(specs_, params);
    resize_like(specs_, grads);
    double total = 0.0;
    std::vector<double> ax;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& blk = blocks_[l];
      const std::vector<double>& x = params[l];
      apply_block(blk, x, ax);
      double quad = 0.0, lin = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        quad += x[i] * ax[i];
        lin += blk.b[i] * x[i];
        grads[l][i] = ax[i] - blk.b[i];
      }
      total += 0.5 * quad - lin;
    }
    return total;
  }

  /// Largest eigenvalue of the full block-diagonal matrix via power
  /// iteration on the matvec; used by tests to confirm the conditioning.
  double power_iteration_max_eig(int iters) const {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> x(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      x[l].resize(blocks_[l].u.size());
      for (double& e : x[l]) e = normal(rng);
    }
    std::vector<double> ax;
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
      double norm_sq = 0.0;
      for (auto& xl : x) {
        for (double e : xl) norm_sq += e * e;
      }
      const double inv = 1.0 / std::sqrt(norm_sq);
      for (auto& xl : x) {
        for (double& e : xl) e *= inv;
      }
      lambda = 0.0;
      for (std::size_t l = 0; l < blocks_.size(); ++l) {
        apply_block(blocks_[l], x[l], ax);
        for (std::size_t i = 0; i < ax.size(); ++i) {
          lambda += x[l][i] * ax[i];
        }
        x[l].assign(ax.begin(), ax.end());
      }
    }
    return lambda;
  }

 private:
  struct Block {
    std::vector<double> eigs;
    std::vector<double> u;  // Householder unit vector
    std::vector<double> b;
  };

  // A = H D H with H = I - 2 u u^T, so A x = H(D(Hx)) in O(dim).
  static void apply_block(const Block& blk, std::span<const double> x,
                          std::vector<double>& out) {
    const std::size_t n = x.size();
    out.resize(n);
    double ux = 0.0;
    for (std::size_t i = 0; i < n; ++i) ux += blk.u[i] * x[i];
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = (x[i] - 2.0 * ux * blk.u[i]) * blk.eigs[i];
    }
    double uz = 0.0;
    for (std::size_t i = 0; i < n; ++i) uz += blk.u[i] * out[i];
    for (std::size_t i = 0; i < n; ++i) out[i] -= 2.0 * uz * blk.u[i];
  }

  std::string name_;
  std::vector<LayerSpec> specs_;
  std::vector<Block> blocks_;
  std::vector<std::vector<double>> init_params_;
  int depth_ = 1;
};

class LogisticProblem final : public Problem {
 public:
  LogisticProblem(std::size_t n_samples, std::size_t dim, std::uint64_t seed,
                  double l2)
      : name_("logistic"), n_(n_samples), dim_(dim), l2_(l2) {
    if (n_samples == 0 || dim == 0) {
      throw std::invalid_argument("logistic: n_samples and dim must be positive");
    }
    if (l2 < 0.0) {
      throw std::invalid_argument("logistic: l2 must be nonnegative");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<double> w_true(dim);
    double norm_sq = 0.0;
    for (double& x : w_true) {
      x = normal(rng);
      norm_sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : w_true) x *= inv;

    x_.resize(n_ * dim_);
    y_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double margin = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double xv = normal(rng);
        x_[i * dim_ + j] = xv;
        margin += xv * w_true[j];
      }
      y_[i] = margin + 0.3 * normal(rng) > 0.0 ? 1.0 : -1.0;
    }
    specs_ = {{"weights", dim_}, {"bias", 1}};
  }

  const std::string& name() const override { return name_; }
  const std::vector<LayerSpec>& layer_specs() const override { return specs_; }
  std::vector<std::vector<double>> initial_params() const override {
    return {std::vector<double>(dim_, 0.0), std::vector<double>(1, 0.0)};
  }
  int depth() const override { return 1; }
  int batch_size() const override { return policy::kDefaultBaseBatch; }

  double loss(const std::vector<std::vector<double>>& params,
              long long batch_index) const override {
    std::vector<std::vector<double>> scratch;
    return loss_and_grad(params, batch_index, scratch);
  }

  double loss_and_grad(const std::vector<std::vector<double>>& params,
                       long long /*batch_index*/,
                       std::vector<std::vector<double>>& grads) const override {
    check_params_shape(specs_, params);
    resize_like(specs_, grads);
    const std::vector<double>& w = params[0];
    const double bias = params[1][0];
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double z = bias;
      for (std::size_t j = 0; j < dim_; ++j) z += x_[i * dim_ + j] * w[j];
      const double yz = y_[i] * z;
      total += stable_softplus(-yz);
      const double coeff = -y_[i] * stable_sigmoid(-yz) * inv_n;
      for (std::size_t j = 0; j < dim_; ++j) {
        grads[0][j] += coeff * x_[i * dim_ + j];
      }
      grads[1][0] += coeff;
    }
    total *= inv_n;
    double w_norm_sq = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      w_norm_sq += w[j] * w[j];
      grads[0][j] += l2_ * w[j];
    }
    return total + 0.5 * l2_ * w_norm_sq;
  }

 private:
  std::string name_;
  std::size_t n_;
  std::size_t dim_;
  double l2_;
  std::vector<double> x_;
  std::vector<double> y_;
  std::vector<LayerSpec> specs_;
};

class MlpProblem final : public Problem {
 public:
  MlpProblem(const MlpConfig& cfg, std::uint64_t seed)
      : name_("mlp"), cfg_(cfg) {
    if (cfg.layers <= 0 || cfg.width == 0 || cfg.in_dim == 0 ||
        cfg.n_classes < 2 || cfg.n_samples == 0 || cfg.batch_size == 0) {
      throw std::invalid_argument("mlp: invalid configuration");
    }
    if (cfg.batch_size > cfg.n_samples) {
      throw std::invalid_argument("mlp: batch_size cannot exceed n_samples");
    }

    dims_.push_back(cfg.in_dim);
    for (int l = 0; l < cfg.layers; ++l) dims_.push_back(cfg.width);
    dims_.push_back(cfg.n_classes);

    const std::size_t n_weight_layers = dims_.size() - 1;
    for (std::size_t k = 0; k < n_weight_layers; ++k) {
      const bool head = k + 1 == n_weight_layers;
      const std::string suffix =
          head ? "_head" : std::to_string(k + 1);
      specs_.push_back({"w" + suffix, dims_[k] * dims_[k + 1]});
      specs_.push_back({"b" + suffix, dims_[k + 1]});
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    init_params_.resize(specs_.size());
    for (std::size_t k = 0; k < n_weight_layers; ++k) {
      const double scale = cfg.weight_scale / std::sqrt(static_cast<double>(dims_[k]));
      auto& w = init_params_[2 * k];
      w.resize(dims_[k] * dims_[k + 1]);
      for (double& x : w) x = scale * normal(rng);
      init_params_[2 * k + 1].assign(dims_[k + 1], 0.0);
    }

    std::vector<double> centers(cfg.n_classes * cfg.in_dim);
    for (double& x : centers) x = 2.0 * normal(rng);
    x_.resize(cfg.n_samples * cfg.in_dim);
    y_.resize(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
      const std::size_t cls = i % cfg.n_classes;
      y_[i] = cls;
      for (std::size_t j = 0; j < cfg.in_dim; ++j) {
        x_[i * cfg.in_dim + j] = centers[cls * cfg.in_dim + j] + normal(rng);
      }
    }
  }

  const std::string& name() const override { return name_; }
  const std::vector<LayerSpec>& layer_specs() const override { return specs_; }
  std::vector<std::vector<double>> initial_params() const override {
    return init_params_;
  }
  int depth() const override { return cfg_.layers; }
  int batch_size() const override { return static_cast<int>(cfg_.batch_size); }

  double loss(const std::vector<std::vector<double>>& params,
              long long batch_index) const override {
    return forward_backward(params, batch_index, nullptr);
  }

  double loss_and_grad(const std::vector<std::vector<double>>& params,
                       long long batch_index,
                       std::vector<std::vector<double>>& grads) const override {
    return forward_backward(params, batch_index, &grads);
  }

 private:
  std::vector<std::size_t> batch_indices(long long batch_index) const {
    std::vector<std::size_t> idx;
    if (batch_index == kFullBatch) {
      idx.resize(cfg_.n_samples);
      for (std::size_t i = 0; i < cfg_.n_samples; ++i) idx[i] = i;
      return idx;
    }
    if (batch_index < 0) {
      throw std::invalid_argument("mlp: negative batch index");
    }
    idx.resize(cfg_.batch_size);
    const std::size_t start =
        (static_cast<std::size_t>(batch_index) * cfg_.batch_size) % cfg_.n_samples;
    for (std::size_t j = 0; j < cfg_.batch_size; ++j) {
      idx[j] = (start + j) % cfg_.n_samples;
    }
    return idx;
  }

  double forward_backward(const std::vector<std::vector<double>>& params,
                          long long batch_index,
                          std::vector<std::vector<double>>* grads) const {
    check_params_shape(specs_, params);
    const auto idx = batch_indices(batch_index);
    const std::size_t bsz = idx.size();
    const std::size_t n_weight_layers = dims_.size() - 1;

    // activations[0] is the input batch; activations[k] the output of layer k.
    std::vector<std::vector<double>> activations(n_weight_layers + 1);
    activations[0].resize(bsz * dims_[0]);
    for (std::size_t i = 0; i < bsz; ++i) {
      const double* row = &x_[idx[i] * cfg_.in_dim];
      std::copy(row, row + cfg_.in_dim, &activations[0][i * dims_[0]]);
    }

    for (std::size_t k = 0; k < n_weight_layers; ++k) {
      const std::size_t din = dims_[k], dout = dims_[k + 1];
      auto& z = activations[k + 1];
      z.resize(bsz * dout);
      matmul(activations[k].data(), params[2 * k].data(), z.data(), bsz, din, dout);
      const std::vector<double>& bias = params[2 * k + 1];
      for (std::size_t i = 0; i < bsz; ++i) {
        for (std::size_t j = 0; j < dout; ++j) z[i * dout + j] += bias[j];
      }
      if (k + 1 != n_weight_layers) {
        for (double& x : z) x = std::tanh(x);
      }
    }

    // Softmax cross-entropy on the logits.
    const std::size_t nc = cfg_.n_classes;
    std::vector<double>& logits = activations[n_weight_layers];
    double total = 0.0;
    std::vector<double> dlogits;
    if (grads != nullptr) dlogits.resize(bsz * nc);
    for (std::size_t i = 0; i < bsz; ++i) {
      double* row = &logits[i * nc];
      const double mx = *std::max_element(row, row + nc);
      double sum = 0.0;
      for (std::size_t c = 0; c < nc; ++c) sum += std::exp(row[c] - mx);
      const double log_z = mx + std::log(sum);
      total += log_z - row[y_[idx[i]]];
      if (grads != nullptr) {
        for (std::size_t c = 0; c < nc; ++c) {
          dlogits[i * nc + c] =
              (std::exp(row[c] - log_z) - (c == y_[idx[i]] ? 1.0 : 0.0)) /
              static_cast<double>(bsz);
        }
      }
    }
    total /= static_cast<double>(bsz);
    if (grads == nullptr) return total;

    resize_like(specs_, *grads);
    std::vector<double> delta = std::move(dlogits);
    for (std::size_t k = n_weight_layers; k-- > 0;) {
      const std::size_t din = dims_[k], dout = dims_[k + 1];
      matmul_at_b(activations[k].data(), delta.data(), (*grads)[2 * k].data(),
                  bsz, din, dout);
      auto& db = (*grads)[2 * k + 1];
      for (std::size_t i = 0; i < bsz; ++i) {
        for (std::size_t j = 0; j < dout; ++j) db[j] += delta[i * dout + j];
      }
      if (k > 0) {
        std::vector<double> prev(bsz * din);
        matmul_a_bt(delta.data(), params[2 * k].data(), prev.data(), bsz, din,
                    dout);
        const std::vector<double>& act = activations[k];
        for (std::size_t i = 0; i < prev.size(); ++i) {
          prev[i] *= 1.0 - act[i] * act[i];  // tanh'
        }
        delta = std::move(prev);
      }
    }
    return total;
  }

  std::string name_;
  MlpConfig cfg_;
  std::vector<std::size_t> dims_;
  std::vector<LayerSpec> specs_;
  std::vector<std::vector<double>> init_params_;
  std::vector<double> x_;
  std::vector<std::size_t> y_;
};

}  // namespace

std::unique_ptr<Problem> make_quadratic(std::size_t dim, double condition_number,
                                        std::uint64_t seed, int num_layers) {
  return std::make_unique<QuadraticProblem>(dim, condition_number, seed,
                                            num_layers);
}

std::unique_ptr<Problem> make_logistic(std::size_t n_samples, std::size_t dim,
                                       std::uint64_t seed, double l2) {
  return std::make_unique<LogisticProblem>(n_samples, dim, seed, l2);
}

std::unique_ptr<Problem> make_mlp(const MlpConfig& config, std::uint64_t seed) {
  return std::make_unique<MlpProblem>(config, seed);
}

std::unique_ptr<Problem> make_mlp(int layers, std::size_t width,
                                  std::uint64_t seed) {
  MlpConfig cfg;
  cfg.layers = layers;
  cfg.width = width;
  return std::make_unique<MlpProblem>(cfg, seed);
}

GradCheckResult gradient_check(const Problem& problem, std::uint64_t seed,
                               int num_points, double tolerance) {
  if (num_points <= 0) {
    throw std::invalid_argument("gradient_check: num_points must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto base = problem.initial_params();
  constexpr double kStep = 1e-5;

  GradCheckResult result;
  result.checks = num_points;
  for (int p = 0; p < num_points; ++p) {
    auto params = base;
    for (auto& layer : params) {
      for (double& x : layer) x += 0.1 * normal(rng);
    }
    const long long batch = p;
    const auto grads = problem.grad(params, batch);

    auto dir = params;
    double norm_sq = 0.0;
    for (auto& layer : dir) {
      for (double& x : layer) {
        x = normal(rng);
        norm_sq += x * x;
      }
    }
    const double inv_norm = 1.0 / std::sqrt(norm_sq);

    double analytic = 0.0;
    for (std::size_t l = 0; l < grads.size(); ++l) {
      for (std::size_t i = 0; i < grads[l].size(); ++i) {
        analytic += grads[l][i] * dir[l][i] * inv_norm;
      }
    }

    auto plus = params;
    auto minus = params;
    for (std::size_t l = 0; l < params.size(); ++l) {
      for (std::size_t i = 0; i < params[l].size(); ++i) {
        const double d = dir[l][i] * inv_norm * kStep;
        plus[l][i] += d;
        minus[l][i] -= d;
      }
    }
    const double fd =
        (problem.loss(plus, batch) - problem.loss(minus, batch)) / (2.0 * kStep);
    const double rel = std::fabs(fd - analytic) /
                       std::max({std::fabs(fd), std::fabs(analytic), 1e-8});
    result.max_rel_err = std::max(result.max_rel_err, rel);
  }
  result.passed = result.max_rel_err <= tolerance;
  return result;
}

const char* arm_name(Arm arm) {
  switch (arm) {
    case Arm::Oracle32: return "oracle32";
    case Arm::Fixed8: return "fixed8";
    case Arm::StQuant: return "stquant";
  }
  return "unknown";
}

Arm arm_from_string(const std::string& s) {
  if (s == "oracle32") return Arm::Oracle32;
  if (s == "fixed8") return Arm::Fixed8;
  if (s == "stquant") return Arm::StQuant;
  throw std::invalid_argument("unknown optimizer arm: " + s);
}

RunRecord run_experiment(const Problem& problem, Arm arm,
                         const RunConfig& config) {
  if (config.steps < 0) {
    throw std::invalid_argument("run_experiment: steps must be nonnegative");
  }
  const auto start = std::chrono::steady_clock::now();

  RunRecord rec;
  rec.problem_name = problem.name();
  rec.arm = arm_name(arm);
  rec.steps = config.steps;
  rec.seed = config.seed;
  rec.layer_names = problem.layer_names();
  rec.layer_sizes = problem.layer_sizes();

  optim::AdamConfig adam = config.adam;
  if (config.auto_tau) {
    adam.policy.tau = policy::default_tau(problem.depth(), problem.batch_size());
  }
  if (arm == Arm::Fixed8) {
    adam.policy.force_bits = 8;
  }

  auto params = problem.initial_params();
  const auto sizes = problem.layer_sizes();
  std::vector<std::vector<double>> grads;
  rec.loss_curve.reserve(static_cast<std::size_t>(config.steps));

  if (arm == Arm::Oracle32) {
    optim::OracleAdamW opt(sizes, adam);
    for (long long t = 1; t <= config.steps; ++t) {
      const double loss = problem.loss_and_grad(params, t - 1, grads);
      rec.loss_curve.push_back(loss);
      opt.step(params, grads, t);
    }
    // Plain float arrays: two states of 4 bytes per parameter, no metadata.
    double weighted = 0.0, total = 0.0;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      optim::LayerMemory lm;
      lm.layer_id = l;
      lm.n_params = sizes[l];
      lm.bits = 32;
      lm.packed_bytes = 2 * 4 * sizes[l];
      lm.ideal_bytes = 2 * 4 * sizes[l];
      rec.memory.layers.push_back(lm);
      rec.memory.total_packed_bytes += lm.packed_bytes;
      rec.memory.total_ideal_bytes += lm.ideal_bytes;
      weighted += 32.0 * static_cast<double>(sizes[l]);
      total += static_cast<double>(sizes[l]);
    }
    rec.memory.average_bits = weighted / total;
    rec.memory.saved_vs_32bit_pct = 0.0;
    rec.memory.saved_vs_8bit_pct = (1.0 - rec.memory.average_bits / 8.0) * 100.0;
  } else {
    optim::QuantizedAdamW opt(sizes, adam);
    for (long long t = 1; t <= config.steps; ++t) {
      const double loss = problem.loss_and_grad(params, t - 1, grads);
      rec.loss_curve.push_back(loss);
      const auto telemetry = opt.step(params, grads, t);
      if (telemetry.refreshed) {
        rec.policy_history.push_back(telemetry.policy);
        trace::TraceRecord tr;
        tr.t = t;
        tr.layers.reserve(sizes.size());
        for (std::size_t l = 0; l < sizes.size(); ++l) {
          trace::TraceLayerEntry e;
          e.id = l;
          e.name = rec.layer_names[l];
          e.n_params = sizes[l];
          e.n = telemetry.layer_stats[l].n;
          e.r = telemetry.layer_stats[l].r;
          e.v = telemetry.layer_stats[l].v;
          e.bits = quant::bit_count(telemetry.policy.entries[l].bits);
          tr.layers.push_back(std::move(e));
        }
        rec.stats_trace.push_back(std::move(tr));
      }
    }
    rec.memory = opt.memory();
  }

  rec.final_loss = problem.loss(params, kFullBatch);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return rec;
}

}  // namespace stq::harness
