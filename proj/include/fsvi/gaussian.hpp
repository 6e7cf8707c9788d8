#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsvi/mlp.hpp"
#include "fsvi/rng.hpp"
#include "fsvi/tensor.hpp"

namespace fsvi {

// rho parameterizes the standard deviation as sigma = exp(rho). Optimization
// projects rho back into [kRhoMin, kRhoMax] after every step, bounding sigma
// to [e^-10, e^3] — wide enough for the posteriors seen in practice while
// keeping exp() and the variance kernels well-conditioned.
inline constexpr double kRhoMin = -10.0;
inline constexpr double kRhoMax = 3.0;
inline constexpr double kInitSigma = 1e-3;

// Fully factorized Gaussian over a network's flat parameter vector.
struct MeanFieldGaussian {
  MlpArchitecture arch;
  std::vector<double> mu;   // length arch.param_count()
  std::vector<double> rho;  // sigma = exp(rho), elementwise

  // Kaiming-uniform trunk weights, zero biases and zero head weights (the
  // function-space prior is zero-mean, and zero heads start the mean function
  // exactly there), sigma = kInitSigma everywhere.
  static MeanFieldGaussian init(const MlpArchitecture& arch, RngStream* rng);

  std::size_t param_count() const { return mu.size(); }
  std::vector<double> sigma() const;
  std::vector<double> sigma2() const;
  void clamp_rho();
  void validate() const;  // sizes match arch, values finite, rho within bounds
};

// Reparameterized draw: theta = mu + exp(rho) ⊙ eps.
ParameterVector sample_params(const MeanFieldGaussian& q, const std::vector<double>& eps);
ParameterVector sample_params(const MeanFieldGaussian& q, RngStream* rng);

// KL(q || p) between fully factorized Gaussians over the same parameter space.
double kl_weight_space(const MeanFieldGaussian& q, const MeanFieldGaussian& p);

// Zero-mean isotropic function-space prior used for the first task, before
// any posterior exists: f(x) ~ N(0, variance) independently per (point, dim).
struct FunctionSpacePrior {
  double variance = 0.0;
};

// Immutable copy of the posterior at a task boundary. Consumers treat it as
// frozen: it is passed by const reference everywhere downstream.
struct PosteriorSnapshot {
  int task_index = 0;
  MeanFieldGaussian q;
};

PosteriorSnapshot snapshot(const MeanFieldGaussian& q, int task_index);

// FNV-1a over the raw bytes of mu and rho; used to assert immutability.
std::uint64_t params_hash(const MeanFieldGaussian& q);

// Snapshot serialization. Doubles are stored as 16-hex-digit bit patterns so
// a round trip is bitwise exact; the architecture fingerprint guards loads.
std::string snapshot_to_json_string(const PosteriorSnapshot& snap);
PosteriorSnapshot snapshot_from_json_string(const std::string& text);
void save_snapshot(const std::string& path, const PosteriorSnapshot& snap);
PosteriorSnapshot load_snapshot(const std::string& path);

// Induced distribution over function values at a set of inputs, from the
// first-order expansion around mu: mean f(x; mu), variance J diag(sigma^2) J^T.
struct FunctionDistribution {
  Tensor2 mean;                  // M x D
  Tensor2 var_diag;              // M x D
  std::vector<Tensor2> cov_full;  // per output dim, M x M; filled on request
};

FunctionDistribution function_distribution(const MeanFieldGaussian& q, const Tensor2& x,
                                           std::size_t active_heads, bool want_full = false);

}  // namespace fsvi
