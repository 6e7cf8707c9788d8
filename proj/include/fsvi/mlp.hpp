#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fsvi/tensor.hpp"

namespace fsvi {

// Flat parameter storage for a network; layout is defined by MlpArchitecture.
using ParameterVector = std::vector<double>;

struct ParameterBlock {
  std::size_t offset = 0;
  std::size_t rows = 0;  // fan-in for weights, 1 for biases
  std::size_t cols = 0;  // fan-out
  std::size_t size() const { return rows * cols; }
};

// Fully connected ReLU trunk with one or more linear output heads reading the
// last hidden layer. Parameters live in one flat vector: trunk layers first
// (weight block then bias block per layer), then heads in order, so the same
// indexing drives sampling, Jacobians and the variance kernels.
struct MlpArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;  // may be empty (linear model)
  std::vector<std::size_t> heads;   // output width per head, at least one head

  MlpArchitecture() = default;
  MlpArchitecture(std::size_t in, std::vector<std::size_t> hidden_widths,
                  std::vector<std::size_t> head_widths);

  std::size_t trunk_layers() const { return hidden.size(); }
  std::size_t head_count() const { return heads.size(); }
  std::size_t last_width() const { return hidden.empty() ? input_dim : hidden.back(); }
  std::size_t param_count() const { return param_count_; }

  ParameterBlock trunk_weight(std::size_t layer) const;
  ParameterBlock trunk_bias(std::size_t layer) const;
  ParameterBlock head_weight(std::size_t head) const;
  ParameterBlock head_bias(std::size_t head) const;

  // Total output width of heads [0, active_heads).
  std::size_t output_dim(std::size_t active_heads) const;
  // Column offset of head h inside the concatenated output.
  std::size_t head_col_offset(std::size_t head) const;
  // Head owning concatenated output column k (and the column within it).
  void locate_output(std::size_t k, std::size_t active_heads, std::size_t* head,
                     std::size_t* col) const;

  // Stable identity string, used to guard snapshot/serialization compatibility.
  std::string fingerprint() const;

  bool operator==(const MlpArchitecture& o) const {
    return input_dim == o.input_dim && hidden == o.hidden && heads == o.heads;
  }

 private:
  std::vector<ParameterBlock> blocks_;  // trunk W,b pairs then head W,b pairs
  std::size_t param_count_ = 0;
};

// Activations of one batch at fixed parameters: everything the linearized
// variance kernels and per-row Jacobians need to avoid re-running the trunk.
// `deltas` holds, per trunk layer l, the stacked output-to-layer derivative
// rows for all (point, output dim) pairs: row j*D + k of deltas[l] is
// d f_k(x_j) / d pre_l. Head weights enter these stacks, so a cache is tied
// to the exact parameter vector it was built from.
struct LinearizationCache {
  Tensor2 x;                    // M x input_dim
  std::vector<Tensor2> pre;     // per trunk layer, M x width
  std::vector<Tensor2> act;     // relu(pre)
  Tensor2 logits;               // M x D, heads [0, active_heads) concatenated
  std::size_t active_heads = 0;
  std::vector<Tensor2> deltas;  // per trunk layer, (M*D) x width
};

// Logits of a single head, M x heads[head].
Tensor2 mlp_forward(const MlpArchitecture& arch, const ParameterVector& params, const Tensor2& x,
                    std::size_t head);

// Concatenated logits of heads [0, active_heads), M x D.
Tensor2 mlp_forward_heads(const MlpArchitecture& arch, const ParameterVector& params,
                          const Tensor2& x, std::size_t active_heads);

// Forward pass that also records activations and the delta stacks.
LinearizationCache mlp_linearize(const MlpArchitecture& arch, const ParameterVector& params,
                                 const Tensor2& x, std::size_t active_heads);

// Dense Jacobian of the concatenated outputs w.r.t. all parameters:
// (M*D) x P, row j*D + k. Meant for small models, tests and the full
// covariance path — the training loop uses the fused kernels below instead.
Tensor2 jacobian_rows(const MlpArchitecture& arch, const ParameterVector& params, const Tensor2& x,
                      std::size_t active_heads);

// K[j,k] = sum_p J[(j,k),p]^2 sigma2[p] given a dense Jacobian. D must divide
// J.rows. Negative variances are a numerical error.
Tensor2 diag_function_variance(const Tensor2& jac, const std::vector<double>& sigma2,
                               std::size_t output_dim);

// Full M x M covariance J diag(sigma2) J^T for ONE output dimension's
// Jacobian rows (M x P). Dense-path guard: M must not exceed
// kFullCovarianceMaxPoints.
inline constexpr std::size_t kFullCovarianceMaxPoints = 512;
Tensor2 full_function_covariance(const Tensor2& jac_dim, const std::vector<double>& sigma2);

// Fused diagonal variance: equals diag_function_variance(jacobian_rows(...))
// without materializing J. Cost is one weight-shaped pass per trunk layer
// (shared across output dims) plus delta-stack contractions.
Tensor2 linearized_variance_diag(const MlpArchitecture& arch, const LinearizationCache& cache,
                                 const std::vector<double>& sigma2);

// Accumulates d(loss)/d(sigma2) given upstream d(loss)/dK (M x D) into
// grad_sigma2 (length P).
void linearized_variance_backward(const MlpArchitecture& arch, const LinearizationCache& cache,
                                  const Tensor2& upstream, std::vector<double>* grad_sigma2);

}  // namespace fsvi
