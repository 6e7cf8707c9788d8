#include "fsvi/objective.hpp"

#include <cmath>
#include <string>

#include "fsvi/errors.hpp"
#include "fsvi/linalg.hpp"

namespace fsvi {

void ObjectiveConfig::validate() const {
  if (mc_samples < 1) throw ConfigError("objective: mc_samples must be at least 1");
  if (context_budget < 1) throw ConfigError("objective: context_budget must be at least 1");
  if (context_budget > kFullCovarianceMaxPoints) {
    throw ConfigError("objective: context_budget exceeds the dense limit of " +
                      std::to_string(kFullCovarianceMaxPoints));
  }
  if (!(kl_weight >= 0.0)) throw ConfigError("objective: kl_weight must be non-negative");
  if (!stop_gradient_jacobian) {
    throw ConfigError(
        "objective: stop_gradient_jacobian=false is unsupported — gradients through the "
        "linearization would require a second-order graph");
  }
}

FunctionPriorTerms eval_function_prior(const FunctionPrior& prior, const MlpArchitecture& arch,
                                       const Tensor2& x_ctx, std::size_t active_heads) {
  const std::size_t d = arch.output_dim(active_heads);
  FunctionPriorTerms terms;
  if (const auto* iso = std::get_if<FunctionSpacePrior>(&prior)) {
    if (!(iso->variance > 0.0) || !std::isfinite(iso->variance)) {
      throw ConfigError("function-space prior variance must be positive and finite");
    }
    terms.f_prev = Tensor2(x_ctx.rows, d, 0.0);
    terms.kp_diag = Tensor2(x_ctx.rows, d, std::max(iso->variance, kVarianceFloor));
    return terms;
  }
  const PosteriorSnapshot* snap = std::get<const PosteriorSnapshot*>(prior);
  if (snap == nullptr) throw StateError("eval_function_prior: null posterior snapshot");
  if (!(snap->q.arch == arch)) {
    throw ConfigError("eval_function_prior: snapshot architecture differs from the model");
  }
  LinearizationCache cache = mlp_linearize(arch, snap->q.mu, x_ctx, active_heads);
  terms.f_prev = cache.logits;
  terms.kp_diag = linearized_variance_diag(arch, cache, snap->q.sigma2());
  for (double& v : terms.kp_diag.data) v = v > kVarianceFloor ? v : kVarianceFloor;
  ensure_finite(terms.kp_diag, "prior function variance");
  ensure_finite(terms.f_prev, "prior function mean");
  return terms;
}

// ---------------------------------------------------------------------------
// Value-only ops.

namespace {

void check_eps(const std::vector<std::vector<double>>& eps, int mc_samples, std::size_t p) {
  if (eps.size() != static_cast<std::size_t>(mc_samples)) {
    throw ShapeError("objective: got " + std::to_string(eps.size()) + " noise draws, expected " +
                     std::to_string(mc_samples));
  }
  for (const auto& e : eps) {
    if (e.size() != p) {
      throw ShapeError("objective: noise draw has " + std::to_string(e.size()) +
                       " entries, parameter space has " + std::to_string(p));
    }
  }
}

double loglik_at_params(const MlpArchitecture& arch, const ParameterVector& theta,
                        const Tensor2& x, const std::vector<int>& y, std::size_t head) {
  Tensor2 logits = mlp_forward(arch, theta, x, head);
  if (y.size() != logits.rows) {
    throw ShapeError("loglik: " + std::to_string(y.size()) + " labels for " +
                     std::to_string(logits.rows) + " rows");
  }
  double acc = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const int label = y[r];
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols) {
      throw DataError("loglik: label " + std::to_string(label) + " out of range for head width " +
                      std::to_string(logits.cols));
    }
    double m = logits(r, 0);
    for (std::size_t c = 1; c < logits.cols; ++c) m = std::max(m, logits(r, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) lse += std::exp(logits(r, c) - m);
    acc += logits(r, static_cast<std::size_t>(label)) - (m + std::log(lse));
  }
  return acc;
}

}  // namespace

double expected_loglik(const MeanFieldGaussian& q, const Tensor2& x, const std::vector<int>& y,
                       std::size_t head, const std::vector<std::vector<double>>& eps) {
  if (eps.empty()) throw ConfigError("expected_loglik: at least one noise draw is required");
  check_eps(eps, static_cast<int>(eps.size()), q.param_count());
  double acc = 0.0;
  for (const auto& e : eps) acc += loglik_at_params(q.arch, sample_params(q, e), x, y, head);
  return acc / double(eps.size());
}

double expected_loglik(const MeanFieldGaussian& q, const Tensor2& x, const std::vector<int>& y,
                       std::size_t head, int mc_samples, RngStream* rng) {
  if (mc_samples < 1) throw ConfigError("expected_loglik: mc_samples must be at least 1");
  double acc = 0.0;
  std::vector<double> e(q.param_count());
  for (int s = 0; s < mc_samples; ++s) {
    rng->fill_normal(e.data(), e.size());
    acc += loglik_at_params(q.arch, sample_params(q, e), x, y, head);
  }
  return acc / double(mc_samples);
}

namespace {

double kl_cell(double kp, double kq, double dd) {
  const double kpf = kp > kVarianceFloor ? kp : kVarianceFloor;
  const double kqf = kq > kVarianceFloor ? kq : kVarianceFloor;
  return 0.5 * (std::log(kpf / kqf) + kqf / kpf - 1.0 + dd * dd / kpf);
}

}  // namespace

Tensor2 kl_diag_cells(const MeanFieldGaussian& q, const FunctionPriorTerms& prior,
                      const Tensor2& x_ctx, std::size_t active_heads) {
  q.validate();
  ensure_finite(prior.kp_diag, "kl_diag: prior variance");
  LinearizationCache cache = mlp_linearize(q.arch, q.mu, x_ctx, active_heads);
  const Tensor2& f_t = cache.logits;
  Tensor2 kq = linearized_variance_diag(q.arch, cache, q.sigma2());
  require_same_shape(kq, prior.kp_diag, "kl_diag: prior terms vs context");
  require_same_shape(f_t, prior.f_prev, "kl_diag: prior mean vs context");
  Tensor2 cells(kq.rows, kq.cols);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells.data[i] =
        kl_cell(prior.kp_diag.data[i], kq.data[i], f_t.data[i] - prior.f_prev.data[i]);
  }
  ensure_finite(cells, "kl_diag cells");
  return cells;
}

double kl_diag_value(const MeanFieldGaussian& q, const FunctionPriorTerms& prior,
                     const Tensor2& x_ctx, std::size_t active_heads) {
  const Tensor2 cells = kl_diag_cells(q, prior, x_ctx, active_heads);
  double acc = 0.0;
  for (double v : cells.data) acc += v;
  return acc;
}

double gaussian_kl_full(const Tensor2& delta, Tensor2 kq, Tensor2 kp, KlConstant convention,
                        std::size_t dims_total, double jitter) {
  const std::size_t m = delta.rows;
  if (delta.cols != 1) throw ShapeError("gaussian_kl_full: delta must be a column vector");
  if (kq.rows != m || kq.cols != m || kp.rows != m || kp.cols != m) {
    throw ShapeError("gaussian_kl_full: covariance shapes do not match delta");
  }
  if (m > kFullCovarianceMaxPoints) {
    throw CapacityError("gaussian_kl_full: " + std::to_string(m) + " points exceed the dense cap");
  }
  for (std::size_t i = 0; i < m; ++i) {
    kq(i, i) += jitter;
    kp(i, i) += jitter;
  }
  Tensor2 lq = kq;
  Tensor2 lp = kp;
  linalg::cholesky_inplace(lq);
  linalg::cholesky_inplace(lp);
  const double logdet_q = linalg::cholesky_logdet(lq);
  const double logdet_p = linalg::cholesky_logdet(lp);
  // tr(kp^-1 kq) via solves against the factor of kp.
  Tensor2 solved = kq;
  linalg::cholesky_solve_inplace(lp, solved);
  double trace = 0.0;
  for (std::size_t i = 0; i < m; ++i) trace += solved(i, i);
  Tensor2 w = delta;
  linalg::cholesky_solve_inplace(lp, w);
  double quad = 0.0;
  for (std::size_t i = 0; i < m; ++i) quad += delta(i, 0) * w(i, 0);
  const double constant =
      convention == KlConstant::per_cell ? double(m) : double(m) / double(dims_total);
  const double kl = 0.5 * (logdet_p - logdet_q - constant + trace + quad);
  if (!std::isfinite(kl)) throw NumericalError("gaussian_kl_full: non-finite result");
  return kl;
}

namespace {

// Jacobian rows of one output dim, extracted from the (M*D) x P stack.
Tensor2 jac_for_dim(const Tensor2& jac, std::size_t m, std::size_t d, std::size_t k) {
  Tensor2 out(m, jac.cols);
  for (std::size_t j = 0; j < m; ++j) {
    const double* src = jac.row_ptr(j * d + k);
    double* dst = out.row_ptr(j);
    for (std::size_t p = 0; p < jac.cols; ++p) dst[p] = src[p];
  }
  return out;
}

}  // namespace

double kl_full_value(const MeanFieldGaussian& q, const FunctionPrior& prior, const Tensor2& x_ctx,
                     std::size_t active_heads, KlConstant convention) {
  q.validate();
  const std::size_t m = x_ctx.rows;
  const std::size_t d = q.arch.output_dim(active_heads);
  if (m > kFullCovarianceMaxPoints) {
    throw CapacityError("kl_full: context of " + std::to_string(m) + " points exceeds the cap");
  }
  const Tensor2 f_t = mlp_forward_heads(q.arch, q.mu, x_ctx, active_heads);
  const Tensor2 jac_t = jacobian_rows(q.arch, q.mu, x_ctx, active_heads);
  const std::vector<double> s2_t = q.sigma2();

  Tensor2 f_prev;
  const Tensor2* jac_prev = nullptr;
  Tensor2 jac_prev_storage;
  std::vector<double> s2_prev;
  double iso_var = 0.0;
  if (const auto* iso = std::get_if<FunctionSpacePrior>(&prior)) {
    iso_var = iso->variance;
    f_prev = Tensor2(m, d, 0.0);
  } else {
    const PosteriorSnapshot* snap = std::get<const PosteriorSnapshot*>(prior);
    if (snap == nullptr) throw StateError("kl_full: null posterior snapshot");
    f_prev = mlp_forward_heads(snap->q.arch, snap->q.mu, x_ctx, active_heads);
    jac_prev_storage = jacobian_rows(snap->q.arch, snap->q.mu, x_ctx, active_heads);
    jac_prev = &jac_prev_storage;
    s2_prev = snap->q.sigma2();
  }

  double total = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    Tensor2 kq = full_function_covariance(jac_for_dim(jac_t, m, d, k), s2_t);
    Tensor2 kp(m, m);
    if (jac_prev) {
      kp = full_function_covariance(jac_for_dim(*jac_prev, m, d, k), s2_prev);
    } else {
      for (std::size_t i = 0; i < m; ++i) kp(i, i) = iso_var;
    }
    Tensor2 delta(m, 1);
    for (std::size_t j = 0; j < m; ++j) delta(j, 0) = f_t(j, k) - f_prev(j, k);
    total += gaussian_kl_full(delta, std::move(kq), std::move(kp), convention, d);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Tape assembly.

namespace {

// theta (1 x P) -> logits of one head.
Graph::Var taped_forward_head(Graph& g, const MlpArchitecture& arch, Graph::Var theta,
                              Graph::Var x_in, std::size_t head) {
  Graph::Var act = x_in;
  for (std::size_t l = 0; l < arch.trunk_layers(); ++l) {
    const ParameterBlock wb = arch.trunk_weight(l);
    const ParameterBlock bb = arch.trunk_bias(l);
    Graph::Var w = g.slice_flat(theta, wb.offset, wb.rows, wb.cols);
    Graph::Var b = g.slice_flat(theta, bb.offset, 1, bb.cols);
    act = g.relu(g.add(g.matmul(act, w), b));
  }
  const ParameterBlock hw = arch.head_weight(head);
  const ParameterBlock hb = arch.head_bias(head);
  return g.add(g.matmul(act, g.slice_flat(theta, hw.offset, hw.rows, hw.cols)),
               g.slice_flat(theta, hb.offset, 1, hb.cols));
}

Graph::Var taped_forward_heads(Graph& g, const MlpArchitecture& arch, Graph::Var theta,
                               Graph::Var x_in, std::size_t active_heads) {
  Graph::Var act = x_in;
  for (std::size_t l = 0; l < arch.trunk_layers(); ++l) {
    const ParameterBlock wb = arch.trunk_weight(l);
    const ParameterBlock bb = arch.trunk_bias(l);
    Graph::Var w = g.slice_flat(theta, wb.offset, wb.rows, wb.cols);
    Graph::Var b = g.slice_flat(theta, bb.offset, 1, bb.cols);
    act = g.relu(g.add(g.matmul(act, w), b));
  }
  std::vector<Graph::Var> parts;
  parts.reserve(active_heads);
  for (std::size_t h = 0; h < active_heads; ++h) {
    const ParameterBlock hw = arch.head_weight(h);
    const ParameterBlock hb = arch.head_bias(h);
    parts.push_back(g.add(g.matmul(act, g.slice_flat(theta, hw.offset, hw.rows, hw.cols)),
                          g.slice_flat(theta, hb.offset, 1, hb.cols)));
  }
  return g.concat_cols(parts);
}

// MC-averaged batch-sum log-likelihood node.
Graph::Var build_loglik(Graph& g, const MlpArchitecture& arch, Graph::Var mu, Graph::Var sigma,
                        const Tensor2& x_batch, const std::vector<int>& y_batch, std::size_t head,
                        const std::vector<std::vector<double>>& eps) {
  Graph::Var xb = g.constant(x_batch);
  Graph::Var acc;
  for (const auto& e : eps) {
    Graph::Var theta = g.add(mu, g.mul(sigma, g.constant(Tensor2(1, e.size(), e))));
    Graph::Var logits = taped_forward_head(g, arch, theta, xb, head);
    Graph::Var ll = g.gather_rows_sum(g.log_softmax_rows(logits), y_batch);
    acc = acc.valid() ? g.add(acc, ll) : ll;
  }
  return g.scale(acc, 1.0 / double(eps.size()));
}

// Diagonalized function-space KL node. The linearization cache is treated as
// a constant of the step: gradients reach sigma2 through the fused kernel's
// hand-derived backward, and the means through the forward pass in delta.
Graph::Var build_kl_diag(Graph& g, const MlpArchitecture& arch, Graph::Var mu, Graph::Var sigma2,
                         const FunctionPriorTerms& prior, const Tensor2& x_ctx,
                         std::size_t active_heads,
                         std::shared_ptr<const LinearizationCache> cache) {
  Graph::Var f_t = taped_forward_heads(g, arch, mu, g.constant(x_ctx), active_heads);
  Graph::Var delta = g.sub(f_t, g.constant(prior.f_prev));

  Tensor2 kq_val = linearized_variance_diag(arch, *cache, g.value(sigma2).data);
  Graph::Var kq = g.custom(
      std::move(kq_val), {sigma2},
      [arch, cache](const Tensor2& up, const std::vector<const Tensor2*>&,
                    const std::vector<Tensor2*>& grads) {
        if (!grads[0]) return;
        std::vector<double> buf(grads[0]->size(), 0.0);
        linearized_variance_backward(arch, *cache, up, &buf);
        for (std::size_t i = 0; i < buf.size(); ++i) grads[0]->data[i] += buf[i];
      });
  Graph::Var kqf = g.clamp_min(kq, kVarianceFloor);

  Tensor2 log_kp = prior.kp_diag;
  for (double& v : log_kp.data) v = std::log(v);
  Graph::Var kp_c = g.constant(prior.kp_diag);
  Graph::Var t1 = g.sub(g.constant(std::move(log_kp)), g.log(kqf));
  Graph::Var t2 = g.div(kqf, kp_c);
  Graph::Var t3 = g.div(g.square(delta), kp_c);
  Graph::Var cells = g.scale(g.add_scalar(g.add(g.add(t1, t2), t3), -1.0), 0.5);
  return g.sum(cells);
}

// Per-dim full-covariance prior pieces, precomputed outside the tape.
struct FullPriorData {
  Tensor2 f_prev;                  // M x D
  std::vector<Tensor2> lp;         // per dim, jittered Cholesky factor of kp
  std::vector<double> logdet_kp;   // per dim
};

FullPriorData prepare_full_prior(const FunctionPrior& prior, const MlpArchitecture& arch,
                                 const Tensor2& x_ctx, std::size_t active_heads) {
  const std::size_t m = x_ctx.rows;
  const std::size_t d = arch.output_dim(active_heads);
  FullPriorData data;
  if (const auto* iso = std::get_if<FunctionSpacePrior>(&prior)) {
    data.f_prev = Tensor2(m, d, 0.0);
    Tensor2 kp(m, m);
    for (std::size_t i = 0; i < m; ++i) kp(i, i) = iso->variance + kCovarianceJitter;
    linalg::cholesky_inplace(kp);
    const double ld = linalg::cholesky_logdet(kp);
    data.lp.assign(d, kp);
    data.logdet_kp.assign(d, ld);
    return data;
  }
  const PosteriorSnapshot* snap = std::get<const PosteriorSnapshot*>(prior);
  if (snap == nullptr) throw StateError("prepare_full_prior: null posterior snapshot");
  data.f_prev = mlp_forward_heads(snap->q.arch, snap->q.mu, x_ctx, active_heads);
  const Tensor2 jac = jacobian_rows(snap->q.arch, snap->q.mu, x_ctx, active_heads);
  const std::vector<double> s2 = snap->q.sigma2();
  for (std::size_t k = 0; k < d; ++k) {
    Tensor2 kp = full_function_covariance(jac_for_dim(jac, m, d, k), s2);
    for (std::size_t i = 0; i < m; ++i) kp(i, i) += kCovarianceJitter;
    linalg::cholesky_inplace(kp);
    data.logdet_kp.push_back(linalg::cholesky_logdet(kp));
    data.lp.push_back(std::move(kp));
  }
  return data;
}

// One output dim of the full-covariance KL as a custom node over
// (sigma2, delta_k). The Jacobian rows are a constant of the step.
Graph::Var build_kl_full_dim(Graph& g, Graph::Var sigma2, Graph::Var delta_k,
                             std::shared_ptr<const Tensor2> jac_k,
                             std::shared_ptr<const Tensor2> lp, double logdet_kp) {
  const std::size_t m = jac_k->rows;
  const Tensor2& s2v = g.value(sigma2);
  const Tensor2& dv = g.value(delta_k);

  Tensor2 kq = full_function_covariance(*jac_k, s2v.data);
  for (std::size_t i = 0; i < m; ++i) kq(i, i) += kCovarianceJitter;
  Tensor2 lq = kq;
  linalg::cholesky_inplace(lq);
  const double logdet_kq = linalg::cholesky_logdet(lq);
  Tensor2 solved = kq;
  linalg::cholesky_solve_inplace(*lp, solved);
  double trace = 0.0;
  for (std::size_t i = 0; i < m; ++i) trace += solved(i, i);
  Tensor2 w = dv;
  linalg::cholesky_solve_inplace(*lp, w);
  double quad = 0.0;
  for (std::size_t i = 0; i < m; ++i) quad += dv(i, 0) * w(i, 0);
  const double value = 0.5 * (logdet_kp - logdet_kq - double(m) + trace + quad);

  auto backward = [jac_k, lp, m](const Tensor2& up, const std::vector<const Tensor2*>& vals,
                                 const std::vector<Tensor2*>& grads) {
    const double gscale = up.data[0];
    const Tensor2& s2 = *vals[0];
    const Tensor2& dval = *vals[1];
    // d/d sigma2_p = 0.5 * diag(J^T (kp^-1 - kq^-1) J)_p. Solve against both
    // factors; kq is refactored from the live sigma2 value.
    if (grads[0]) {
      Tensor2 kq2 = full_function_covariance(*jac_k, s2.data);
      for (std::size_t i = 0; i < m; ++i) kq2(i, i) += kCovarianceJitter;
      linalg::cholesky_inplace(kq2);
      Tensor2 a = *jac_k;  // becomes kp^-1 J
      linalg::cholesky_solve_inplace(*lp, a);
      Tensor2 b = *jac_k;  // becomes kq^-1 J
      linalg::cholesky_solve_inplace(kq2, b);
      for (std::size_t p = 0; p < jac_k->cols; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += (*jac_k)(j, p) * (a(j, p) - b(j, p));
        grads[0]->data[p] += gscale * 0.5 * acc;
      }
    }
    // d/d delta = kp^-1 delta.
    if (grads[1]) {
      Tensor2 w2 = dval;
      linalg::cholesky_solve_inplace(*lp, w2);
      for (std::size_t j = 0; j < m; ++j) grads[1]->data[j] += gscale * w2(j, 0);
    }
  };
  return g.custom(Tensor2(1, 1, {value}), {sigma2, delta_k}, backward);
}

Graph::Var build_kl_full(Graph& g, const MlpArchitecture& arch, Graph::Var mu, Graph::Var sigma2,
                         const FunctionPrior& prior, const Tensor2& x_ctx,
                         std::size_t active_heads, const ParameterVector& mu_values) {
  const std::size_t m = x_ctx.rows;
  const std::size_t d = arch.output_dim(active_heads);
  FullPriorData pd = prepare_full_prior(prior, arch, x_ctx, active_heads);
  const Tensor2 jac = jacobian_rows(arch, mu_values, x_ctx, active_heads);

  Graph::Var f_t = taped_forward_heads(g, arch, mu, g.constant(x_ctx), active_heads);
  Graph::Var delta = g.sub(f_t, g.constant(pd.f_prev));
  Graph::Var total;
  for (std::size_t k = 0; k < d; ++k) {
    auto jac_k = std::make_shared<const Tensor2>(jac_for_dim(jac, m, d, k));
    auto lp = std::make_shared<const Tensor2>(std::move(pd.lp[k]));
    Graph::Var term =
        build_kl_full_dim(g, sigma2, g.col(delta, k), jac_k, lp, pd.logdet_kp[k]);
    total = total.valid() ? g.add(total, term) : term;
  }
  return total;
}

void check_objective_inputs(const MeanFieldGaussian& q, const Tensor2& x_batch,
                            const std::vector<int>& y_batch, std::size_t head,
                            const ObjectiveConfig& cfg, double n_task,
                            const std::vector<std::vector<double>>& eps) {
  q.validate();
  cfg.validate();
  if (head >= q.arch.head_count()) throw ConfigError("objective: batch head out of range");
  if (x_batch.rows == 0) throw ShapeError("objective: empty batch");
  if (y_batch.size() != x_batch.rows) throw ShapeError("objective: labels do not match batch");
  if (!(n_task >= 1.0)) throw ConfigError("objective: task size must be at least 1");
  check_eps(eps, cfg.mc_samples, q.param_count());
}

}  // namespace

ObjectiveTerms sfsvi_objective(const MeanFieldGaussian& q, const FunctionPrior& prior,
                               const Tensor2& x_batch, const std::vector<int>& y_batch,
                               std::size_t head, const Tensor2& x_ctx, std::size_t active_heads,
                               double n_task, const ObjectiveConfig& cfg,
                               const std::vector<std::vector<double>>& eps) {
  check_objective_inputs(q, x_batch, y_batch, head, cfg, n_task, eps);
  if (x_ctx.rows == 0) throw ShapeError("sfsvi: empty context set");
  if (x_ctx.rows > cfg.context_budget) {
    throw CapacityError("sfsvi: context of " + std::to_string(x_ctx.rows) +
                        " points exceeds the budget of " + std::to_string(cfg.context_budget));
  }

  Graph g;
  const std::size_t p = q.param_count();
  Graph::Var mu = g.leaf(Tensor2(1, p, q.mu));
  Graph::Var rho = g.leaf(Tensor2(1, p, q.rho));
  Graph::Var sigma = g.exp(rho);
  Graph::Var sigma2 = g.square(sigma);

  Graph::Var loglik = build_loglik(g, q.arch, mu, sigma, x_batch, y_batch, head, eps);

  Graph::Var kl;
  if (cfg.kl_mode == KlMode::diag) {
    FunctionPriorTerms terms = eval_function_prior(prior, q.arch, x_ctx, active_heads);
    auto cache = std::make_shared<const LinearizationCache>(
        mlp_linearize(q.arch, q.mu, x_ctx, active_heads));
    kl = build_kl_diag(g, q.arch, mu, sigma2, terms, x_ctx, active_heads, std::move(cache));
  } else {
    kl = build_kl_full(g, q.arch, mu, sigma2, prior, x_ctx, active_heads, q.mu);
  }

  Graph::Var loss = g.add(g.scale(loglik, -n_task / double(x_batch.rows)),
                          g.scale(kl, cfg.kl_weight));
  ObjectiveTerms terms;
  terms.loss = g.value(loss).data[0];
  terms.loglik = g.value(loglik).data[0];
  terms.kl = g.value(kl).data[0];
  if (!std::isfinite(terms.loss)) {
    throw NumericalError("sfsvi: non-finite loss (loglik=" + std::to_string(terms.loglik) +
                         ", kl=" + std::to_string(terms.kl) + ")");
  }
  g.backward(loss);
  terms.grad_mu = g.grad(mu).data;
  terms.grad_rho = g.grad(rho).data;
  return terms;
}

ObjectiveTerms vcl_objective(const MeanFieldGaussian& q, const MeanFieldGaussian& q_prior,
                             const Tensor2& x_batch, const std::vector<int>& y_batch,
                             std::size_t head, double n_task, const ObjectiveConfig& cfg,
                             const std::vector<std::vector<double>>& eps) {
  check_objective_inputs(q, x_batch, y_batch, head, cfg, n_task, eps);
  if (q_prior.param_count() != q.param_count()) {
    throw ShapeError("vcl: prior parameter space does not match the posterior");
  }

  Graph g;
  const std::size_t p = q.param_count();
  Graph::Var mu = g.leaf(Tensor2(1, p, q.mu));
  Graph::Var rho = g.leaf(Tensor2(1, p, q.rho));
  Graph::Var sigma = g.exp(rho);

  Graph::Var loglik = build_loglik(g, q.arch, mu, sigma, x_batch, y_batch, head, eps);

  // Closed-form factorized-Gaussian KL on the tape: log sigma_q is just rho.
  Tensor2 log_sp(1, p);
  Tensor2 inv_2var_p(1, p);
  for (std::size_t i = 0; i < p; ++i) {
    log_sp.data[i] = q_prior.rho[i];
    inv_2var_p.data[i] = 0.5 * std::exp(-2.0 * q_prior.rho[i]);
  }
  Graph::Var t1 = g.sub(g.constant(std::move(log_sp)), rho);
  Graph::Var dm = g.sub(mu, g.constant(Tensor2(1, p, q_prior.mu)));
  Graph::Var t2 = g.mul(g.add(g.square(sigma), g.square(dm)), g.constant(std::move(inv_2var_p)));
  Graph::Var kl = g.sum(g.add_scalar(g.add(t1, t2), -0.5));

  Graph::Var loss = g.add(g.scale(loglik, -1.0 / double(x_batch.rows)),
                          g.scale(kl, cfg.kl_weight / n_task));
  ObjectiveTerms terms;
  terms.loss = g.value(loss).data[0];
  terms.loglik = g.value(loglik).data[0];
  terms.kl = g.value(kl).data[0];
  if (!std::isfinite(terms.loss)) {
    throw NumericalError("vcl: non-finite loss (loglik=" + std::to_string(terms.loglik) +
                         ", kl=" + std::to_string(terms.kl) + ")");
  }
  g.backward(loss);
  terms.grad_mu = g.grad(mu).data;
  terms.grad_rho = g.grad(rho).data;
  return terms;
}

FrozenLinearization freeze_linearization(const MeanFieldGaussian& q, const Tensor2& x_ctx,
                                         std::size_t active_heads, KlMode mode) {
  FrozenLinearization frozen;
  frozen.cache = std::make_shared<const LinearizationCache>(
      mlp_linearize(q.arch, q.mu, x_ctx, active_heads));
  if (mode == KlMode::full) {
    frozen.jac = std::make_shared<const Tensor2>(
        jacobian_rows(q.arch, q.mu, x_ctx, active_heads));
  }
  return frozen;
}

double sfsvi_objective_value(const MeanFieldGaussian& q, const FunctionPrior& prior,
                             const Tensor2& x_batch, const std::vector<int>& y_batch,
                             std::size_t head, const Tensor2& x_ctx, std::size_t active_heads,
                             double n_task, const ObjectiveConfig& cfg,
                             const std::vector<std::vector<double>>& eps,
                             const FrozenLinearization& frozen) {
  check_objective_inputs(q, x_batch, y_batch, head, cfg, n_task, eps);
  if (!frozen.cache) throw StateError("sfsvi_objective_value: missing frozen linearization");

  const double loglik = expected_loglik(q, x_batch, y_batch, head, eps);
  const std::vector<double> s2 = q.sigma2();
  const std::size_t d = q.arch.output_dim(active_heads);
  const std::size_t m = x_ctx.rows;
  const Tensor2 f_t = mlp_forward_heads(q.arch, q.mu, x_ctx, active_heads);

  double kl = 0.0;
  if (cfg.kl_mode == KlMode::diag) {
    FunctionPriorTerms terms = eval_function_prior(prior, q.arch, x_ctx, active_heads);
    Tensor2 kq = linearized_variance_diag(q.arch, *frozen.cache, s2);
    for (std::size_t i = 0; i < kq.size(); ++i) {
      kl += kl_cell(terms.kp_diag.data[i], kq.data[i], f_t.data[i] - terms.f_prev.data[i]);
    }
  } else {
    if (!frozen.jac) throw StateError("sfsvi_objective_value: full mode needs a frozen jacobian");
    FullPriorData pd = prepare_full_prior(prior, q.arch, x_ctx, active_heads);
    for (std::size_t k = 0; k < d; ++k) {
      const Tensor2 jk = jac_for_dim(*frozen.jac, m, d, k);
      Tensor2 kq = full_function_covariance(jk, s2);
      for (std::size_t i = 0; i < m; ++i) kq(i, i) += kCovarianceJitter;
      Tensor2 lq = kq;
      linalg::cholesky_inplace(lq);
      Tensor2 solved = kq;
      linalg::cholesky_solve_inplace(pd.lp[k], solved);
      double trace = 0.0;
      for (std::size_t i = 0; i < m; ++i) trace += solved(i, i);
      Tensor2 delta(m, 1);
      for (std::size_t j = 0; j < m; ++j) delta(j, 0) = f_t(j, k) - pd.f_prev(j, k);
      Tensor2 w = delta;
      linalg::cholesky_solve_inplace(pd.lp[k], w);
      double quad = 0.0;
      for (std::size_t i = 0; i < m; ++i) quad += delta(i, 0) * w(i, 0);
      kl += 0.5 * (pd.logdet_kp[k] - linalg::cholesky_logdet(lq) - double(m) + trace + quad);
    }
  }
  return -n_task / double(x_batch.rows) * loglik + cfg.kl_weight * kl;
}

IdentityCheckResult verify_fromp_identity(const std::vector<double>& kp_cells,
                                          const std::vector<double>& kq_cells,
                                          const std::vector<double>& delta_cells, double loglik,
                                          int sign, bool flip_v) {
  if (kp_cells.size() != kq_cells.size() || kp_cells.size() != delta_cells.size()) {
    throw ShapeError("verify_fromp_identity: cell arrays must have equal lengths");
  }
  if (sign != 1 && sign != -1) throw ConfigError("verify_fromp_identity: sign must be +1 or -1");

  // Full objective with the supplied prior covariance cells.
  double kl = 0.0;
  for (std::size_t i = 0; i < kp_cells.size(); ++i) {
    kl += kl_cell(kp_cells[i], kq_cells[i], delta_cells[i]);
  }
  const double f = loglik - kl;

  // The value term: everything except the quadratic data-fit piece.
  double v = 0.0;
  for (std::size_t i = 0; i < kp_cells.size(); ++i) {
    const double kp = std::max(kp_cells[i], kVarianceFloor);
    const double kq = std::max(kq_cells[i], kVarianceFloor);
    v += std::log(kp / kq) + kq / kp - 1.0;
  }
  v *= -0.5;
  if (flip_v) v = -v;

  double quad = 0.0;
  for (std::size_t i = 0; i < kp_cells.size(); ++i) {
    quad += delta_cells[i] * delta_cells[i] / std::max(kp_cells[i], kVarianceFloor);
  }

  IdentityCheckResult r;
  r.lhs = f - v;
  r.rhs = loglik + double(sign) * 0.5 * quad;
  r.residual = std::fabs(r.lhs - r.rhs);
  return r;
}

double linear_model_function_kl(const Tensor2& phi, const std::vector<double>& mu_t,
                                const std::vector<double>& sigma2_t,
                                const std::vector<double>& mu_prev,
                                const std::vector<double>& sigma2_prev) {
  const std::size_t f = phi.cols;
  if (mu_t.size() != f || sigma2_t.size() != f || mu_prev.size() != f ||
      sigma2_prev.size() != f) {
    throw ShapeError("linear_model_function_kl: parameter sizes do not match features");
  }
  // For f(x) = phi(x)^T theta the Jacobian is phi itself, for every set of
  // parameters — the covariance ops see the exact induced Gaussian. No jitter:
  // the comparison against the reference route must be exact, so the design
  // matrix must have full row rank (at most as many points as features).
  Tensor2 kq = full_function_covariance(phi, sigma2_t);
  Tensor2 kp = full_function_covariance(phi, sigma2_prev);
  Tensor2 delta(phi.rows, 1);
  for (std::size_t j = 0; j < phi.rows; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < f; ++c) acc += phi(j, c) * (mu_t[c] - mu_prev[c]);
    delta(j, 0) = acc;
  }
  return gaussian_kl_full(delta, std::move(kq), std::move(kp), KlConstant::per_cell, 1, 0.0);
}

}  // namespace fsvi
