#include "fsvi/mlp.hpp"

#include <cmath>

#include "fsvi/errors.hpp"
#include "fsvi/linalg.hpp"

namespace fsvi {

MlpArchitecture::MlpArchitecture(std::size_t in, std::vector<std::size_t> hidden_widths,
                                 std::vector<std::size_t> head_widths)
    : input_dim(in), hidden(std::move(hidden_widths)), heads(std::move(head_widths)) {
  if (input_dim == 0) throw ConfigError("MlpArchitecture: input_dim must be positive");
  if (heads.empty()) throw ConfigError("MlpArchitecture: at least one output head is required");
  for (std::size_t w : hidden)
    if (w == 0) throw ConfigError("MlpArchitecture: hidden widths must be positive");
  for (std::size_t w : heads)
    if (w == 0) throw ConfigError("MlpArchitecture: head widths must be positive");

  std::size_t off = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t w : hidden) {
    blocks_.push_back({off, fan_in, w});
    off += fan_in * w;
    blocks_.push_back({off, 1, w});
    off += w;
    fan_in = w;
  }
  for (std::size_t w : heads) {
    blocks_.push_back({off, fan_in, w});
    off += fan_in * w;
    blocks_.push_back({off, 1, w});
    off += w;
  }
  param_count_ = off;
}

ParameterBlock MlpArchitecture::trunk_weight(std::size_t layer) const {
  if (layer >= hidden.size()) throw ConfigError("trunk_weight: layer out of range");
  return blocks_[2 * layer];
}

ParameterBlock MlpArchitecture::trunk_bias(std::size_t layer) const {
  if (layer >= hidden.size()) throw ConfigError("trunk_bias: layer out of range");
  return blocks_[2 * layer + 1];
}

ParameterBlock MlpArchitecture::head_weight(std::size_t head) const {
  if (head >= heads.size()) throw ConfigError("head_weight: head out of range");
  return blocks_[2 * hidden.size() + 2 * head];
}

ParameterBlock MlpArchitecture::head_bias(std::size_t head) const {
  if (head >= heads.size()) throw ConfigError("head_bias: head out of range");
  return blocks_[2 * hidden.size() + 2 * head + 1];
}

std::size_t MlpArchitecture::output_dim(std::size_t active_heads) const {
  if (active_heads == 0 || active_heads > heads.size()) {
    throw ConfigError("output_dim: active_heads must be in [1, " +
                      std::to_string(heads.size()) + "], got " + std::to_string(active_heads));
  }
  std::size_t d = 0;
  for (std::size_t h = 0; h < active_heads; ++h) d += heads[h];
  return d;
}

std::size_t MlpArchitecture::head_col_offset(std::size_t head) const {
  std::size_t off = 0;
  for (std::size_t h = 0; h < head; ++h) off += heads[h];
  return off;
}

void MlpArchitecture::locate_output(std::size_t k, std::size_t active_heads, std::size_t* head,
                                    std::size_t* col) const {
  std::size_t off = 0;
  for (std::size_t h = 0; h < active_heads; ++h) {
    if (k < off + heads[h]) {
      *head = h;
      *col = k - off;
      return;
    }
    off += heads[h];
  }
  throw ConfigError("locate_output: output dim " + std::to_string(k) + " out of range");
}

std::string MlpArchitecture::fingerprint() const {
  std::string s = "mlp:in=" + std::to_string(input_dim) + ";hidden=";
  for (std::size_t i = 0; i < hidden.size(); ++i)
    s += (i ? "," : "") + std::to_string(hidden[i]);
  s += ";heads=";
  for (std::size_t i = 0; i < heads.size(); ++i) s += (i ? "," : "") + std::to_string(heads[i]);
  return s;
}

namespace {

void check_forward_args(const MlpArchitecture& arch, const ParameterVector& params,
                        const Tensor2& x) {
  if (params.size() != arch.param_count()) {
    throw ShapeError("mlp forward: parameter vector has " + std::to_string(params.size()) +
                     " entries, architecture needs " + std::to_string(arch.param_count()));
  }
  if (x.cols != arch.input_dim) {
    throw ShapeError("mlp forward: input has " + std::to_string(x.cols) +
                     " features, architecture expects " + std::to_string(arch.input_dim));
  }
}

// act (M x fan_in) * W + b for one block pair.
Tensor2 affine(const Tensor2& act, const double* params, const ParameterBlock& w,
               const ParameterBlock& b) {
  Tensor2 out(act.rows, w.cols);
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c) out(r, c) = params[b.offset + c];
  linalg::matmul_nn_acc(act.data.data(), params + w.offset, out.data.data(), act.rows, w.rows,
                        w.cols);
  return out;
}

void relu_inplace(Tensor2& t) {
  for (double& v : t.data) v = v > 0.0 ? v : 0.0;
}

}  // namespace

Tensor2 mlp_forward(const MlpArchitecture& arch, const ParameterVector& params, const Tensor2& x,
                    std::size_t head) {
  check_forward_args(arch, params, x);
  if (head >= arch.head_count()) throw ConfigError("mlp_forward: head out of range");
  const double* p = params.data();
  Tensor2 act = x;
  for (std::size_t l = 0; l < arch.trunk_layers(); ++l) {
    act = affine(act, p, arch.trunk_weight(l), arch.trunk_bias(l));
    relu_inplace(act);
  }
  return affine(act, p, arch.head_weight(head), arch.head_bias(head));
}

Tensor2 mlp_forward_heads(const MlpArchitecture& arch, const ParameterVector& params,
                          const Tensor2& x, std::size_t active_heads) {
  check_forward_args(arch, params, x);
  const std::size_t d = arch.output_dim(active_heads);
  const double* p = params.data();
  Tensor2 act = x;
  for (std::size_t l = 0; l < arch.trunk_layers(); ++l) {
    act = affine(act, p, arch.trunk_weight(l), arch.trunk_bias(l));
    relu_inplace(act);
  }
  Tensor2 out(x.rows, d);
  for (std::size_t h = 0; h < active_heads; ++h) {
    Tensor2 logits = affine(act, p, arch.head_weight(h), arch.head_bias(h));
    const std::size_t off = arch.head_col_offset(h);
    for (std::size_t r = 0; r < out.rows; ++r)
      for (std::size_t c = 0; c < logits.cols; ++c) out(r, off + c) = logits(r, c);
  }
  return out;
}

LinearizationCache mlp_linearize(const MlpArchitecture& arch, const ParameterVector& params,
                                 const Tensor2& x, std::size_t active_heads) {
  check_forward_args(arch, params, x);
  const std::size_t d = arch.output_dim(active_heads);
  const std::size_t m = x.rows;
  const std::size_t layers = arch.trunk_layers();
  const double* p = params.data();

  LinearizationCache cache;
  cache.x = x;
  cache.active_heads = active_heads;
  cache.pre.reserve(layers);
  cache.act.reserve(layers);
  {
    const Tensor2* act = &cache.x;
    for (std::size_t l = 0; l < layers; ++l) {
      cache.pre.push_back(affine(*act, p, arch.trunk_weight(l), arch.trunk_bias(l)));
      cache.act.push_back(cache.pre.back());
      relu_inplace(cache.act.back());
      act = &cache.act.back();
    }
    cache.logits = Tensor2(m, d);
    for (std::size_t h = 0; h < active_heads; ++h) {
      Tensor2 logits = affine(*act, p, arch.head_weight(h), arch.head_bias(h));
      const std::size_t off = arch.head_col_offset(h);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < logits.cols; ++c) cache.logits(r, off + c) = logits(r, c);
    }
  }

  // Delta stacks: row j*D + k of deltas[l] holds d f_k(x_j) / d pre_l.
  // Built top-down; the last layer's rows come straight from head weight
  // columns masked by the ReLU pattern, earlier layers by one matmul against
  // the next layer's (transposed) weights plus masking.
  if (layers > 0) {
    cache.deltas.resize(layers);
    Tensor2& top = cache.deltas[layers - 1];
    const std::size_t hl = arch.hidden.back();
    top = Tensor2(m * d, hl);
    for (std::size_t h = 0; h < active_heads; ++h) {
      const ParameterBlock wb = arch.head_weight(h);
      const std::size_t off = arch.head_col_offset(h);
      for (std::size_t j = 0; j < m; ++j) {
        const Tensor2& pre = cache.pre[layers - 1];
        for (std::size_t c = 0; c < arch.heads[h]; ++c) {
          double* row = top.row_ptr(j * d + (off + c));
          for (std::size_t a = 0; a < hl; ++a)
            row[a] = pre(j, a) > 0.0 ? p[wb.offset + a * wb.cols + c] : 0.0;
        }
      }
    }
    for (std::size_t l = layers - 1; l-- > 0;) {
      const ParameterBlock wb = arch.trunk_weight(l + 1);  // hidden[l] x hidden[l+1]
      const Tensor2& upper = cache.deltas[l + 1];
      Tensor2& cur = cache.deltas[l];
      cur = Tensor2(m * d, arch.hidden[l]);
      // cur = upper * W^T, then mask by this layer's ReLU pattern.
      linalg::matmul_nt_acc(upper.data.data(), p + wb.offset, cur.data.data(), upper.rows,
                            wb.cols, wb.rows);
      const Tensor2& pre = cache.pre[l];
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < d; ++k) {
          double* row = cur.row_ptr(j * d + k);
          for (std::size_t a = 0; a < arch.hidden[l]; ++a)
            if (!(pre(j, a) > 0.0)) row[a] = 0.0;
        }
    }
  }
  return cache;
}

Tensor2 jacobian_rows(const MlpArchitecture& arch, const ParameterVector& params, const Tensor2& x,
                      std::size_t active_heads) {
  LinearizationCache cache = mlp_linearize(arch, params, x, active_heads);
  const std::size_t d = arch.output_dim(active_heads);
  const std::size_t m = x.rows;
  const std::size_t layers = arch.trunk_layers();
  Tensor2 jac(m * d, arch.param_count());

  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      double* row = jac.row_ptr(j * d + k);
      std::size_t h = 0, c = 0;
      arch.locate_output(k, active_heads, &h, &c);
      // Head block: d f_k / d W_h[a, c] = last_act[j, a]; d f_k / d b_h[c] = 1.
      const Tensor2& last = layers ? cache.act.back() : cache.x;
      const ParameterBlock hw = arch.head_weight(h);
      const ParameterBlock hb = arch.head_bias(h);
      for (std::size_t a = 0; a < hw.rows; ++a) row[hw.offset + a * hw.cols + c] = last(j, a);
      row[hb.offset + c] = 1.0;
      // Trunk blocks via the delta stacks.
      for (std::size_t l = 0; l < layers; ++l) {
        const ParameterBlock wl = arch.trunk_weight(l);
        const ParameterBlock bl = arch.trunk_bias(l);
        const Tensor2& in_act = l == 0 ? cache.x : cache.act[l - 1];
        const double* delta = cache.deltas[l].row_ptr(j * d + k);
        for (std::size_t a = 0; a < wl.rows; ++a) {
          const double av = in_act(j, a);
          if (av == 0.0) continue;
          double* wrow = row + wl.offset + a * wl.cols;
          for (std::size_t b = 0; b < wl.cols; ++b) wrow[b] = av * delta[b];
        }
        for (std::size_t b = 0; b < bl.cols; ++b) row[bl.offset + b] = delta[b];
      }
    }
  }
  return jac;
}

namespace {
void check_sigma2(const std::vector<double>& sigma2, std::size_t expect, const char* who) {
  if (sigma2.size() != expect) {
    throw ShapeError(std::string(who) + ": sigma2 has " + std::to_string(sigma2.size()) +
                     " entries, expected " + std::to_string(expect));
  }
  for (double v : sigma2) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw NumericalError(std::string(who) + ": variances must be finite and non-negative");
    }
  }
}
}  // namespace

Tensor2 diag_function_variance(const Tensor2& jac, const std::vector<double>& sigma2,
                               std::size_t output_dim) {
  if (output_dim == 0 || jac.rows % output_dim != 0) {
    throw ShapeError("diag_function_variance: jacobian rows not a multiple of output dim");
  }
  check_sigma2(sigma2, jac.cols, "diag_function_variance");
  const std::size_t m = jac.rows / output_dim;
  Tensor2 k(m, output_dim);
  for (std::size_t r = 0; r < jac.rows; ++r) {
    const double* row = jac.row_ptr(r);
    double acc = 0.0;
    for (std::size_t pcol = 0; pcol < jac.cols; ++pcol) acc += row[pcol] * row[pcol] * sigma2[pcol];
    k.data[r] = acc;  // row r = (j, k) in row-major M x D order already
  }
  return k;
}

Tensor2 full_function_covariance(const Tensor2& jac_dim, const std::vector<double>& sigma2) {
  if (jac_dim.rows > kFullCovarianceMaxPoints) {
    throw CapacityError("full_function_covariance: " + std::to_string(jac_dim.rows) +
                        " points exceed the dense limit of " +
                        std::to_string(kFullCovarianceMaxPoints));
  }
  check_sigma2(sigma2, jac_dim.cols, "full_function_covariance");
  Tensor2 scaled = jac_dim;
  for (std::size_t r = 0; r < scaled.rows; ++r)
    for (std::size_t c = 0; c < scaled.cols; ++c) scaled(r, c) *= sigma2[c];
  return linalg::matmul_nt(scaled, jac_dim);
}

Tensor2 linearized_variance_diag(const MlpArchitecture& arch, const LinearizationCache& cache,
                                 const std::vector<double>& sigma2) {
  check_sigma2(sigma2, arch.param_count(), "linearized_variance_diag");
  const std::size_t m = cache.x.rows;
  const std::size_t d = arch.output_dim(cache.active_heads);
  const std::size_t layers = arch.trunk_layers();
  const double* s2 = sigma2.data();
  Tensor2 k(m, d);

  // Head contributions: K[j, off+c] += sum_a act_L[j,a]^2 s2_W[a,c] + s2_b[c].
  const Tensor2& last = layers ? cache.act.back() : cache.x;
  Tensor2 last_sq = last;
  for (double& v : last_sq.data) v *= v;
  for (std::size_t h = 0; h < cache.active_heads; ++h) {
    const ParameterBlock hw = arch.head_weight(h);
    const ParameterBlock hb = arch.head_bias(h);
    const std::size_t off = arch.head_col_offset(h);
    Tensor2 contrib(m, hw.cols);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < hw.cols; ++c) contrib(r, c) = s2[hb.offset + c];
    linalg::matmul_nn_acc(last_sq.data.data(), s2 + hw.offset, contrib.data.data(), m, hw.rows,
                          hw.cols);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < hw.cols; ++c) k(r, off + c) += contrib(r, c);
  }

  // Trunk layer l: K[j,k] += sum_b S_l[j,b] * delta[j*D+k, b]^2 where
  // S_l[j,b] = sum_a act_{l-1}[j,a]^2 s2_W[a,b] + s2_b[b] is shared over k.
  for (std::size_t l = 0; l < layers; ++l) {
    const ParameterBlock wl = arch.trunk_weight(l);
    const ParameterBlock bl = arch.trunk_bias(l);
    const Tensor2& in_act = l == 0 ? cache.x : cache.act[l - 1];
    Tensor2 in_sq = in_act;
    for (double& v : in_sq.data) v *= v;
    Tensor2 shared(m, wl.cols);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t b = 0; b < wl.cols; ++b) shared(r, b) = s2[bl.offset + b];
    linalg::matmul_nn_acc(in_sq.data.data(), s2 + wl.offset, shared.data.data(), m, wl.rows,
                          wl.cols);
    const Tensor2& delta = cache.deltas[l];
    for (std::size_t j = 0; j < m; ++j) {
      const double* srow = shared.row_ptr(j);
      for (std::size_t kk = 0; kk < d; ++kk) {
        const double* drow = delta.row_ptr(j * d + kk);
        double acc = 0.0;
        for (std::size_t b = 0; b < wl.cols; ++b) acc += srow[b] * drow[b] * drow[b];
        k(j, kk) += acc;
      }
    }
  }
  return k;
}

void linearized_variance_backward(const MlpArchitecture& arch, const LinearizationCache& cache,
                                  const Tensor2& upstream, std::vector<double>* grad_sigma2) {
  const std::size_t m = cache.x.rows;
  const std::size_t d = arch.output_dim(cache.active_heads);
  const std::size_t layers = arch.trunk_layers();
  if (upstream.rows != m || upstream.cols != d) {
    throw ShapeError("linearized_variance_backward: upstream shape " + upstream.shape_str() +
                     " does not match K (" + std::to_string(m) + "x" + std::to_string(d) + ")");
  }
  if (grad_sigma2->size() != arch.param_count()) {
    throw ShapeError("linearized_variance_backward: gradient buffer size mismatch");
  }
  double* gs = grad_sigma2->data();

  const Tensor2& last = layers ? cache.act.back() : cache.x;
  Tensor2 last_sq = last;
  for (double& v : last_sq.data) v *= v;
  for (std::size_t h = 0; h < cache.active_heads; ++h) {
    const ParameterBlock hw = arch.head_weight(h);
    const ParameterBlock hb = arch.head_bias(h);
    const std::size_t off = arch.head_col_offset(h);
    // d/ds2_W[a,c] = sum_j up[j, off+c] * act_L[j,a]^2 — one M-contraction.
    Tensor2 up_h(m, hw.cols);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < hw.cols; ++c) up_h(r, c) = upstream(r, off + c);
    linalg::matmul_tn_acc(last_sq.data.data(), up_h.data.data(), gs + hw.offset, m, hw.rows,
                          hw.cols);
    for (std::size_t c = 0; c < hw.cols; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < m; ++r) acc += up_h(r, c);
      gs[hb.offset + c] += acc;
    }
  }

  for (std::size_t l = 0; l < layers; ++l) {
    const ParameterBlock wl = arch.trunk_weight(l);
    const ParameterBlock bl = arch.trunk_bias(l);
    const Tensor2& in_act = l == 0 ? cache.x : cache.act[l - 1];
    const Tensor2& delta = cache.deltas[l];
    // U[j,b] = sum_k up[j,k] delta[j*D+k,b]^2, then
    // d/ds2_W[a,b] += sum_j act^2[j,a] U[j,b]; d/ds2_b[b] += sum_j U[j,b].
    Tensor2 u(m, wl.cols);
    for (std::size_t j = 0; j < m; ++j) {
      double* urow = u.row_ptr(j);
      for (std::size_t kk = 0; kk < d; ++kk) {
        const double g = upstream(j, kk);
        if (g == 0.0) continue;
        const double* drow = delta.row_ptr(j * d + kk);
        for (std::size_t b = 0; b < wl.cols; ++b) urow[b] += g * drow[b] * drow[b];
      }
    }
    Tensor2 in_sq = in_act;
    for (double& v : in_sq.data) v *= v;
    linalg::matmul_tn_acc(in_sq.data.data(), u.data.data(), gs + wl.offset, m, wl.rows, wl.cols);
    for (std::size_t b = 0; b < wl.cols; ++b) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += u(j, b);
      gs[bl.offset + b] += acc;
    }
  }
}

}  // namespace fsvi
