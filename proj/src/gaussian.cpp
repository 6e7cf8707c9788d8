#include "fsvi/gaussian.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "fsvi/errors.hpp"
#include "json.hpp"

namespace fsvi {

MeanFieldGaussian MeanFieldGaussian::init(const MlpArchitecture& arch, RngStream* rng) {
  MeanFieldGaussian q;
  q.arch = arch;
  q.mu.assign(arch.param_count(), 0.0);
  q.rho.assign(arch.param_count(), std::log(kInitSigma));
  for (std::size_t l = 0; l < arch.trunk_layers(); ++l) {
    const ParameterBlock w = arch.trunk_weight(l);
    const double bound = std::sqrt(6.0 / double(w.rows));
    for (std::size_t i = 0; i < w.size(); ++i) q.mu[w.offset + i] = rng->uniform(-bound, bound);
  }
  return q;
}

std::vector<double> MeanFieldGaussian::sigma() const {
  std::vector<double> s(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) s[i] = std::exp(rho[i]);
  return s;
}

std::vector<double> MeanFieldGaussian::sigma2() const {
  std::vector<double> s(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) s[i] = std::exp(2.0 * rho[i]);
  return s;
}

void MeanFieldGaussian::clamp_rho() {
  for (double& r : rho) r = r < kRhoMin ? kRhoMin : (r > kRhoMax ? kRhoMax : r);
}

void MeanFieldGaussian::validate() const {
  if (mu.size() != arch.param_count() || rho.size() != arch.param_count()) {
    throw ShapeError("MeanFieldGaussian: mu/rho sizes do not match the architecture (" +
                     std::to_string(mu.size()) + "/" + std::to_string(rho.size()) + " vs " +
                     std::to_string(arch.param_count()) + ")");
  }
  ensure_finite(mu, "MeanFieldGaussian::mu");
  ensure_finite(rho, "MeanFieldGaussian::rho");
  for (double r : rho) {
    if (r < kRhoMin - 1e-12 || r > kRhoMax + 1e-12) {
      throw NumericalError("MeanFieldGaussian: rho outside [" + std::to_string(kRhoMin) + ", " +
                           std::to_string(kRhoMax) + "]");
    }
  }
}

ParameterVector sample_params(const MeanFieldGaussian& q, const std::vector<double>& eps) {
  if (eps.size() != q.mu.size()) {
    throw ShapeError("sample_params: eps has " + std::to_string(eps.size()) + " entries, need " +
                     std::to_string(q.mu.size()));
  }
  ParameterVector theta(q.mu.size());
  for (std::size_t i = 0; i < theta.size(); ++i)
    theta[i] = q.mu[i] + std::exp(q.rho[i]) * eps[i];
  return theta;
}

ParameterVector sample_params(const MeanFieldGaussian& q, RngStream* rng) {
  std::vector<double> eps(q.mu.size());
  rng->fill_normal(eps.data(), eps.size());
  return sample_params(q, eps);
}

double kl_weight_space(const MeanFieldGaussian& q, const MeanFieldGaussian& p) {
  if (q.mu.size() != p.mu.size()) {
    throw ShapeError("kl_weight_space: parameter spaces differ (" + std::to_string(q.mu.size()) +
                     " vs " + std::to_string(p.mu.size()) + ")");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < q.mu.size(); ++i) {
    const double log_sq = q.rho[i];
    const double log_sp = p.rho[i];
    const double var_q = std::exp(2.0 * log_sq);
    const double var_p = std::exp(2.0 * log_sp);
    const double dmu = q.mu[i] - p.mu[i];
    acc += (log_sp - log_sq) + (var_q + dmu * dmu) / (2.0 * var_p) - 0.5;
  }
  if (!std::isfinite(acc)) throw NumericalError("kl_weight_space: non-finite result");
  return acc;
}

PosteriorSnapshot snapshot(const MeanFieldGaussian& q, int task_index) {
  q.validate();
  return PosteriorSnapshot{task_index, q};
}

std::uint64_t params_hash(const MeanFieldGaussian& q) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const std::vector<double>& v) {
    for (double d : v) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(d));
      std::memcpy(&bits, &d, sizeof(bits));
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffULL;
        h *= 1099511628211ULL;
      }
    }
  };
  feed(q.mu);
  feed(q.rho);
  return h;
}

namespace {

std::string doubles_to_hex(const std::vector<double>& v) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(v.size() * 16);
  for (double d : v) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    for (int shift = 60; shift >= 0; shift -= 4) out.push_back(digits[(bits >> shift) & 0xf]);
  }
  return out;
}

std::vector<double> hex_to_doubles(const std::string& hex) {
  if (hex.size() % 16 != 0) throw DataError("snapshot: hex payload length not a multiple of 16");
  std::vector<double> out(hex.size() / 16);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      const char c = hex[i * 16 + j];
      std::uint64_t nibble;
      if (c >= '0' && c <= '9') nibble = std::uint64_t(c - '0');
      else if (c >= 'a' && c <= 'f') nibble = std::uint64_t(c - 'a' + 10);
      else throw DataError("snapshot: invalid hex digit in payload");
      bits = (bits << 4) | nibble;
    }
    std::memcpy(&out[i], &bits, sizeof(double));
  }
  return out;
}

}  // namespace

std::string snapshot_to_json_string(const PosteriorSnapshot& snap) {
  nlohmann::json j;
  j["format"] = "mean-field-gaussian-snapshot-v1";
  j["task_index"] = snap.task_index;
  j["fingerprint"] = snap.q.arch.fingerprint();
  j["input_dim"] = snap.q.arch.input_dim;
  j["hidden"] = snap.q.arch.hidden;
  j["heads"] = snap.q.arch.heads;
  j["mu_hex"] = doubles_to_hex(snap.q.mu);
  j["rho_hex"] = doubles_to_hex(snap.q.rho);
  return j.dump();
}

PosteriorSnapshot snapshot_from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("snapshot: invalid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "mean-field-gaussian-snapshot-v1") {
      throw DataError("snapshot: unknown format tag");
    }
    PosteriorSnapshot snap;
    snap.task_index = j.at("task_index").get<int>();
    MlpArchitecture arch(j.at("input_dim").get<std::size_t>(),
                         j.at("hidden").get<std::vector<std::size_t>>(),
                         j.at("heads").get<std::vector<std::size_t>>());
    if (arch.fingerprint() != j.at("fingerprint").get<std::string>()) {
      throw DataError("snapshot: fingerprint does not match the stored architecture");
    }
    snap.q.arch = arch;
    snap.q.mu = hex_to_doubles(j.at("mu_hex").get<std::string>());
    snap.q.rho = hex_to_doubles(j.at("rho_hex").get<std::string>());
    if (snap.q.mu.size() != arch.param_count() || snap.q.rho.size() != arch.param_count()) {
      throw DataError("snapshot: parameter payload does not match the architecture (" +
                      std::to_string(snap.q.mu.size()) + " vs " +
                      std::to_string(arch.param_count()) + ")");
    }
    return snap;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("snapshot: missing or mistyped field: ") + e.what());
  }
}

void save_snapshot(const std::string& path, const PosteriorSnapshot& snap) {
  // Write-then-rename so readers never observe a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_snapshot: cannot open " + tmp);
    out << snapshot_to_json_string(snap);
    if (!out.good()) throw DataError("save_snapshot: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("save_snapshot: rename to " + path + " failed");
  }
}

PosteriorSnapshot load_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_snapshot: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return snapshot_from_json_string(text);
}

FunctionDistribution function_distribution(const MeanFieldGaussian& q, const Tensor2& x,
                                           std::size_t active_heads, bool want_full) {
  q.validate();
  FunctionDistribution fd;
  const std::vector<double> s2 = q.sigma2();
  LinearizationCache cache = mlp_linearize(q.arch, q.mu, x, active_heads);
  fd.mean = cache.logits;
  fd.var_diag = linearized_variance_diag(q.arch, cache, s2);
  if (want_full) {
    const std::size_t d = q.arch.output_dim(active_heads);
    Tensor2 jac = jacobian_rows(q.arch, q.mu, x, active_heads);
    fd.cov_full.reserve(d);
    for (std::size_t k = 0; k < d; ++k) {
      Tensor2 jk(x.rows, q.arch.param_count());
      for (std::size_t j = 0; j < x.rows; ++j)
        for (std::size_t p = 0; p < q.arch.param_count(); ++p) jk(j, p) = jac(j * d + k, p);
      fd.cov_full.push_back(full_function_covariance(jk, s2));
    }
  }
  return fd;
}

}  // namespace fsvi
