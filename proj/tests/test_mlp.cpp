#include <cmath>
#include <vector>

#include "doctest.h"
#include "fsvi/linalg.hpp"
#include "fsvi/mlp.hpp"
#include "fsvi/rng.hpp"
#include "test_util.hpp"

using fsvi::LinearizationCache;
using fsvi::MlpArchitecture;
using fsvi::ParameterVector;
using fsvi::RngStream;
using fsvi::Tensor2;

namespace {

ParameterVector random_params(const MlpArchitecture& arch, RngStream* rng, double lo = -0.8,
                              double hi = 0.8) {
  ParameterVector p(arch.param_count());
  for (double& v : p) v = rng->uniform(lo, hi);
  return p;
}

Tensor2 random_input(std::size_t m, std::size_t dim, RngStream* rng) {
  Tensor2 x(m, dim);
  for (double& v : x.data) v = rng->uniform(-1.5, 1.5);
  return x;
}

std::vector<double> random_sigma2(std::size_t n, RngStream* rng) {
  std::vector<double> s(n);
  for (double& v : s) v = rng->uniform(0.0, 0.5);
  return s;
}

}  // namespace

TEST_SUITE("mlp") {
  TEST_CASE("parameter layout covers the vector exactly once") {
    MlpArchitecture arch(3, {4, 5}, {2, 3});
    // 3*4+4 + 4*5+5 + 5*2+2 + 5*3+3 = 16+25+12+18 = 71
    CHECK(arch.param_count() == 71);
    std::vector<char> hit(arch.param_count(), 0);
    auto mark = [&](fsvi::ParameterBlock b) {
      for (std::size_t i = 0; i < b.size(); ++i) {
        CHECK(hit[b.offset + i] == 0);
        hit[b.offset + i] = 1;
      }
    };
    for (std::size_t l = 0; l < 2; ++l) {
      mark(arch.trunk_weight(l));
      mark(arch.trunk_bias(l));
    }
    for (std::size_t h = 0; h < 2; ++h) {
      mark(arch.head_weight(h));
      mark(arch.head_bias(h));
    }
    for (char c : hit) CHECK(c == 1);
    CHECK(arch.output_dim(1) == 2);
    CHECK(arch.output_dim(2) == 5);
    CHECK(arch.head_col_offset(1) == 2);
    CHECK(arch.fingerprint() == "mlp:in=3;hidden=4,5;heads=2,3");
    CHECK_THROWS_AS(arch.output_dim(3), fsvi::ConfigError);
    CHECK_THROWS_AS(MlpArchitecture(0, {}, {1}), fsvi::ConfigError);
    CHECK_THROWS_AS(MlpArchitecture(2, {0}, {1}), fsvi::ConfigError);
    CHECK_THROWS_AS(MlpArchitecture(2, {3}, {}), fsvi::ConfigError);
  }

  TEST_CASE("zero parameters produce zero logits") {
    MlpArchitecture arch(4, {8}, {3});
    ParameterVector p(arch.param_count(), 0.0);
    RngStream rng(1, "x");
    Tensor2 x = random_input(5, 4, &rng);
    Tensor2 out = fsvi::mlp_forward(arch, p, x, 0);
    for (double v : out.data) CHECK(v == 0.0);
  }

  TEST_CASE("scalar linear model computes w*x + b") {
    MlpArchitecture arch(1, {}, {1});
    CHECK(arch.param_count() == 2);
    ParameterVector p{2.0, 1.0};  // w = 2, b = 1
    Tensor2 x(1, 1, {3.0});
    Tensor2 out = fsvi::mlp_forward(arch, p, x, 0);
    CHECK(out(0, 0) == doctest::Approx(7.0).epsilon(1e-15));
  }

  TEST_CASE("two-layer forward matches a straight-line reference") {
    MlpArchitecture arch(2, {4}, {2});
    RngStream rng(77, "fw");
    ParameterVector p = random_params(arch, &rng);
    Tensor2 x = random_input(3, 2, &rng);
    Tensor2 got = fsvi::mlp_forward(arch, p, x, 0);

    const auto w1 = arch.trunk_weight(0);
    const auto b1 = arch.trunk_bias(0);
    const auto hw = arch.head_weight(0);
    const auto hb = arch.head_bias(0);
    for (std::size_t j = 0; j < 3; ++j) {
      double h[4];
      for (std::size_t b = 0; b < 4; ++b) {
        double acc = p[b1.offset + b];
        for (std::size_t a = 0; a < 2; ++a) acc += x(j, a) * p[w1.offset + a * 4 + b];
        h[b] = acc > 0.0 ? acc : 0.0;
      }
      for (std::size_t c = 0; c < 2; ++c) {
        double acc = p[hb.offset + c];
        for (std::size_t b = 0; b < 4; ++b) acc += h[b] * p[hw.offset + b * 2 + c];
        CHECK(testutil::rel_err(got(j, c), acc, 1e-12) < 1e-12);
      }
    }
  }

  TEST_CASE("forward is deterministic and multi-head concat matches per-head calls") {
    MlpArchitecture arch(3, {6, 5}, {2, 2, 2});
    RngStream rng(9, "mh");
    ParameterVector p = random_params(arch, &rng);
    Tensor2 x = random_input(4, 3, &rng);
    Tensor2 a = fsvi::mlp_forward_heads(arch, p, x, 3);
    Tensor2 b = fsvi::mlp_forward_heads(arch, p, x, 3);
    CHECK(a.data == b.data);  // bitwise
    for (std::size_t h = 0; h < 3; ++h) {
      Tensor2 single = fsvi::mlp_forward(arch, p, x, h);
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t c = 0; c < 2; ++c)
          CHECK(a(j, arch.head_col_offset(h) + c) == single(j, c));
    }
    CHECK_THROWS_AS(fsvi::mlp_forward(arch, p, x, 3), fsvi::ConfigError);
    ParameterVector wrong(p.size() - 1);
    CHECK_THROWS_AS(fsvi::mlp_forward(arch, wrong, x, 0), fsvi::ShapeError);
    Tensor2 badx(2, 5);
    CHECK_THROWS_AS(fsvi::mlp_forward(arch, p, badx, 0), fsvi::ShapeError);
  }

  TEST_CASE("jacobian rows agree with central finite differences") {
    MlpArchitecture arch(2, {5, 4}, {2, 3});
    RngStream rng(123, "jac");
    ParameterVector p = random_params(arch, &rng);
    Tensor2 x = random_input(3, 2, &rng);
    const std::size_t d = arch.output_dim(2);
    Tensor2 jac = fsvi::jacobian_rows(arch, p, x, 2);
    CHECK(jac.rows == 3 * d);
    CHECK(jac.cols == arch.param_count());

    const double h = 1e-5;
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        for (std::size_t pi = 0; pi < arch.param_count(); ++pi) {
          ParameterVector probe = p;
          probe[pi] = p[pi] + h;
          const double up = fsvi::mlp_forward_heads(arch, probe, x, 2)(j, k);
          probe[pi] = p[pi] - h;
          const double down = fsvi::mlp_forward_heads(arch, probe, x, 2)(j, k);
          const double fd = (up - down) / (2.0 * h);
          CHECK(testutil::rel_err(jac(j * d + k, pi), fd, 1e-6) < 1e-5);
        }
      }
    }
  }

  TEST_CASE("a fully dead ReLU point zeroes every trunk-sensitive entry") {
    MlpArchitecture arch(2, {3}, {1});
    ParameterVector p(arch.param_count());
    // Negative first-layer weights and biases with a positive input kill
    // every hidden unit.
    const auto w1 = arch.trunk_weight(0);
    const auto b1 = arch.trunk_bias(0);
    const auto hw = arch.head_weight(0);
    const auto hb = arch.head_bias(0);
    for (std::size_t i = 0; i < w1.size(); ++i) p[w1.offset + i] = -0.5;
    for (std::size_t i = 0; i < b1.size(); ++i) p[b1.offset + i] = -0.1;
    for (std::size_t i = 0; i < hw.size(); ++i) p[hw.offset + i] = 0.7;
    p[hb.offset] = 0.3;
    Tensor2 x(1, 2, {1.0, 2.0});
    Tensor2 jac = fsvi::jacobian_rows(arch, p, x, 1);
    for (std::size_t pi = 0; pi < arch.param_count(); ++pi) {
      if (pi == hb.offset) {
        CHECK(jac(0, pi) == 1.0);  // bias path stays alive
      } else {
        CHECK(jac(0, pi) == 0.0);  // dead hidden layer: weights AND head weights
      }
    }
  }

  TEST_CASE("linear-in-parameters model has a parameter-independent jacobian [x, 1]") {
    MlpArchitecture arch(2, {}, {1});
    Tensor2 x(2, 2, {3.0, -1.0, 0.5, 2.0});
    ParameterVector p1{0.1, -0.4, 2.0};
    ParameterVector p2{5.0, 3.3, -7.0};
    Tensor2 j1 = fsvi::jacobian_rows(arch, p1, x, 1);
    Tensor2 j2 = fsvi::jacobian_rows(arch, p2, x, 1);
    CHECK(j1.data == j2.data);  // identical regardless of parameters
    CHECK(j1(0, 0) == 3.0);
    CHECK(j1(0, 1) == -1.0);
    CHECK(j1(0, 2) == 1.0);
    CHECK(j1(1, 0) == 0.5);
    CHECK(j1(1, 1) == 2.0);
    CHECK(j1(1, 2) == 1.0);
  }

  TEST_CASE("diagonal variance of a scalar linear model: K = x^2 * var_w") {
    MlpArchitecture arch(1, {}, {1});
    ParameterVector p{1.3, 0.2};
    Tensor2 x(1, 1, {3.0});
    Tensor2 jac = fsvi::jacobian_rows(arch, p, x, 1);
    Tensor2 k = fsvi::diag_function_variance(jac, {0.25, 0.0}, 1);
    CHECK(k(0, 0) == doctest::Approx(2.25).epsilon(1e-15));

    Tensor2 kz = fsvi::diag_function_variance(jac, {0.0, 0.0}, 1);
    CHECK(kz(0, 0) == 0.0);
    CHECK_THROWS_AS(fsvi::diag_function_variance(jac, {-0.1, 0.0}, 1), fsvi::NumericalError);
    CHECK_THROWS_AS(fsvi::diag_function_variance(jac, {0.1}, 1), fsvi::ShapeError);
  }

  TEST_CASE("full covariance matches a brute-force triple loop and its diagonal") {
    MlpArchitecture arch(2, {4}, {2});
    RngStream rng(31, "cov");
    ParameterVector p = random_params(arch, &rng);
    Tensor2 x = random_input(5, 2, &rng);
    std::vector<double> s2 = random_sigma2(arch.param_count(), &rng);
    const std::size_t d = arch.output_dim(1);
    Tensor2 jac = fsvi::jacobian_rows(arch, p, x, 1);
    Tensor2 kdiag = fsvi::diag_function_variance(jac, s2, d);

    for (std::size_t k = 0; k < d; ++k) {
      // Jacobian rows of output dim k only.
      Tensor2 jk(5, arch.param_count());
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t pi = 0; pi < arch.param_count(); ++pi) jk(j, pi) = jac(j * d + k, pi);
      Tensor2 full = fsvi::full_function_covariance(jk, s2);
      // Brute force.
      for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
          double acc = 0.0;
          for (std::size_t pi = 0; pi < arch.param_count(); ++pi)
            acc += jk(i, pi) * s2[pi] * jk(j, pi);
          CHECK(testutil::rel_err(full(i, j), acc, 1e-12) < 1e-12);
        }
        CHECK(testutil::rel_err(full(i, i), kdiag(i, k), 1e-12) < 1e-12);
      }
      // Symmetry.
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < i; ++j) CHECK(full(i, j) == doctest::Approx(full(j, i)));
    }
  }

  TEST_CASE("duplicated context points make the full covariance singular") {
    MlpArchitecture arch(2, {}, {1});
    ParameterVector p{0.4, -0.2, 0.1};
    Tensor2 x(2, 2, {1.0, 2.0, 1.0, 2.0});  // same point twice
    Tensor2 jac = fsvi::jacobian_rows(arch, p, x, 1);
    Tensor2 k = fsvi::full_function_covariance(jac, {0.3, 0.2, 0.1});
    const double det = k(0, 0) * k(1, 1) - k(0, 1) * k(1, 0);
    CHECK(std::fabs(det) < 1e-12);  // rank 1 before jitter
  }

  TEST_CASE("full covariance rejects oversized point sets") {
    Tensor2 jac(fsvi::kFullCovarianceMaxPoints + 1, 1, 1.0);
    CHECK_THROWS_AS(fsvi::full_function_covariance(jac, {1.0}), fsvi::CapacityError);
  }

  TEST_CASE("fused diagonal variance equals the dense-jacobian route") {
    RngStream rng(404, "fused");
    const MlpArchitecture archs[] = {
        MlpArchitecture(3, {6, 5}, {2, 3}),
        MlpArchitecture(2, {4}, {2}),
        MlpArchitecture(4, {}, {3}),
        MlpArchitecture(2, {7, 3, 4}, {2, 2}),
    };
    for (const auto& arch : archs) {
      for (std::size_t active = 1; active <= arch.head_count(); ++active) {
        ParameterVector p = random_params(arch, &rng);
        Tensor2 x = random_input(6, arch.input_dim, &rng);
        std::vector<double> s2 = random_sigma2(arch.param_count(), &rng);
        const std::size_t d = arch.output_dim(active);

        Tensor2 jac = fsvi::jacobian_rows(arch, p, x, active);
        Tensor2 dense = fsvi::diag_function_variance(jac, s2, d);
        LinearizationCache cache = fsvi::mlp_linearize(arch, p, x, active);
        Tensor2 fused = fsvi::linearized_variance_diag(arch, cache, s2);
        REQUIRE(fused.rows == dense.rows);
        REQUIRE(fused.cols == dense.cols);
        for (std::size_t i = 0; i < fused.size(); ++i)
          CHECK(testutil::rel_err(fused.data[i], dense.data[i], 1e-12) < 1e-12);
      }
    }
  }

  TEST_CASE("fused variance backward matches finite differences in sigma2") {
    // K is linear in sigma2, so central differences are exact to round-off.
    MlpArchitecture arch(3, {5, 4}, {2, 2});
    RngStream rng(555, "vb");
    ParameterVector p = random_params(arch, &rng);
    Tensor2 x = random_input(4, 3, &rng);
    std::vector<double> s2 = random_sigma2(arch.param_count(), &rng);
    LinearizationCache cache = fsvi::mlp_linearize(arch, p, x, 2);
    const std::size_t d = arch.output_dim(2);

    Tensor2 weights(4, d);  // arbitrary upstream gradient
    for (double& v : weights.data) v = rng.uniform(-1.0, 1.0);
    auto weighted_sum = [&](const std::vector<double>& sig) {
      Tensor2 k = fsvi::linearized_variance_diag(arch, cache, sig);
      double acc = 0.0;
      for (std::size_t i = 0; i < k.size(); ++i) acc += weights.data[i] * k.data[i];
      return acc;
    };

    std::vector<double> grad(arch.param_count(), 0.0);
    fsvi::linearized_variance_backward(arch, cache, weights, &grad);
    auto fd = testutil::fd_gradient(weighted_sum, s2, 1e-4);
    CHECK(testutil::max_rel_err(grad, fd, 1e-7) < 1e-6);
  }
}
