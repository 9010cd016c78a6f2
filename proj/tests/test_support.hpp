#pragma once

// Shared test oracles: independent of the implementation paths they check.

#include <cmath>
#include <functional>
#include <vector>

#include "vrpo/tensor.hpp"

namespace vrpo::test {

// Naive triple-loop matrix product oracle.
inline MatRM matmul_oracle(const MatRM& a, const MatRM& b) {
  MatRM c = MatRM::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

// Direct exp/normalize softmax oracle in double precision.
inline std::vector<double> softmax_oracle(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double z = 0.0;
  std::vector<double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(x[i] - m);
    z += e[i];
  }
  for (double& v : e) v /= z;
  return e;
}

// Two-pass mean/variance layer-norm oracle in double precision.
inline std::vector<double> layer_norm_oracle(const std::vector<double>& x, double eps) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps);
  return y;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checks = 0;
};

// Central-finite-difference gradient check. `loss_fn` must rebuild the
// computation from the current parameter values. The default step is the
// optimal central-difference step for float32 forward evaluation (cube root
// of the evaluation noise, ~1e-2).
//
// Checks the full-gradient direction and each per-parameter gradient
// direction at strict relative error (these directional derivatives are
// well-conditioned), plus `directions` random unit directions whose error is
// measured against a gradient-norm floor (random directions can have
// arbitrarily small derivatives, where float32 FD noise dominates any
// relative measure).
inline GradCheckResult gradcheck_directional(std::vector<Tensor> params,
                                             const std::function<Tensor()>& loss_fn,
                                             Rng& rng, int directions = 6,
                                             float h = 1e-2f) {
  GradTape tape;
  std::vector<ArrX> grads;
  {
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    backward(loss);
    for (Tensor& p : params) grads.push_back(p.grad());
  }
  tape.clear();

  double gnorm2 = 0.0;
  for (const ArrX& g : grads) gnorm2 += static_cast<double>(g.square().sum());
  const double gnorm = std::sqrt(gnorm2);

  GradCheckResult result;
  auto run_direction = [&](const std::vector<ArrX>& dirs, double floor) {
    double analytic = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
      analytic += static_cast<double>((grads[i] * dirs[i]).sum());
    auto shift = [&](float scale) {
      for (std::size_t i = 0; i < params.size(); ++i)
        params[i].array() += scale * dirs[i];
    };
    shift(h);
    const double plus = static_cast<double>(loss_fn().item());
    shift(-2.0f * h);
    const double minus = static_cast<double>(loss_fn().item());
    shift(h);
    const double fd = (plus - minus) / (2.0 * static_cast<double>(h));
    const double denom = std::max({std::abs(fd), std::abs(analytic), floor, 1e-8});
    result.max_rel_err = std::max(result.max_rel_err, std::abs(fd - analytic) / denom);
    ++result.checks;
  };

  auto zero_dirs = [&] {
    std::vector<ArrX> dirs;
    for (Tensor& p : params) dirs.push_back(ArrX::Zero(p.size()));
    return dirs;
  };

  if (gnorm > 1e-8) {
    // full-gradient direction
    std::vector<ArrX> dirs = zero_dirs();
    for (std::size_t i = 0; i < params.size(); ++i)
      dirs[i] = grads[i] / static_cast<float>(gnorm);
    run_direction(dirs, 0.0);
    // per-parameter gradient directions
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double pn = std::sqrt(static_cast<double>(grads[i].square().sum()));
      if (pn < 1e-3 * gnorm || pn < 1e-8) continue;
      std::vector<ArrX> pdirs = zero_dirs();
      pdirs[i] = grads[i] / static_cast<float>(pn);
      run_direction(pdirs, 0.0);
    }
  }

  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (int d = 0; d < directions; ++d) {
    std::vector<ArrX> dirs;
    double norm2 = 0.0;
    for (Tensor& p : params) {
      ArrX v(p.size());
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
      norm2 += static_cast<double>(v.square().sum());
      dirs.push_back(std::move(v));
    }
    const auto inv_norm = static_cast<float>(1.0 / std::sqrt(std::max(norm2, 1e-30)));
    for (ArrX& v : dirs) v *= inv_norm;
    run_direction(dirs, 0.25 * std::max(gnorm, 0.04));
  }
  return result;
}

}  // namespace vrpo::test
