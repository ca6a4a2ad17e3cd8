#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hsf/observation.hpp"

namespace hsf {

/// Closed-form priors f for the classical proximal-gradient reference.
enum class PriorKind {
  none,       // f = 0
  quadratic,  // f = 1/2 ||X||_F^2
  sparse,     // f = ||X||_1
};

PriorKind parse_prior_kind(const std::string& s);
std::string to_string(PriorKind k);

/// min_X 1/2||XR - Y||^2 + 1/2||CX - Z||^2 + lambda f(X)
template <typename Scalar>
struct FusionProblem {
  Cube<Scalar> msi;  // Y
  Cube<Scalar> hsi;  // Z
  SpectralResponse<Scalar> response;
  SpatialDegradation<Scalar> degradation;
  double lambda = 0.0;
  PriorKind prior = PriorKind::none;

  Eigen::Index width() const { return msi.width(); }
  Eigen::Index height() const { return msi.height(); }
  Eigen::Index bands() const { return hsi.bands(); }

  void validate() const {
    const auto d = degradation.decimation;
    if (response.hsi_bands() != hsi.bands() || response.msi_bands() != msi.bands())
      throw ShapeError("fusion problem: spectral response does not match band counts");
    if (hsi.width() * d != msi.width() || hsi.height() * d != msi.height())
      throw ShapeError("fusion problem: LR grid times decimation does not match HR grid");
    if (lambda < 0.0) throw ConfigError("fusion problem: lambda must be non-negative");
  }
};

/// Gradient of the two fidelity terms: (XR - Y)R^T + C^T(CX - Z).
template <typename Scalar>
Cube<Scalar> grad_g(const Cube<Scalar>& x, const FusionProblem<Scalar>& p) {
  if (x.width() != p.width() || x.height() != p.height() || x.bands() != p.bands())
    throw ShapeError("grad_g: iterate dims do not match the problem");
  Cube<Scalar> spectral_residual = apply_R(x, p.response);
  spectral_residual.data() -= p.msi.data();
  Cube<Scalar> spatial_residual = apply_C(x, p.degradation);
  spatial_residual.data() -= p.hsi.data();
  Cube<Scalar> g = apply_RT(spectral_residual, p.response);
  g.data() += apply_CT(spatial_residual, p.degradation, p.width(), p.height()).data();
  return g;
}

template <typename Scalar>
double prior_value(const Cube<Scalar>& x, PriorKind kind) {
  switch (kind) {
    case PriorKind::none: return 0.0;
    case PriorKind::quadratic: return 0.5 * static_cast<double>(x.data().squaredNorm());
    case PriorKind::sparse: return static_cast<double>(x.data().template lpNorm<1>());
  }
  return 0.0;
}

template <typename Scalar>
double objective(const Cube<Scalar>& x, const FusionProblem<Scalar>& p) {
  const double fy = 0.5 * static_cast<double>((apply_R(x, p.response).data() - p.msi.data()).squaredNorm());
  const double fz =
      0.5 * static_cast<double>((apply_C(x, p.degradation).data() - p.hsi.data()).squaredNorm());
  return fy + fz + p.lambda * prior_value(x, p.prior);
}

/// prox_{t f}(v) for the closed-form priors.
template <typename Scalar>
Cube<Scalar> prox(Cube<Scalar> v, double t, PriorKind kind) {
  if (t < 0.0) throw ConfigError("prox: threshold must be non-negative");
  const auto ts = static_cast<Scalar>(t);
  switch (kind) {
    case PriorKind::none: break;
    case PriorKind::quadratic: v.data() /= (Scalar(1) + ts); break;
    case PriorKind::sparse:
      v.data() = v.data().unaryExpr([ts](Scalar a) {
        return a > ts ? a - ts : (a < -ts ? a + ts : Scalar(0));
      });
      break;
  }
  return v;
}

/// Power iteration on X -> grad_g(X) - grad_g(0) = XRR^T + C^T C X; returns
/// the Rayleigh quotient of the last iterate.
template <typename Scalar>
double lipschitz_estimate(const FusionProblem<Scalar>& p, int power_iters, std::uint64_t seed = 0) {
  if (power_iters < 1) throw ConfigError("lipschitz_estimate: need at least one iteration");
  Rng rng(seed);
  Cube<Scalar> x(p.width(), p.height(), p.bands());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<Scalar>(rng.normal());
  x.data().normalize();
  double estimate = 0.0;
  for (int it = 0; it < power_iters; ++it) {
    Cube<Scalar> y = apply_RT(apply_R(x, p.response), p.response);
    y.data() += apply_CT(apply_C(x, p.degradation), p.degradation, p.width(), p.height()).data();
    estimate = static_cast<double>(x.data().dot(y.data()));
    const Scalar n = y.data().norm();
    if (n == Scalar(0)) return 0.0;
    x.data() = y.data() / n;
  }
  return estimate;
}

struct SolveOptions {
  double eta = 0.0;  // step size; <= 0 selects 1/L
  int max_iters = 1000;
  double rel_tol = 1e-8;  // relative objective change over `window` iterations
  int window = 10;
  int power_iters = 100;
  double divergence_limit = 1e12;
};

template <typename Scalar>
struct SolveResult {
  Cube<Scalar> x;
  std::vector<double> trace;  // objective at X(0), X(1), ...
  int iterations = 0;
  bool converged = false;
  double eta = 0.0;
};

/// X(k+1) = prox_{lambda eta f}(X(k) - eta grad_g(X(k))), X(0) = bicubic(Z).
template <typename Scalar>
SolveResult<Scalar> solve(const FusionProblem<Scalar>& p, const SolveOptions& opts) {
  p.validate();
  SolveResult<Scalar> res;
  res.eta = opts.eta > 0.0 ? opts.eta : 1.0 / lipschitz_estimate(p, opts.power_iters);
  if (!(res.eta > 0.0) || !std::isfinite(res.eta)) throw ConfigError("solve: step size must be positive");
  res.x = bicubic_resize_to(p.hsi, p.width(), p.height());
  res.trace.push_back(objective(res.x, p));
  const auto eta = static_cast<Scalar>(res.eta);
  for (int k = 0; k < opts.max_iters; ++k) {
    Cube<Scalar> g = grad_g(res.x, p);
    res.x.data() -= eta * g.data();
    res.x = prox(std::move(res.x), p.lambda * res.eta, p.prior);
    const double f = objective(res.x, p);
    res.trace.push_back(f);
    res.iterations = k + 1;
    if (!std::isfinite(f) || f > opts.divergence_limit)
      throw NumericsError("classical solver diverged at iteration " + std::to_string(k + 1));
    const auto n = res.trace.size();
    if (opts.window > 0 && n > static_cast<std::size_t>(opts.window)) {
      const double prev = res.trace[n - 1 - static_cast<std::size_t>(opts.window)];
      if (std::abs(prev - f) <= opts.rel_tol * std::max(std::abs(f), 1e-300)) {
        res.converged = true;
        break;
      }
    }
  }
  return res;
}

inline PriorKind parse_prior_kind(const std::string& s) {
  if (s == "none") return PriorKind::none;
  if (s == "quadratic") return PriorKind::quadratic;
  if (s == "sparse") return PriorKind::sparse;
  throw ConfigError("unknown prior '" + s + "' (expected none|quadratic|sparse)");
}

inline std::string to_string(PriorKind k) {
  switch (k) {
    case PriorKind::none: return "none";
    case PriorKind::quadratic: return "quadratic";
    case PriorKind::sparse: return "sparse";
  }
  return "none";
}

}  // namespace hsf
