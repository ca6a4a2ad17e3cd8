#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "hsf/cube.hpp"

namespace hsf {

// Picture quality indices. Arguments are (estimate, reference); the
// reference is assumed peak-normalized to 1.

struct MetricsReport {
  double psnr = 0.0;   // dB, mean of per-band values
  double sam = 0.0;    // degrees
  double ergas = 0.0;
  double ssim = 0.0;
};

inline constexpr double kPsnrCap = 100.0;

namespace detail {
template <typename Scalar>
void require_same_dims(const Cube<Scalar>& x, const Cube<Scalar>& ref, const char* what) {
  if (!x.same_dims(ref))
    throw ShapeError(std::string(what) + ": estimate and reference dims differ");
}
}  // namespace detail

template <typename Scalar>
double psnr(const Cube<Scalar>& x, const Cube<Scalar>& ref) {
  detail::require_same_dims(x, ref, "psnr");
  double total = 0.0;
  for (Eigen::Index b = 0; b < ref.bands(); ++b) {
    const double mse = (x.band(b) - ref.band(b)).template cast<double>().squaredNorm() /
                       static_cast<double>(ref.pixels());
    total += mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)) : kPsnrCap;
  }
  return total / static_cast<double>(ref.bands());
}

template <typename Scalar>
double sam(const Cube<Scalar>& x, const Cube<Scalar>& ref) {
  detail::require_same_dims(x, ref, "sam");
  if (ref.bands() < 2) throw ShapeError("sam: needs at least two bands");
  const auto X = x.as_matrix().template cast<double>();
  const auto R = ref.as_matrix().template cast<double>();
  double total = 0.0;
  Eigen::Index counted = 0;
  for (Eigen::Index p = 0; p < ref.pixels(); ++p) {
    const double nx = X.row(p).norm(), nr = R.row(p).norm();
    if (nx == 0.0 || nr == 0.0) continue;
    // 2 atan2(|u - v|, |u + v|) on unit vectors: exact 0 for parallel
    // spectra, where acos of a rounded cosine is not.
    const Eigen::RowVectorXd u = X.row(p) / nx, v = R.row(p) / nr;
    total += 2.0 * std::atan2((u - v).norm(), (u + v).norm());
    ++counted;
  }
  if (counted == 0) throw NumericsError("sam: every pixel has a zero-norm spectrum");
  return total / static_cast<double>(counted) * 180.0 / std::numbers::pi;
}

template <typename Scalar>
double ergas(const Cube<Scalar>& x, const Cube<Scalar>& ref, double scale) {
  detail::require_same_dims(x, ref, "ergas");
  double acc = 0.0;
  for (Eigen::Index b = 0; b < ref.bands(); ++b) {
    const double mu = ref.band(b).template cast<double>().mean();
    if (mu == 0.0) throw NumericsError("ergas: reference band " + std::to_string(b) + " has zero mean");
    const double mse = (x.band(b) - ref.band(b)).template cast<double>().squaredNorm() /
                       static_cast<double>(ref.pixels());
    acc += mse / (mu * mu);
  }
  return 100.0 / scale * std::sqrt(acc / static_cast<double>(ref.bands()));
}

namespace detail {

// Half-sample symmetric extension: ... c b a | a b c ... | c b a ...
inline Eigen::Index symmetric_index(Eigen::Index i, Eigen::Index n) {
  const Eigen::Index period = 2 * n;
  Eigen::Index m = ((i % period) + period) % period;
  return m < n ? m : period - 1 - m;
}

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline RowMatrixD gaussian_filter(const RowMatrixD& img, const Eigen::VectorXd& w) {
  const Eigen::Index H = img.rows(), W = img.cols(), r = w.size() / 2;
  RowMatrixD tmp(H, W), out(H, W);
  for (Eigen::Index i = 0; i < H; ++i)
    for (Eigen::Index j = 0; j < W; ++j) {
      double acc = 0.0;
      for (Eigen::Index t = -r; t <= r; ++t) acc += w[t + r] * img(i, symmetric_index(j + t, W));
      tmp(i, j) = acc;
    }
  for (Eigen::Index i = 0; i < H; ++i)
    for (Eigen::Index j = 0; j < W; ++j) {
      double acc = 0.0;
      for (Eigen::Index t = -r; t <= r; ++t) acc += w[t + r] * tmp(symmetric_index(i + t, H), j);
      out(i, j) = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM per band (11x11 Gaussian window, sigma 1.5, K1 = 0.01,
/// K2 = 0.03, L = 1, symmetric boundary), averaged over bands.
template <typename Scalar>
double ssim(const Cube<Scalar>& x, const Cube<Scalar>& ref) {
  detail::require_same_dims(x, ref, "ssim");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Eigen::VectorXd w(11);
  for (int i = 0; i < 11; ++i) w[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
  w /= w.sum();
  double total = 0.0;
  for (Eigen::Index b = 0; b < ref.bands(); ++b) {
    const detail::RowMatrixD a = x.band(b).template cast<double>();
    const detail::RowMatrixD r = ref.band(b).template cast<double>();
    const auto mu_a = detail::gaussian_filter(a, w);
    const auto mu_r = detail::gaussian_filter(r, w);
    const auto saa = detail::gaussian_filter(a.cwiseProduct(a), w);
    const auto srr = detail::gaussian_filter(r.cwiseProduct(r), w);
    const auto sar = detail::gaussian_filter(a.cwiseProduct(r), w);
    const auto va = (saa - mu_a.cwiseProduct(mu_a)).array();
    const auto vr = (srr - mu_r.cwiseProduct(mu_r)).array();
    const auto cov = (sar - mu_a.cwiseProduct(mu_r)).array();
    const auto num = (2.0 * mu_a.array() * mu_r.array() + c1) * (2.0 * cov + c2);
    const auto den = (mu_a.array().square() + mu_r.array().square() + c1) * (va + vr + c2);
    total += (num / den).mean();
  }
  return total / static_cast<double>(ref.bands());
}

template <typename Scalar>
MetricsReport evaluate(const Cube<Scalar>& x, const Cube<Scalar>& ref, double scale) {
  return {psnr(x, ref), sam(x, ref), ergas(x, ref, scale), ssim(x, ref)};
}

/// "name=value" lines with four decimals.
inline std::string format_report(const MetricsReport& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "psnr=%.4f\nsam=%.4f\nergas=%.4f\nssim=%.4f\n", m.psnr, m.sam,
                m.ergas, m.ssim);
  return buf;
}

/// Same keys at full double precision.
inline std::string format_report_exact(const MetricsReport& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "psnr=%.17g\nsam=%.17g\nergas=%.17g\nssim=%.17g\n", m.psnr, m.sam,
                m.ergas, m.ssim);
  return buf;
}

}  // namespace hsf
