#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hsf/cube.hpp"
#include "hsf/rng.hpp"

namespace hsf {

// Explicit degradation operators and dataset simulation. All functions are
// pure and templated on the scalar type of the cube.

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// S x s spectral response: column j weights the S bands into MSI band j.
template <typename Scalar>
struct SpectralResponse {
  DenseMatrix<Scalar> matrix;

  Eigen::Index hsi_bands() const { return matrix.rows(); }
  Eigen::Index msi_bands() const { return matrix.cols(); }

  /// Non-negative entries and unit column sums.
  void validate(double tol = 1e-9) const {
    if (matrix.size() == 0) throw ConfigError("empty spectral response");
    if ((matrix.array() < Scalar(0)).any()) throw ConfigError("spectral response has negative entries");
    for (Eigen::Index j = 0; j < matrix.cols(); ++j)
      if (std::abs(static_cast<double>(matrix.col(j).sum()) - 1.0) > tol)
        throw ConfigError("spectral response column " + std::to_string(j) + " does not sum to 1");
  }
};

/// Cyclic blur with `kernel` followed by keeping every `decimation`-th sample
/// (phase 0) along both axes. Tap (a, b) of the kernel reads input offset
/// (a - (kh-1)/2, b - (kw-1)/2) from the kept sample.
template <typename Scalar>
struct SpatialDegradation {
  DenseMatrix<Scalar> kernel;
  Eigen::Index decimation = 1;

  Eigen::Index anchor_row() const { return (kernel.rows() - 1) / 2; }
  Eigen::Index anchor_col() const { return (kernel.cols() - 1) / 2; }
};

/// Separable Gaussian sampled at offsets i - (size-1)/2, normalized to sum 1.
inline DenseMatrix<double> gaussian_kernel(Eigen::Index size = 8, double sigma = 2.0) {
  if (sigma <= 0.0) throw ConfigError("gaussian_kernel: sigma must be positive");
  if (size < 1) throw ConfigError("gaussian_kernel: size must be positive");
  Eigen::VectorXd g(size);
  const double c = 0.5 * static_cast<double>(size - 1);
  for (Eigen::Index i = 0; i < size; ++i) {
    const double t = static_cast<double>(i) - c;
    g[i] = std::exp(-t * t / (2.0 * sigma * sigma));
  }
  DenseMatrix<double> k = g * g.transpose();
  return k / k.sum();
}

/// Single-tap kernel: C reduces to pure decimation.
inline DenseMatrix<double> delta_kernel() { return DenseMatrix<double>::Ones(1, 1); }

/// s Gaussian lobes spread over S bands, columns normalized to sum 1.
inline SpectralResponse<double> synthetic_response(Eigen::Index hsi_bands, Eigen::Index msi_bands) {
  if (hsi_bands < 1 || msi_bands < 1) throw ConfigError("synthetic_response: bad band counts");
  SpectralResponse<double> r;
  r.matrix.resize(hsi_bands, msi_bands);
  const double width = std::max(1.0, 0.6 * static_cast<double>(hsi_bands) / static_cast<double>(msi_bands));
  for (Eigen::Index j = 0; j < msi_bands; ++j) {
    const double center =
        (static_cast<double>(j) + 0.5) * static_cast<double>(hsi_bands) / static_cast<double>(msi_bands) - 0.5;
    for (Eigen::Index b = 0; b < hsi_bands; ++b) {
      const double t = (static_cast<double>(b) - center) / width;
      r.matrix(b, j) = std::exp(-0.5 * t * t);
    }
    r.matrix.col(j) /= r.matrix.col(j).sum();
  }
  return r;
}

/// Whitespace-separated rows of numbers, one matrix row per line.
inline DenseMatrix<double> load_matrix_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IOError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (!ls.eof()) throw IOError("non-numeric entry in " + path.string());
    if (!rows.empty() && row.size() != rows.front().size()) throw IOError("ragged matrix in " + path.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty() || rows.front().empty()) throw IOError("empty matrix file " + path.string());
  DenseMatrix<double> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

/// Plain text, S lines of s whitespace-separated numbers.
inline SpectralResponse<double> load_spectral_response(const std::filesystem::path& path) {
  return {load_matrix_text(path)};
}

inline void save_matrix_text(const std::filesystem::path& path, const DenseMatrix<double>& m) {
  std::ofstream os(path);
  if (!os) throw IOError("cannot write " + path.string());
  os.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
}

/// Y = X R on the (WH) x S matrix form.
template <typename Scalar>
Cube<Scalar> apply_R(const Cube<Scalar>& x, const SpectralResponse<Scalar>& r) {
  if (x.bands() != r.hsi_bands())
    throw ShapeError("apply_R: cube has " + std::to_string(x.bands()) + " bands, response expects " +
                     std::to_string(r.hsi_bands()));
  Cube<Scalar> y(x.width(), x.height(), r.msi_bands());
  y.as_matrix().noalias() = x.as_matrix() * r.matrix;
  return y;
}

/// Adjoint of apply_R: Y R^T.
template <typename Scalar>
Cube<Scalar> apply_RT(const Cube<Scalar>& y, const SpectralResponse<Scalar>& r) {
  if (y.bands() != r.msi_bands()) throw ShapeError("apply_RT: band mismatch");
  Cube<Scalar> x(y.width(), y.height(), r.hsi_bands());
  x.as_matrix().noalias() = y.as_matrix() * r.matrix.transpose();
  return x;
}

template <typename Scalar>
Cube<Scalar> apply_C(const Cube<Scalar>& x, const SpatialDegradation<Scalar>& c) {
  const Eigen::Index d = c.decimation;
  if (d < 1 || x.width() % d != 0 || x.height() % d != 0)
    throw ShapeError("apply_C: decimation " + std::to_string(d) + " does not divide " +
                     std::to_string(x.width()) + "x" + std::to_string(x.height()));
  const Eigen::Index H = x.height(), W = x.width(), h = H / d, w = W / d;
  const Eigen::Index kh = c.kernel.rows(), kw = c.kernel.cols();
  const Eigen::Index oa = c.anchor_row(), ob = c.anchor_col();
  Cube<Scalar> z(w, h, x.bands());
  for (Eigen::Index band = 0; band < x.bands(); ++band) {
    const auto src = x.band(band);
    auto dst = z.band(band);
    for (Eigen::Index i = 0; i < h; ++i)
      for (Eigen::Index j = 0; j < w; ++j) {
        Scalar acc = Scalar(0);
        for (Eigen::Index a = 0; a < kh; ++a) {
          const Eigen::Index r = ((d * i + a - oa) % H + H) % H;
          for (Eigen::Index b = 0; b < kw; ++b)
            acc += c.kernel(a, b) * src(r, ((d * j + b - ob) % W + W) % W);
        }
        dst(i, j) = acc;
      }
  }
  return z;
}

/// Adjoint of apply_C onto a width x height grid.
template <typename Scalar>
Cube<Scalar> apply_CT(const Cube<Scalar>& z, const SpatialDegradation<Scalar>& c,
                      Eigen::Index width, Eigen::Index height) {
  const Eigen::Index d = c.decimation;
  if (d < 1 || z.width() * d != width || z.height() * d != height)
    throw ShapeError("apply_CT: target grid does not match decimation");
  const Eigen::Index H = height, W = width;
  const Eigen::Index kh = c.kernel.rows(), kw = c.kernel.cols();
  const Eigen::Index oa = c.anchor_row(), ob = c.anchor_col();
  Cube<Scalar> x(W, H, z.bands());
  for (Eigen::Index band = 0; band < z.bands(); ++band) {
    const auto src = z.band(band);
    auto dst = x.band(band);
    for (Eigen::Index i = 0; i < z.height(); ++i)
      for (Eigen::Index j = 0; j < z.width(); ++j) {
        const Scalar v = src(i, j);
        for (Eigen::Index a = 0; a < kh; ++a) {
          const Eigen::Index r = ((d * i + a - oa) % H + H) % H;
          for (Eigen::Index b = 0; b < kw; ++b) dst(r, ((d * j + b - ob) % W + W) % W) += c.kernel(a, b) * v;
        }
      }
  }
  return x;
}

namespace detail {

// Catmull-Rom cubic convolution weight (a = -0.5).
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

struct ResampleTaps {
  std::vector<std::array<Eigen::Index, 4>> index;
  std::vector<std::array<double, 4>> weight;
};

// Half-pixel-centre mapping src = (dst + 0.5) * in / out - 0.5 with edge clamping.
inline ResampleTaps resample_taps(Eigen::Index in, Eigen::Index out) {
  ResampleTaps taps;
  taps.index.resize(static_cast<std::size_t>(out));
  taps.weight.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Eigen::Index o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    for (int m = 0; m < 4; ++m) {
      const double pos = base + m - 1;
      taps.weight[o][m] = cubic_weight(src - pos);
      taps.index[o][m] = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(pos), 0, in - 1);
    }
  }
  return taps;
}

}  // namespace detail

/// Per-band Catmull-Rom resampling to an explicit grid.
template <typename Scalar>
Cube<Scalar> bicubic_resize_to(const Cube<Scalar>& x, Eigen::Index width, Eigen::Index height) {
  if (width < 1 || height < 1) throw ConfigError("bicubic_resize: target size must be positive");
  if (width == x.width() && height == x.height()) return x;
  const auto rows = detail::resample_taps(x.height(), height);
  const auto cols = detail::resample_taps(x.width(), width);
  Cube<Scalar> y(width, height, x.bands());
  typename Cube<Scalar>::RowMatrix tmp(x.height(), width);
  for (Eigen::Index band = 0; band < x.bands(); ++band) {
    const auto src = x.band(band);
    for (Eigen::Index r = 0; r < x.height(); ++r)
      for (Eigen::Index c = 0; c < width; ++c) {
        double acc = 0.0;
        for (int m = 0; m < 4; ++m) acc += cols.weight[c][m] * static_cast<double>(src(r, cols.index[c][m]));
        tmp(r, c) = static_cast<Scalar>(acc);
      }
    auto dst = y.band(band);
    for (Eigen::Index r = 0; r < height; ++r)
      for (Eigen::Index c = 0; c < width; ++c) {
        double acc = 0.0;
        for (int m = 0; m < 4; ++m) acc += rows.weight[r][m] * static_cast<double>(tmp(rows.index[r][m], c));
        dst(r, c) = static_cast<Scalar>(acc);
      }
  }
  return y;
}

template <typename Scalar>
Cube<Scalar> bicubic_resize(const Cube<Scalar>& x, double factor) {
  if (!(factor > 0.0)) throw ConfigError("bicubic_resize: factor must be positive");
  const auto w = static_cast<Eigen::Index>(std::lround(static_cast<double>(x.width()) * factor));
  const auto h = static_cast<Eigen::Index>(std::lround(static_cast<double>(x.height()) * factor));
  return bicubic_resize_to(x, w, h);
}

template <typename Scalar>
struct ObservationPair {
  Cube<Scalar> msi;  // HR-MSI, W x H x s
  Cube<Scalar> hsi;  // LR-HSI, W/d x H/d x S
};

template <typename Scalar>
ObservationPair<Scalar> simulate_pair(const Cube<Scalar>& x, const SpectralResponse<Scalar>& r,
                                      const SpatialDegradation<Scalar>& c) {
  return {apply_R(x, r), apply_C(x, c)};
}

template <typename Scalar>
struct TrainingTriple {
  Cube<Scalar> msi;
  Cube<Scalar> hsi;
  Cube<Scalar> truth;
};

/// Degrades an observed (HR-MSI, LR-HSI) pair by `factor` so that the
/// observed LR-HSI becomes the ground truth. The HSI goes through the blur +
/// decimation operator with `kernel`, the MSI through bicubic resampling.
/// factor == 1 returns the inputs untouched.
template <typename Scalar>
TrainingTriple<Scalar> wald_protocol(const Cube<Scalar>& msi, const Cube<Scalar>& hsi,
                                     Eigen::Index factor,
                                     const DenseMatrix<Scalar>& kernel = gaussian_kernel().cast<Scalar>()) {
  if (factor < 1) throw ConfigError("wald_protocol: factor must be positive");
  if (msi.width() % factor != 0 || msi.height() % factor != 0 || hsi.width() % factor != 0 ||
      hsi.height() % factor != 0)
    throw ShapeError("wald_protocol: factor " + std::to_string(factor) + " does not divide the inputs");
  if (factor == 1) return {msi, hsi, hsi};
  SpatialDegradation<Scalar> c{kernel, factor};
  return {bicubic_resize_to(msi, msi.width() / factor, msi.height() / factor), apply_C(hsi, c), hsi};
}

/// `count` size x size patches at positions drawn uniformly (with
/// replacement) from the stride grid; count == 0 returns every grid patch
/// in raster order.
template <typename Scalar>
std::vector<Cube<Scalar>> extract_patches(const Cube<Scalar>& x, Eigen::Index size, Eigen::Index stride,
                                          std::size_t count, std::uint64_t seed) {
  if (size < 1 || size > std::min(x.width(), x.height()))
    throw ShapeError("extract_patches: patch size " + std::to_string(size) + " exceeds image " +
                     std::to_string(x.width()) + "x" + std::to_string(x.height()));
  if (stride < 1) throw ConfigError("extract_patches: stride must be positive");
  std::vector<std::pair<Eigen::Index, Eigen::Index>> grid;
  for (Eigen::Index r = 0; r + size <= x.height(); r += stride)
    for (Eigen::Index c = 0; c + size <= x.width(); c += stride) grid.emplace_back(r, c);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> picks;
  if (count == 0) {
    picks = grid;
  } else {
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) picks.push_back(grid[rng.below(grid.size())]);
  }
  std::vector<Cube<Scalar>> out;
  out.reserve(picks.size());
  for (const auto& [r0, c0] : picks) {
    Cube<Scalar> p(size, size, x.bands());
    for (Eigen::Index b = 0; b < x.bands(); ++b) p.band(b) = x.band(b).block(r0, c0, size, size);
    out.push_back(std::move(p));
  }
  return out;
}

/// Divides by the global maximum so the cube peaks at 1.
template <typename Scalar>
Cube<Scalar> normalize_peak(Cube<Scalar> x) {
  const Scalar mx = x.data().maxCoeff();
  if (mx > Scalar(0)) x.data() /= mx;
  return x;
}

/// Synthetic scene: `materials` smooth reflectance spectra mixed by
/// piecewise-smooth abundance maps (random discs and rectangles), peak
/// normalized. With materials <= s the spectra are recoverable from the MSI.
inline HsiCube synthetic_scene(Eigen::Index width, Eigen::Index height, Eigen::Index bands,
                               Eigen::Index materials, std::uint64_t seed) {
  Rng rng(seed);
  DenseMatrix<double> spectra(materials, bands);
  for (Eigen::Index m = 0; m < materials; ++m) {
    const double c1 = rng.uniform(0.0, static_cast<double>(bands));
    const double c2 = rng.uniform(0.0, static_cast<double>(bands));
    const double w1 = rng.uniform(0.15, 0.5) * static_cast<double>(bands);
    const double w2 = rng.uniform(0.15, 0.5) * static_cast<double>(bands);
    const double base = rng.uniform(0.1, 0.3);
    for (Eigen::Index b = 0; b < bands; ++b) {
      const double t1 = (static_cast<double>(b) - c1) / w1, t2 = (static_cast<double>(b) - c2) / w2;
      spectra(m, b) = base + 0.8 * std::exp(-0.5 * t1 * t1) + 0.5 * std::exp(-0.5 * t2 * t2);
    }
  }
  DenseMatrix<double> abundance = DenseMatrix<double>::Constant(width * height, materials, 0.2);
  const int shapes = 6 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    const auto m = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(materials)));
    const double cy = rng.uniform(0.0, static_cast<double>(height));
    const double cx = rng.uniform(0.0, static_cast<double>(width));
    const double ry = rng.uniform(0.1, 0.35) * static_cast<double>(height);
    const double rx = rng.uniform(0.1, 0.35) * static_cast<double>(width);
    const bool disc = rng.uniform() < 0.5;
    const double gain = rng.uniform(0.5, 1.5);
    for (Eigen::Index r = 0; r < height; ++r)
      for (Eigen::Index c = 0; c < width; ++c) {
        const double dy = (static_cast<double>(r) - cy) / ry, dx = (static_cast<double>(c) - cx) / rx;
        const bool inside = disc ? dy * dy + dx * dx <= 1.0 : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (inside) abundance(r * width + c, m) += gain;
      }
  }
  // Gentle shading so that abundances are not piecewise constant.
  const double fy = rng.uniform(0.5, 2.0), fx = rng.uniform(0.5, 2.0);
  for (Eigen::Index r = 0; r < height; ++r)
    for (Eigen::Index c = 0; c < width; ++c) {
      const double shade = 0.8 + 0.2 * std::sin(fy * 6.283185307179586 * r / height) *
                                     std::cos(fx * 6.283185307179586 * c / width);
      abundance.row(r * width + c) *= shade / abundance.row(r * width + c).sum();
    }
  HsiCube x(width, height, bands);
  x.as_matrix() = abundance * spectra;
  return normalize_peak(std::move(x));
}

}  // namespace hsf
